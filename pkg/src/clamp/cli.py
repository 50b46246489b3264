"""Command line entry point: ``clamp <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import harness as H
from . import verify, world


def _config(args) -> H.RunConfig:
    cfg = H.load_config(args.config)
    print(f"config hash {cfg.hash()}", file=sys.stderr)
    return cfg


def cmd_gen_data(args) -> int:
    if args.out is None:
        cfg = _config(args)
        for split, manifest in H.gen_data(cfg).items():
            print(f"{split}: {len(manifest['episodes'])} episodes in {H.split_dir(cfg, split)}")
        return 0
    tasks = args.tasks.split(",") if args.tasks else list(world.TASKS)
    unknown = [t for t in tasks if t not in world.TASKS]
    if unknown:
        raise SystemExit(f"unknown tasks: {unknown}")
    config = ds.WorldConfig(keep_failures=args.keep_failures)
    episodes, failures = ds.generate(tasks, args.episodes_per_task, args.seed, config)
    manifest = ds.write_dataset(episodes, args.out, config.hash())
    print(f"wrote {len(manifest['episodes'])} episodes to {args.out} ({len(failures)} failures)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.no_policy:
        cfg = cfg.replace(train={"policy_parallel": False})
    out = H.pretrain_encoders(cfg, force=args.force)
    print(out)
    return 0


def cmd_pretrain_policy(args) -> int:
    print(H.pretrain_policy(_config(args), force=args.force))
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    if not args.scratch and (args.encoder is None or args.policy is None):
        raise SystemExit("finetune needs --encoder and --policy unless --scratch is given")
    result = H.finetune_policy(cfg, args.encoder, args.policy, scratch=args.scratch, force=args.force)
    print(json.dumps(result, indent=1))
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg = _config(args)
    report = H.eval_retrieval(args.encoder, cfg, split=args.split, n=args.n)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_eval_policy(args) -> int:
    cfg = _config(args)
    report = H.eval_policy(args.policy, cfg, args.task, args.trials, args.encoder, args.seed, args.max_steps)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_verify_lemmas(args) -> int:
    results = verify.run_all(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.1f}s)")
    return 0 if all(r.passed for r in results) else 1


def write_pgm(path: Path, depth: np.ndarray) -> None:
    """16-bit binary PGM of depth in millimeters."""
    mm = np.clip(np.round(depth * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + mm.tobytes())


def cmd_render_preview(args) -> int:
    cfg = _config(args)
    path = Path(args.episode)
    ep = ds.parse_episode(path.read_bytes(), str(path))
    if not 0 <= args.step < len(ep):
        raise SystemExit(f"step must be in [0, {len(ep)})")
    obs = H.dxyz_observation(ep.depth[args.step], ep.cameras, ep.proprio[args.step], cfg.render,
                             H.frame_seed(ep.seed, args.step))
    n = H.n_views(cfg.render)
    if not 0 <= args.view < n:
        raise SystemExit(f"view must be in [0, {n})")
    s = cfg.render.view_size
    view = obs.image[:, args.view * s:(args.view + 1) * s]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out.with_suffix(".pgm"), view[..., 0])
    # raw little-endian float32 (H, W, 4): depth, x, y, z
    view.astype("<f4").tofile(out.with_suffix(".dxyz"))
    print(f"wrote {out.with_suffix('.pgm')} and {out.with_suffix('.dxyz')} ({s}x{s}x4 float32)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clamp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help, config=True):
        sp = sub.add_parser(name, help=help)
        if config:
            sp.add_argument("--config", help="TOML run configuration (defaults when omitted)")
        sp.set_defaults(func=func)
        return sp

    sp = cmd("gen-data", cmd_gen_data, "generate episode datasets")
    sp.add_argument("--tasks", help="comma-separated task names (with --out)")
    sp.add_argument("--episodes-per-task", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="write one dataset here instead of the configured splits")
    sp.add_argument("--keep-failures", action="store_true")

    sp = cmd("pretrain", cmd_pretrain, "contrastive encoder pretraining (policy in parallel)")
    sp.add_argument("--no-policy", action="store_true", help="skip the interleaved policy pretraining")
    sp.add_argument("--force", action="store_true")

    sp = cmd("pretrain-policy", cmd_pretrain_policy, "policy pretraining alone")
    sp.add_argument("--force", action="store_true")

    sp = cmd("finetune", cmd_finetune, "fine-tune on the held-out task")
    sp.add_argument("--encoder")
    sp.add_argument("--policy")
    sp.add_argument("--scratch", action="store_true", help="train from random weights without encoder tokens")
    sp.add_argument("--force", action="store_true")

    sp = cmd("eval-retrieval", cmd_eval_retrieval, "Recall@K in the six retrieval directions")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--split", default="pretrain_val", choices=list(H.SPLITS))
    sp.add_argument("-n", type=int, default=None, help="number of selected examples")

    sp = cmd("eval-policy", cmd_eval_policy, "closed-loop policy rollouts")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--encoder")
    sp.add_argument("--task", default="slide_drawer", choices=list(world.TASKS))
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-steps", type=int, default=80)

    sp = cmd("verify-lemmas", cmd_verify_lemmas, "numerical checks of the STRING identities", config=False)
    sp.add_argument("--seed", type=int, default=0)

    sp = cmd("render-preview", cmd_render_preview, "dump one DXYZ view of an episode step")
    sp.add_argument("--episode", required=True, help="episode file (.ep)")
    sp.add_argument("--step", type=int, default=0)
    sp.add_argument("--view", type=int, default=0)
    sp.add_argument("--out", required=True, help="output path stem")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (H.ConfigError, H.CompatibilityError, ds.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
