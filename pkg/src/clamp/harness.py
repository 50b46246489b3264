"""Run configuration, data preparation, training loops and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from . import world
from .contrastive import TempBias, pairwise_logits, tri_modal_loss
from .diffcore import load_checkpoint, load_into, save_checkpoint, seeded, stream_rng
from .diffusion_policy import (
    Normalizer, PolicyConfig, PolicyNet, load_policy, make_schedule, sample_actions,
    save_policy, train_step, warmup_lambda,
)
from .encoders import ClampEncoders, EncoderConfig, tokenize
from .geometry import RenderConfig, n_views, render_observation, scene_cloud

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    seed: int = 0
    pretrain_episodes_per_task: int = 128
    val_episodes_per_task: int = 32
    finetune_episodes: int = 64
    finetune_val_episodes: int = 16


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr: float = 2e-3
    warmup_frac: float = 0.05
    weight_decay: float = 1e-4
    sign: str = "standard"
    per_pair_tempbias: bool = False
    policy_parallel: bool = True
    policy_batch: int = 32
    policy_lr: float = 3e-4
    policy_warmup: int = 100
    finetune_steps: int = 1000
    finetune_lr: float = 1e-4
    finetune_warmup: int = 100
    freeze_encoders: bool = True
    eval_every: int = 500
    val_frames: int = 64
    retrieval_examples: int = 64
    sampler: str = "literal"
    clip_sample: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    world: ds.WorldConfig = field(default_factory=ds.WorldConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def model_hash(self) -> str:
        """Hash of everything that fixes parameter shapes and input semantics."""
        d = self.to_dict()
        key = {k: d[k] for k in ("world", "render", "encoder", "policy")}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()

    def replace(self, **sections) -> "RunConfig":
        """Copy with top-level fields or section overrides given as dicts."""
        updates = {}
        for name, value in sections.items():
            current = getattr(self, name)
            updates[name] = dataclasses.replace(current, **value) if isinstance(value, dict) else value
        return dataclasses.replace(self, **updates)


def validate(cfg: RunConfig) -> None:
    t = cfg.train
    if t.sign not in ("standard", "literal"):
        raise ConfigError(f"train.sign must be 'standard' or 'literal', got {t.sign!r}")
    if t.sampler not in ("literal", "textbook"):
        raise ConfigError(f"train.sampler must be 'literal' or 'textbook', got {t.sampler!r}")
    for name in ("batch_size", "steps", "policy_batch", "finetune_steps", "eval_every", "val_frames",
                 "retrieval_examples"):
        if getattr(t, name) <= 0:
            raise ConfigError(f"train.{name} must be positive")
    if n_views(cfg.render) != cfg.encoder.n_views:
        raise ConfigError(f"encoder.n_views={cfg.encoder.n_views} but rendering produces {n_views(cfg.render)} views")
    if cfg.render.view_size != cfg.encoder.view_size or cfg.render.patch != cfg.encoder.patch:
        raise ConfigError("render and encoder disagree on view size or patch size")
    if cfg.policy.clamp_dim != cfg.encoder.embed_dim:
        raise ConfigError("policy.clamp_dim must equal encoder.embed_dim")
    if cfg.policy.clamp_image_tokens != cfg.encoder.n_patches:
        raise ConfigError("policy.clamp_image_tokens must equal the encoder patch count")
    if cfg.policy.clamp_action_tokens != cfg.encoder.action_history:
        raise ConfigError("policy.clamp_action_tokens must equal encoder.action_history")
    if cfg.policy.action_dim != world.ACTION_DIM or cfg.encoder.action_dim != world.ACTION_DIM:
        raise ConfigError(f"action_dim must be {world.ACTION_DIM} for the two-arm robot")
    if cfg.policy.image_size != cfg.world.sensor_size:
        raise ConfigError("policy.image_size must equal world.sensor_size")


_SECTIONS = {"data": DataConfig, "world": ds.WorldConfig, "render": RenderConfig,
             "encoder": EncoderConfig, "policy": PolicyConfig, "train": TrainConfig}


def _section(cls, values: dict, name: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    out = {}
    for k, v in values.items():
        default = known[k].default
        out[k] = tuple(v) if isinstance(default, tuple) else v
    return cls(**out)


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    top = {k: d.pop(k) for k in ("seed", "out") if k in d}
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    sections = {name: _section(cls, d.get(name, {}), name) for name, cls in _SECTIONS.items()}
    try:
        return RunConfig(**top, **sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, env=os.environ) -> RunConfig:
    """TOML config (or defaults); ``CLAMP_SEED`` overrides the run seed."""
    d = {}
    if path is not None:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    if "CLAMP_SEED" in env:
        try:
            d["seed"] = int(env["CLAMP_SEED"])
        except ValueError:
            raise ConfigError(f"CLAMP_SEED must be an integer, got {env['CLAMP_SEED']!r}") from None
    return config_from_dict(d)


# ---------------------------------------------------------------- data preparation

SPLITS = {
    # name: (tasks, episodes attribute, seed offset)
    "pretrain": (world.PRETRAIN_TASKS, "pretrain_episodes_per_task", 0),
    "pretrain_val": (world.PRETRAIN_TASKS, "val_episodes_per_task", 100_000),
    "finetune": (world.FINETUNE_TASKS, "finetune_episodes", 200_000),
    "finetune_val": (world.FINETUNE_TASKS, "finetune_val_episodes", 300_000),
}


def split_dir(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.data.root) / split


def split_hash(cfg: RunConfig, split: str) -> str:
    tasks, attr, offset = SPLITS[split]
    key = {"world": cfg.world.to_dict(), "tasks": list(tasks), "n": getattr(cfg.data, attr),
           "seed": cfg.data.seed + offset, "version": ds.VERSION}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()


def gen_data(cfg: RunConfig, splits=tuple(SPLITS), log=print) -> dict:
    """Generate missing or stale dataset splits; returns split -> manifest."""
    out = {}
    for split in splits:
        tasks, attr, offset = SPLITS[split]
        root = split_dir(cfg, split)
        h = split_hash(cfg, split)
        try:
            manifest = ds.read_manifest(root)
            if manifest.get("config_hash") == h:
                out[split] = manifest
                continue
        except ds.DatasetError:
            pass
        t0 = time.time()
        episodes, failures = ds.generate(tasks, getattr(cfg.data, attr), cfg.data.seed + offset, cfg.world)
        out[split] = ds.write_dataset(episodes, root, h)
        log(f"{split}: {len(episodes)} episodes, {len(failures)} failures, {time.time() - t0:.0f}s")
    return out


def ensure_split(cfg: RunConfig, split: str) -> dict:
    return gen_data(cfg, (split,), log=lambda *_: None)[split]


def grid_cell(position, box=world.WORKSPACE, n: int = 3) -> tuple[int, int]:
    """Cell of the xy position in an ``n x n`` grid over the workspace footprint."""
    u = box.normalize(np.asarray(position, dtype=np.float64))[:2]
    c = np.clip(np.floor(u * n), 0, n - 1).astype(int)
    return int(c[0]), int(c[1])


@dataclass
class Frames:
    """Flattened per-step arrays of a split."""

    episode: np.ndarray  # (N,) episode index
    step: np.ndarray  # (N,) time step
    offsets: np.ndarray  # (E+1,) frame offset of each episode
    tasks: list
    seeds: list
    actions: np.ndarray  # (N, A)
    proprio: np.ndarray  # (N, A)
    rgb: np.ndarray  # (N, n_cams, H, W, 3) uint8
    text_ids: np.ndarray  # (N, L)
    texts: list
    first_object_start: np.ndarray  # (E, 3) initial position of the first listed object

    def __len__(self) -> int:
        return len(self.step)

    def history(self, idx, H: int, pad: str = "start") -> tuple[np.ndarray, np.ndarray]:
        """Raw previous actions ``a_{t-H} .. a_{t-1}`` and the real-step mask.

        Steps before 0 repeat the start configuration (``pad="start"``, mask
        true) or are zeros with the mask false (``pad="zero"``).
        """
        out = np.zeros((len(idx), H, self.actions.shape[1]))
        mask = np.ones((len(idx), H), dtype=bool)
        for j, i in enumerate(idx):
            t, base = self.step[i], self.offsets[self.episode[i]]
            for h in range(H):
                s = t - H + h
                if s >= 0:
                    out[j, h] = self.actions[base + s]
                elif pad == "start":
                    out[j, h] = self.proprio[base]
                else:
                    mask[j, h] = False
        return out, mask

    def chunk(self, idx, C: int) -> np.ndarray:
        """Raw actions ``a_t .. a_{t+C-1}``; past the end the last action is held."""
        out = np.zeros((len(idx), C, self.actions.shape[1]))
        for j, i in enumerate(idx):
            end = self.offsets[self.episode[i] + 1]
            steps = np.minimum(np.arange(i, i + C), end - 1)
            out[j] = self.actions[steps]
        return out


def load_frames(root, text_tokens: int, keep_rgb: bool = True):
    """``(Frames, episodes)``; episodes are returned for depth access."""
    manifest, episodes = ds.read_dataset(root)
    lengths = [len(e) for e in episodes]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    texts = [t for e in episodes for t in e.texts]
    frames = Frames(
        episode=np.concatenate([np.full(n, i) for i, n in enumerate(lengths)]) if episodes else np.zeros(0, int),
        step=np.concatenate([np.arange(n) for n in lengths]) if episodes else np.zeros(0, int),
        offsets=offsets,
        tasks=[e.task for e in episodes],
        seeds=[e.seed for e in episodes],
        actions=np.concatenate([e.actions for e in episodes]) if episodes else np.zeros((0, world.ACTION_DIM)),
        proprio=np.concatenate([e.proprio for e in episodes]) if episodes else np.zeros((0, world.ACTION_DIM)),
        rgb=np.concatenate([e.rgb for e in episodes]) if keep_rgb and episodes else np.zeros(0, np.uint8),
        text_ids=np.stack([tokenize(t, text_tokens) for t in texts]) if texts else np.zeros((0, text_tokens), int),
        texts=texts,
        first_object_start=np.array([e.object_poses[0, 0, :3] for e in episodes]).reshape(-1, 3),
    )
    return frames, episodes


def select_validation(frames: Frames, stride: int = 10, per_task: bool = True) -> np.ndarray:
    """Frames whose step is a multiple of ``stride`` from episodes whose first
    object starts in a 3x3 workspace cell not seen in an earlier episode."""
    seen: set = set()
    chosen = []
    for e in range(len(frames.tasks)):
        cell = grid_cell(frames.first_object_start[e])
        key = (frames.tasks[e], cell) if per_task else cell
        if key in seen:
            continue
        seen.add(key)
        lo, hi = frames.offsets[e], frames.offsets[e + 1]
        chosen += [i for i in range(lo, hi) if frames.step[i] % stride == 0]
    return np.array(chosen, dtype=np.int64)


def spread(indices: np.ndarray, n: int) -> np.ndarray:
    """``n`` evenly spaced entries of ``indices`` (all of them if fewer)."""
    if len(indices) <= n:
        return indices
    return indices[np.linspace(0, len(indices) - 1, n).round().astype(int)]


# ---------------------------------------------------------------- observation cache


def frame_seed(episode_seed: int, step: int) -> int:
    return int(stream_rng(episode_seed, "frame", step).integers(2 ** 31))


def dxyz_observation(depths, cams, joints, render_cfg: RenderConfig, seed: int):
    cloud = scene_cloud([np.asarray(d, dtype=np.float64) for d in depths], cams, world.WORKSPACE, render_cfg, seed)
    return render_observation(cloud, world.gripper_poses(joints), world.WORKSPACE, render_cfg)


class ObservationCache:
    """Multi-view DXYZ images (float16) and patch coordinates for every frame of a split."""

    def __init__(self, root, render_cfg: RenderConfig, log=print):
        root = Path(root)
        manifest = ds.read_manifest(root)
        key = {"render": dataclasses.asdict(render_cfg), "episodes": [e["sha256"] for e in manifest["episodes"]]}
        h = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
        self.dir = root / f"obs_{h}"
        done = self.dir / "done"
        if not done.exists():
            self._build(root, manifest, render_cfg, log)
            done.write_text("ok")
        self.image = np.load(self.dir / "image.npy", mmap_mode="r")
        self.coords = np.load(self.dir / "coords.npy")
        self.valid = np.load(self.dir / "valid.npy")

    def _build(self, root, manifest, render_cfg, log):
        self.dir.mkdir(parents=True, exist_ok=True)
        n = sum(e["length"] for e in manifest["episodes"])
        V = n_views(render_cfg)
        s = render_cfg.view_size
        P = (s // render_cfg.patch) ** 2 * V
        image = np.lib.format.open_memmap(self.dir / "image.npy", "w+", np.float16, (n, s, s * V, 4))
        coords = np.zeros((n, P, 3), np.float32)
        valid = np.zeros((n, P), bool)
        i, t0 = 0, time.time()
        for entry in manifest["episodes"]:
            ep = ds.read_episode(root, entry)
            for t in range(len(ep)):
                obs = dxyz_observation(ep.depth[t], ep.cameras, ep.proprio[t], render_cfg, frame_seed(ep.seed, t))
                image[i] = obs.image
                coords[i] = obs.patch_coords
                valid[i] = obs.patch_valid
                i += 1
        image.flush()
        del image
        np.save(self.dir / "coords.npy", coords)
        np.save(self.dir / "valid.npy", valid)
        log(f"rendered {n} observations for {root} in {time.time() - t0:.0f}s")

    def batch(self, idx) -> dict:
        idx = np.asarray(idx)
        order = np.argsort(idx)
        image = np.empty((len(idx),) + self.image.shape[1:], np.float32)
        image[order] = self.image[idx[order]]
        return {"image": torch.from_numpy(image), "coords": torch.from_numpy(self.coords[idx]),
                "patch_valid": torch.from_numpy(self.valid[idx])}


# ---------------------------------------------------------------- encoder pretraining


def action_normalizer(actions: np.ndarray) -> Normalizer:
    d = actions.shape[1]
    return Normalizer(np.zeros(d), np.ones(d), np.zeros(3), np.ones(3), actions.min(0), actions.max(0))


def encoder_batch(frames: Frames, cache: ObservationCache, idx, enc_cfg: EncoderConfig, norm: Normalizer) -> dict:
    batch = cache.batch(idx)
    hist, mask = frames.history(idx, enc_cfg.action_history, enc_cfg.history_pad)
    hist = np.where(mask[..., None], norm.norm_actions(hist), 0.0)
    batch["history"] = torch.from_numpy(hist).float()
    batch["history_mask"] = torch.from_numpy(mask)
    batch["text_ids"] = torch.from_numpy(frames.text_ids[idx])
    return batch


def cosine_lambda(total: int, warmup: int):
    def f(step):
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
    return f


def rgb_stats(rgb: np.ndarray, max_frames: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    sub = rgb[np.linspace(0, len(rgb) - 1, min(len(rgb), max_frames)).astype(int)].astype(np.float64) / 255.0
    flat = sub.reshape(-1, 3)
    return flat.mean(0), flat.std(0)


def policy_obs(frames: Frames, idx, norm: Normalizer, clamp_image=None, clamp_action=None) -> dict:
    obs = {"rgb": norm.norm_rgb(torch.from_numpy(frames.rgb[idx])),
           "proprio": torch.from_numpy(norm.norm_proprio(frames.proprio[idx])).float()}
    if clamp_image is not None:
        obs["clamp_image"] = torch.as_tensor(clamp_image[idx]).float()
        obs["clamp_action"] = torch.as_tensor(clamp_action[idx]).float()
    return obs


class CsvLog:
    """Append-only CSV with a fixed header; values are written with ``repr``."""

    def __init__(self, path, header):
        self.path = Path(path)
        self.header = list(header)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def append(self, *values):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in values])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / f"{name}_{cfg.hash()[:12]}"


def _write_meta(path: Path, cfg: RunConfig, **extra):
    meta = {"config_hash": cfg.hash(), "model_hash": cfg.model_hash(), "config": cfg.to_dict(), **extra}
    path.write_text(json.dumps(meta, indent=1, sort_keys=True))


def pretrain_encoders(cfg: RunConfig, log=print, force: bool = False) -> Path:
    """Contrastive pretraining; with ``train.policy_parallel`` the diffusion policy
    is pretrained in interleaved steps on the same split.  Returns the run directory."""
    out = run_dir(cfg, "pretrain")
    if (out / "done").exists() and not force:
        return out
    out.mkdir(parents=True, exist_ok=True)
    for f in ("metrics.csv", "policy_metrics.csv"):
        (out / f).unlink(missing_ok=True)
    ensure_split(cfg, "pretrain")
    root = split_dir(cfg, "pretrain")
    frames, episodes = load_frames(root, cfg.encoder.text_max_tokens, keep_rgb=cfg.train.policy_parallel)
    del episodes
    cache = ObservationCache(root, cfg.render, log)
    t = cfg.train
    anorm = action_normalizer(frames.actions)

    with seeded(cfg.seed, "encoder_init"):
        enc = ClampEncoders(cfg.encoder, t.per_pair_tempbias)
    opt = torch.optim.AdamW(enc.parameters(), lr=t.lr, weight_decay=t.weight_decay)
    warm = max(1, int(round(t.warmup_frac * t.steps)))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_lambda(t.steps, warm))
    g = torch.Generator().manual_seed(cfg.seed)
    metrics = CsvLog(out / "metrics.csv", ["step", "loss", "image_text", "image_action", "text_action", "t", "b"])

    policy = None
    if t.policy_parallel:
        pol_state = _policy_setup(cfg, frames, "policy_init", t.policy_lr, t.policy_warmup)
        policy, pnorm, popt, psched = pol_state
        pgen = torch.Generator().manual_seed(cfg.seed + 1)
        dsched = make_schedule(cfg.policy.K)
        pmetrics = CsvLog(out / "policy_metrics.csv", ["step", "loss"])

    t0 = time.time()
    enc_seconds = 0.0
    for step in range(t.steps):
        t_enc = time.time()
        idx = torch.randperm(len(frames), generator=g)[: t.batch_size].numpy()
        batch = encoder_batch(frames, cache, idx, cfg.encoder, anorm)
        X, Y, Z = enc.embed(batch)
        loss, parts = tri_modal_loss(X, Y, Z, enc.tempbias, t.sign, parts=True)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        enc_seconds += time.time() - t_enc
        tb = enc.tempbias if isinstance(enc.tempbias, TempBias) else enc.tempbias["image_text"]
        metrics.append(step, *(float(v.detach()) for v in (
            loss, parts["image_text"], parts["image_action"], parts["text_action"], tb.t, tb.b)))
        if policy is not None:
            pidx = torch.randperm(len(frames), generator=pgen)[: t.policy_batch].numpy()
            obs = policy_obs(frames, pidx, pnorm)
            a0 = torch.from_numpy(pnorm.norm_actions(frames.chunk(pidx, cfg.policy.chunk))).float()
            pmetrics.append(step, train_step(policy, popt, obs, a0, dsched, pgen, psched))
        if step % 100 == 0 or step == t.steps - 1:
            log(f"pretrain step {step} loss {float(loss.detach()):.4f} ({time.time() - t0:.0f}s)")

    save_checkpoint(dict(enc.named_parameters()), out / "encoders.ckpt")
    _write_meta(out / "encoders.json", cfg, action_norm=anorm.to_dict(), kind="encoders",
                encoder_seconds=enc_seconds, total_seconds=time.time() - t0)
    if policy is not None:
        save_policy(policy, out / "policy.ckpt", pnorm, cfg.hash(), "pretrain", {"model_hash": cfg.model_hash()})
    (out / "done").write_text("ok")
    return out


def _policy_setup(cfg: RunConfig, frames: Frames, stream: str, lr: float, warmup: int, norm: Normalizer | None = None):
    with seeded(cfg.seed, stream):
        policy = PolicyNet(cfg.policy)
    if norm is None:
        mean, std = rgb_stats(frames.rgb)
        norm = Normalizer.fit(frames.proprio, frames.actions, mean, std)
    opt = torch.optim.AdamW(policy.parameters(), lr=lr, weight_decay=cfg.train.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_lambda(warmup))
    return policy, norm, opt, sched


def pretrain_policy(cfg: RunConfig, log=print, force: bool = False) -> Path:
    """Policy pretraining alone (no contrastive tokens)."""
    out = run_dir(cfg, "pretrain_policy")
    if (out / "done").exists() and not force:
        return out
    out.mkdir(parents=True, exist_ok=True)
    (out / "policy_metrics.csv").unlink(missing_ok=True)
    ensure_split(cfg, "pretrain")
    frames, _ = load_frames(split_dir(cfg, "pretrain"), cfg.encoder.text_max_tokens)
    t = cfg.train
    policy, norm, opt, sched = _policy_setup(cfg, frames, "policy_init", t.policy_lr, t.policy_warmup)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    dsched = make_schedule(cfg.policy.K)
    metrics = CsvLog(out / "policy_metrics.csv", ["step", "loss"])
    for step in range(t.steps):
        idx = torch.randperm(len(frames), generator=gen)[: t.policy_batch].numpy()
        a0 = torch.from_numpy(norm.norm_actions(frames.chunk(idx, cfg.policy.chunk))).float()
        loss = train_step(policy, opt, policy_obs(frames, idx, norm), a0, dsched, gen, sched)
        metrics.append(step, loss)
        if step % 100 == 0:
            log(f"policy step {step} loss {loss:.4f}")
    save_policy(policy, out / "policy.ckpt", norm, cfg.hash(), "pretrain", {"model_hash": cfg.model_hash()})
    (out / "done").write_text("ok")
    return out


# ---------------------------------------------------------------- encoders at inference


def load_encoders(path, cfg: RunConfig | None = None):
    """``(encoders, action normalizer, meta)``; refuses a model-hash mismatch."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if cfg is not None and meta["model_hash"] != cfg.model_hash():
        raise CompatibilityError(f"{path}: encoder checkpoint built for a different model configuration")
    enc_cfg = config_from_dict(meta["config"]).encoder
    per_pair = meta["config"]["train"]["per_pair_tempbias"]
    enc = ClampEncoders(enc_cfg, per_pair)
    params, _ = load_checkpoint(path)
    load_into(enc, params)
    anorm = Normalizer.from_dict(meta["action_norm"])
    return enc, anorm, meta


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


@torch.no_grad()
def embed_frames(enc: ClampEncoders, frames: Frames, cache: ObservationCache, idx, anorm: Normalizer,
                 tokens: bool = False, chunk: int = 64):
    """Unit embeddings (image, text, action) for frames; with ``tokens`` the
    unpooled image and action tokens instead."""
    outs = []
    for s in range(0, len(idx), chunk):
        part = np.asarray(idx[s:s + chunk])
        b = encoder_batch(frames, cache, part, enc.cfg, anorm)
        if tokens:
            _, it = enc.image(b["image"], b["coords"], b["patch_valid"])
            _, at = enc.action(b["history"], b["history_mask"])
            outs.append((it.half(), at.half()))
        else:
            outs.append(enc.embed(b))
    if not outs:
        raise ValueError("no frames to embed")
    return tuple(torch.cat(o) for o in zip(*outs))


# ---------------------------------------------------------------- retrieval


@dataclass
class RetrievalReport:
    recall: dict  # "image->action" etc. -> {1: r, 5: r}
    n: int
    probabilities: dict = field(default_factory=dict)

    def min_recall(self, k: int = 5) -> float:
        return min(v[k] for v in self.recall.values())

    def to_dict(self) -> dict:
        return {"n": self.n, "recall": {d: {str(k): v for k, v in r.items()} for d, r in self.recall.items()}}


DIRECTIONS = (("image", "action"), ("image", "text"), ("action", "text"),
              ("action", "image"), ("text", "image"), ("text", "action"))


def recall_at_k(scores: torch.Tensor, k: int) -> float:
    """Fraction of rows whose diagonal entry ranks within the top ``k``.

    Ties are counted against the query: the rank is the number of other
    candidates scoring at least as high as the true match.
    """
    n = scores.shape[0]
    true = scores.diagonal()[:, None]
    others = (scores >= true).sum(1) - 1
    return float((others < k).double().mean()) if n else 0.0


def retrieval_report(emb: dict, tb, sign: str = "standard", ks=(1, 5)) -> RetrievalReport:
    """Recall@K for the six directions from unit embeddings keyed by modality."""
    n = len(emb["image"])
    if n == 0:
        raise ValueError("empty selection")
    recall, probs = {}, {}
    for q, c in DIRECTIONS:
        pair = "_".join(sorted((q, c), key=["image", "text", "action"].index))
        t = tb if isinstance(tb, TempBias) else tb[pair]
        # rank on logits: the sigmoid can merge distinct scores into float ties
        z = pairwise_logits(emb[q], emb[c], t, sign)
        probs[f"{q}->{c}"] = torch.sigmoid(z)
        recall[f"{q}->{c}"] = {k: recall_at_k(z, k) for k in ks}
    return RetrievalReport(recall, n, probs)


def eval_retrieval(encoder_ckpt, cfg: RunConfig, split: str = "pretrain_val", n: int | None = None,
                   selection: np.ndarray | None = None) -> RetrievalReport:
    enc, anorm, meta = load_encoders(encoder_ckpt, cfg)
    enc.eval()
    ensure_split(cfg, split)
    root = split_dir(cfg, split)
    frames, _ = load_frames(root, cfg.encoder.text_max_tokens, keep_rgb=False)
    if selection is None:
        selection = spread(select_validation(frames), n or cfg.train.retrieval_examples)
    if len(selection) == 0:
        raise ValueError("empty selection")
    cache = ObservationCache(root, cfg.render, log=lambda *_: None)
    X, Y, Z = embed_frames(enc, frames, cache, selection, anorm)
    with torch.no_grad():
        return retrieval_report({"image": X, "text": Y, "action": Z}, enc.tempbias, cfg.train.sign)


# ---------------------------------------------------------------- fine-tuning


def check_compatible(meta: dict, cfg: RunConfig, what: str) -> None:
    if meta.get("model_hash") != cfg.model_hash():
        raise CompatibilityError(f"{what}: checkpoint model hash does not match this configuration")


def validation_mse(policy: PolicyNet, norm: Normalizer, frames: Frames, idx, cfg: RunConfig,
                   clamp=(None, None), seed: int = 0) -> float:
    """Mean squared error (raw joint units) between sampled and demonstrated chunks."""
    policy.eval()
    obs = policy_obs(frames, idx, norm, *clamp)
    dsched = make_schedule(cfg.policy.K)
    pred = sample_actions(policy, obs, dsched, seed, cfg.train.sampler, cfg.train.clip_sample)
    policy.train()
    target = frames.chunk(idx, cfg.policy.chunk)
    return float(np.mean((norm.denorm_actions(pred.double().numpy()) - target) ** 2))


def finetune_policy(cfg: RunConfig, encoder_ckpt=None, policy_ckpt=None, scratch: bool = False,
                    log=print, force: bool = False) -> dict:
    """Fine-tune on the held-out task.

    With ``scratch`` the policy starts from random weights, fits its own
    normalization on the fine-tune split and sees no contrastive tokens.
    Otherwise it loads the pretrained policy bit-exactly and attaches frozen
    encoder tokens.  Returns ``{"dir", "curve": [(step, val_mse)], ...}``.
    """
    name = "scratch" if scratch else "finetune"
    out = run_dir(cfg, name)
    result_path = out / "result.json"
    if result_path.exists() and not force:
        return json.loads(result_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").unlink(missing_ok=True)
    t = cfg.train
    ensure_split(cfg, "finetune")
    ensure_split(cfg, "finetune_val")
    train_frames, _ = load_frames(split_dir(cfg, "finetune"), cfg.encoder.text_max_tokens)
    val_frames, _ = load_frames(split_dir(cfg, "finetune_val"), cfg.encoder.text_max_tokens)
    val_idx = spread(np.arange(len(val_frames)), t.val_frames)

    clamp_train = clamp_val = (None, None)
    if scratch:
        policy, norm, opt, sched = _policy_setup(cfg, train_frames, "scratch_init", t.finetune_lr, t.finetune_warmup)
    else:
        policy, norm, side = load_policy(policy_ckpt)
        check_compatible(side, cfg, str(policy_ckpt))
        enc, anorm, meta = load_encoders(encoder_ckpt, cfg)
        if t.freeze_encoders:
            freeze(enc)
        clamp_train = embed_frames(enc, train_frames, ObservationCache(split_dir(cfg, "finetune"), cfg.render, log),
                                   np.arange(len(train_frames)), anorm, tokens=True)
        clamp_val = embed_frames(enc, val_frames, ObservationCache(split_dir(cfg, "finetune_val"), cfg.render, log),
                                 val_idx, anorm, tokens=True)
        clamp_val = tuple(_scatter(v, val_idx, len(val_frames)) for v in clamp_val)
        opt = torch.optim.AdamW(policy.parameters(), lr=t.finetune_lr, weight_decay=t.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_lambda(t.finetune_warmup))
    save_policy(policy, out / "policy_000000.ckpt", norm, cfg.hash(), name, {"model_hash": cfg.model_hash(), "step": 0})
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    dsched = make_schedule(cfg.policy.K)
    metrics = CsvLog(out / "metrics.csv", ["step", "loss"])
    curve = []
    for step in range(1, t.finetune_steps + 1):
        idx = torch.randperm(len(train_frames), generator=gen)[: t.policy_batch].numpy()
        a0 = torch.from_numpy(norm.norm_actions(train_frames.chunk(idx, cfg.policy.chunk))).float()
        loss = train_step(policy, opt, policy_obs(train_frames, idx, norm, *clamp_train), a0, dsched, gen, sched)
        metrics.append(step, loss)
        if step % t.eval_every == 0 or step == t.finetune_steps:
            mse = validation_mse(policy, norm, val_frames, val_idx, cfg, clamp_val, seed=cfg.seed)
            curve.append((step, mse))
            save_policy(policy, out / f"policy_{step:06d}.ckpt", norm, cfg.hash(), name,
                        {"model_hash": cfg.model_hash(), "step": step})
            log(f"{name} step {step} loss {loss:.4f} val_mse {mse:.6f}")
    result = {"dir": str(out), "curve": curve, "mode": name}
    result_path.write_text(json.dumps(result, indent=1))
    return result


def _scatter(values: torch.Tensor, idx, n: int) -> torch.Tensor:
    full = torch.zeros((n,) + tuple(values.shape[1:]), dtype=values.dtype)
    full[torch.as_tensor(idx)] = values
    return full


# ---------------------------------------------------------------- policy rollouts


@dataclass
class PolicyEvalReport:
    task: str
    trials: int
    successes: list
    steps: list

    @property
    def success_rate(self) -> float:
        return sum(self.successes) / self.trials if self.trials else 0.0

    def to_dict(self) -> dict:
        return {"task": self.task, "trials": self.trials, "success_rate": self.success_rate,
                "successes": self.successes, "steps": self.steps}


def rollout(scene: world.Scene, controller, max_steps: int, cams) -> tuple[bool, int]:
    """Run ``controller(sim, history) -> (n, 14) actions`` until the step budget is spent."""
    sim = world.WorldSim(scene)
    executed = []
    while len(executed) < max_steps:
        actions = controller(sim, executed)
        if len(actions) == 0:
            break
        for a in actions[: max_steps - len(executed)]:
            sim.step(np.clip(a, np.tile(world.JOINT_LO, 2), np.tile(world.JOINT_HI, 2)))
            executed.append(np.asarray(a, dtype=np.float64))
    return sim.success(), len(executed)


def expert_controller(scene: world.Scene):
    actions, _, _ = world.scripted_expert(scene)

    def control(sim, executed):
        return actions[len(executed):]

    return control


def policy_controller(policy: PolicyNet, norm: Normalizer, cfg: RunConfig, cams, enc=None, anorm=None,
                      execute: int = 10, seed: int = 0):
    """Closed-loop controller: sample a chunk from the current sensors, execute its first actions."""
    dsched = make_schedule(cfg.policy.K)
    state = {"calls": 0, "start": None}

    def control(sim, executed):
        if state["start"] is None:
            state["start"] = sim.robot.joints.copy()
        sensed = world.render_sensors(sim.scene.objects, sim.robot.joints, cams)
        rgb = np.stack([c for c, _ in sensed])[None]
        obs = {"rgb": norm.norm_rgb(torch.from_numpy(rgb)),
               "proprio": torch.from_numpy(norm.norm_proprio(sim.robot.joints[None])).float()}
        if enc is not None:
            view = dxyz_observation([d for _, d in sensed], cams, sim.robot.joints, cfg.render,
                                    frame_seed(seed, len(executed)))
            H = cfg.encoder.action_history
            n = len(executed)
            zero = cfg.encoder.history_pad == "zero"
            hist = np.array([executed[s] if s >= 0 else 0 * state["start"] if zero else state["start"]
                             for s in range(n - H, n)])
            mask = torch.tensor([[s >= 0 or not zero for s in range(n - H, n)]])
            with torch.no_grad():
                _, it = enc.image(torch.from_numpy(view.image[None]).float(),
                                  torch.from_numpy(view.patch_coords[None]).float(),
                                  torch.from_numpy(view.patch_valid[None]))
                hist = np.where(mask[0, :, None].numpy(), anorm.norm_actions(hist), 0.0)
                _, at = enc.action(torch.from_numpy(hist[None]).float(), mask)
            obs["clamp_image"], obs["clamp_action"] = it, at
        chunk = sample_actions(policy, obs, dsched, seed * 100_003 + state["calls"], cfg.train.sampler,
                               cfg.train.clip_sample)
        state["calls"] += 1
        return norm.denorm_actions(chunk[0].double().numpy())[:execute]

    return control


def eval_policy(policy_ckpt, cfg: RunConfig, task: str, trials: int, encoder_ckpt=None, seed: int = 0,
                max_steps: int = 80, controller_factory=None) -> PolicyEvalReport:
    """Roll sampled chunks through the kinematic world on fresh scenes."""
    if trials < 0:
        raise ValueError("trials must be non-negative")
    cams = world.sensor_cameras(cfg.world.sensor_size, cfg.world.sensor_fov)
    if controller_factory is None:
        policy, norm, side = load_policy(policy_ckpt)
        policy.eval()
        enc = anorm = None
        if side["mode"] == "finetune":
            enc, anorm, _ = load_encoders(encoder_ckpt, cfg)
            freeze(enc)

        def controller_factory(scene, i):
            return policy_controller(policy, norm, cfg, cams, enc, anorm, seed=seed * 1000 + i)

    successes, steps = [], []
    for i in range(trials):
        scene = world.gen_scene(400_000 + seed * 1000 + i, task, cfg.world.n_objects)
        ok, n = rollout(scene, controller_factory(scene, i), max_steps, cams)
        successes.append(bool(ok))
        steps.append(n)
    return PolicyEvalReport(task, trials, successes, steps)
