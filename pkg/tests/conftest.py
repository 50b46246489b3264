import pytest

from clamp import harness as H


def tiny_config(root, out, seed=0) -> H.RunConfig:
    return H.config_from_dict({
        "seed": seed,
        "out": str(out),
        "data": {"root": str(root), "pretrain_episodes_per_task": 2, "val_episodes_per_task": 2,
                 "finetune_episodes": 2, "finetune_val_episodes": 1},
        "world": {"sensor_size": 16},
        "render": {"view_size": 16, "patch": 8, "point_cap": 2000, "voxel": 0.01},
        "encoder": {"embed_dim": 16, "heads": 2, "layers": 1, "mlp_dim": 32, "patch": 8, "view_size": 16,
                    "action_history": 4},
        "policy": {"chunk": 8, "image_size": 16, "stem_channels": [8, 16], "width": 16, "heads": 2,
                   "enc_layers": 1, "dec_layers": 1, "mlp_dim": 32, "K": 5, "clamp_dim": 16,
                   "clamp_image_tokens": 20, "clamp_action_tokens": 4},
        "train": {"batch_size": 4, "steps": 3, "policy_batch": 4, "finetune_steps": 4, "eval_every": 2,
                  "val_frames": 4, "retrieval_examples": 8, "policy_warmup": 2, "finetune_warmup": 2},
    })


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = tiny_config(root, tmp_path_factory.mktemp("runs"))
    H.gen_data(cfg, log=lambda *_: None)
    return root


@pytest.fixture
def tiny_cfg(tiny_data, tmp_path):
    return tiny_config(tiny_data, tmp_path / "runs")


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


class _Criterion:
    def __init__(self, number, name):
        self.number, self.name = number, name
        self.passed, self.detail = False, ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and self.number not in ACCEPTANCE_LINES:
            record_criterion(self.number, self.name, False, f"{kind.__name__}: {exc}")
        return False

    def check(self, passed: bool, detail: str) -> None:
        record_criterion(self.number, self.name, bool(passed), detail)
        assert passed, detail


def criterion(number: int, name: str) -> _Criterion:
    return _Criterion(number, name)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
