"""Differentiable-computation substrate shared by every learnable module.

Tensors are ``torch.Tensor`` and reverse mode is torch's eager tape.  This
module fixes the conventions the rest of the package relies on:

* two precision modes, ``"verify"`` (float64) and ``"train"`` (float32);
* a counter-based RNG keyed by ``(seed, stream, index)``;
* :class:`ParamStore`, a named parameter map whose initialization is a pure
  function of its seed;
* ``forward`` / ``gradient`` / ``grad_check`` over a *graph*, which is any
  callable ``graph(inputs, params) -> Tensor``;
* the binary checkpoint format.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np
import torch
from torch import Tensor, nn

PRECISIONS = {"verify": torch.float64, "train": torch.float32}

Graph = Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Tensor]


class ShapeError(ValueError):
    """Raised when operands disagree in shape; the message names the op and dims."""


def check_shape(op: str, name: str, actual, expected) -> None:
    actual = tuple(actual)
    expected = tuple(expected)
    if len(actual) != len(expected) or any(
        e is not None and a != e for a, e in zip(actual, expected)
    ):
        raise ShapeError(f"{op}: {name} has shape {actual}, expected {expected}")


@contextlib.contextmanager
def precision(mode: str) -> Iterator[torch.dtype]:
    """Temporarily switch torch's default dtype to the given precision mode."""
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(PRECISIONS)}")
    dtype = PRECISIONS[mode]
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(old)


# ---------------------------------------------------------------- RNG


def _stream_key(seed: int, stream: str, index: int) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{stream}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Counter-based numpy generator for one ``(seed, stream, index)`` key.

    Different keys give statistically independent streams, so work split by
    index (episodes, batches, trials) replays identically in any order.
    """
    return np.random.Generator(np.random.Philox(key=_stream_key(seed, stream, index)))


def torch_rng(seed: int, stream: str, index: int = 0) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(_stream_key(seed, stream, index) & ((1 << 63) - 1))
    return gen


@contextlib.contextmanager
def seeded(seed: int, stream: str = "init") -> Iterator[None]:
    """Fork torch's global RNG and seed it from the counter-based key."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_stream_key(seed, stream, 0) & ((1 << 63) - 1))
        yield


# ---------------------------------------------------------------- parameters


class ParamStore(Mapping[str, Tensor]):
    """Named parameters plus the seed that produced them.

    The store holds live references: for a store built with
    :meth:`from_module`, updating a tensor in place updates the module.
    Names listed in ``frozen`` never receive gradients from :func:`gradient`.
    """

    def __init__(self, params: Mapping[str, Tensor], rng_seed: int = 0, frozen=()):
        self._params = dict(params)
        self.rng_seed = int(rng_seed)
        self.frozen = set(frozen)
        unknown = self.frozen - set(self._params)
        if unknown:
            raise KeyError(f"frozen names not in store: {sorted(unknown)}")

    @classmethod
    def from_module(cls, module: nn.Module, rng_seed: int = 0, frozen=()) -> "ParamStore":
        return cls(dict(module.named_parameters()), rng_seed, frozen)

    @classmethod
    def init(cls, factory: Callable[[], nn.Module], seed: int):
        """Build ``factory()`` under a seeded RNG; returns ``(module, store)``."""
        with seeded(seed):
            module = factory()
        return module, cls.from_module(module, seed)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def detached(self) -> dict[str, Tensor]:
        return {k: v.detach().clone() for k, v in self._params.items()}


def _as_store(params) -> ParamStore:
    return params if isinstance(params, ParamStore) else ParamStore(params)


# ---------------------------------------------------------------- evaluation


def forward(graph: Graph, inputs: Mapping[str, Tensor], params) -> Tensor:
    """Evaluate ``graph`` without recording a tape."""
    store = _as_store(params)
    with torch.no_grad():
        return graph(inputs, {k: v.detach() for k, v in store.items()})


def gradient(graph: Graph, inputs: Mapping[str, Tensor], params) -> dict[str, Tensor]:
    """Reverse-mode gradient of a scalar graph w.r.t. every parameter.

    Frozen parameters and parameters the graph does not touch get exact zeros.
    """
    store = _as_store(params)
    leaves = {}
    for name, value in store.items():
        leaf = value.detach().clone()
        leaf.requires_grad_(name not in store.frozen)
        leaves[name] = leaf
    out = graph(inputs, leaves)
    if out.numel() != 1:
        raise ShapeError(f"gradient: graph output has shape {tuple(out.shape)}, expected a scalar")
    live = [n for n, v in leaves.items() if v.requires_grad]
    grads = []
    if live and out.requires_grad:
        grads = torch.autograd.grad(out.reshape(()), [leaves[n] for n in live], allow_unused=True)
    result = {n: torch.zeros_like(v) for n, v in leaves.items()}
    for name, g in zip(live, grads):
        if g is not None:
            result[name] = g.detach()
    return result


@dataclass
class GradReport:
    max_abs_err: float
    max_rel_err: float
    per_param: dict[str, tuple[float, float]] = field(default_factory=dict)
    checked: int = 0

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_err < rel_tol


def grad_check(
    graph: Graph,
    inputs: Mapping[str, Tensor],
    params,
    step: float = 1e-5,
    max_entries_per_param: int = 64,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradReport:
    """Compare :func:`gradient` against central differences.

    Parameters with more than ``max_entries_per_param`` entries are checked
    on a seeded subsample.  The relative error of one entry is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, abs_floor)``; the floor keeps
    entries whose true gradient is ~0 from dividing finite-difference noise by
    nothing.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    store = _as_store(params)
    analytic = gradient(graph, inputs, store)
    base = {k: v.detach().clone() for k, v in store.items()}

    def value(p):
        with torch.no_grad():
            return float(graph(inputs, p).reshape(()))

    report = GradReport(0.0, 0.0)
    for name, tensor in base.items():
        n = tensor.numel()
        if n == 0:
            continue
        if n > max_entries_per_param:
            idx = stream_rng(seed, f"gradcheck/{name}").choice(n, max_entries_per_param, replace=False)
            idx = np.sort(idx)
        else:
            idx = np.arange(n)
        flat_grad = analytic[name].reshape(-1)
        worst_abs = worst_rel = 0.0
        for i in idx:
            i = int(i)
            if name in store.frozen:
                fd = 0.0
            else:
                plus = tensor.clone().reshape(-1)
                minus = tensor.clone().reshape(-1)
                plus[i] += step
                minus[i] -= step
                fd = (value({**base, name: plus.reshape(tensor.shape)})
                      - value({**base, name: minus.reshape(tensor.shape)})) / (2 * step)
            a = float(flat_grad[i])
            err = abs(a - fd)
            rel = err / max(abs(a), abs(fd), abs_floor)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, rel)
        report.per_param[name] = (worst_abs, worst_rel)
        report.max_abs_err = max(report.max_abs_err, worst_abs)
        report.max_rel_err = max(report.max_rel_err, worst_rel)
        report.checked += len(idx)
    return report


def module_graph(module: nn.Module, fn: Callable[[nn.Module, Mapping[str, Tensor]], Tensor]) -> Graph:
    """Wrap ``fn(module, inputs)`` as a graph over the module's parameters."""

    wrapper = _Bound(module, fn)

    def graph(inputs, params):
        swapped = {f"module.{k}": v for k, v in params.items()}
        return torch.func.functional_call(wrapper, swapped, (inputs,), strict=False)

    return graph


class _Bound(nn.Module):
    def __init__(self, module: nn.Module, fn):
        super().__init__()
        self.module = module
        self._fn = fn

    def forward(self, inputs):
        return self._fn(self.module, inputs)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CLAMPCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Mapping[str, Tensor], path, precision_mode: str = "train") -> None:
    """Write name-sorted parameters in the little-endian checkpoint format.

    Layout: magic (8 bytes), version (u32), scalar width in bytes (u32), then
    per parameter: name length (u32), utf-8 name, rank (u32), dims (u32 each),
    raw scalars.
    """
    dtype = PRECISIONS[precision_mode]
    width = 8 if dtype == torch.float64 else 4
    np_dtype = "<f8" if width == 8 else "<f4"
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, width))
    for name in sorted(params):
        arr = params[name].detach().cpu().numpy().astype(np_dtype, copy=False)
        encoded = name.encode()
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Tensor], str]:
    """Read a checkpoint; returns ``(params, precision_mode)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, width = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if width not in (4, 8):
        raise CheckpointError(f"{path}: bad scalar width {width}")
    np_dtype = "<f8" if width == 8 else "<f4"
    off = 16
    params: dict[str, Tensor] = {}
    try:
        while off < len(data):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = off + count * width
            if end > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(data[off:end], dtype=np_dtype).reshape(dims)
            params[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
            off = end
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    return params, ("verify" if width == 8 else "train")


def load_into(module: nn.Module, params: Mapping[str, Tensor], strict: bool = True) -> None:
    """Copy checkpoint tensors into a module's parameters bit-exactly."""
    own = dict(module.named_parameters())
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if strict and (missing or extra):
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    with torch.no_grad():
        for name, p in own.items():
            if name in params:
                src = params[name]
                if tuple(src.shape) != tuple(p.shape):
                    raise ShapeError(f"load_into: {name} has shape {tuple(src.shape)}, expected {tuple(p.shape)}")
                p.copy_(src.to(p.dtype))
