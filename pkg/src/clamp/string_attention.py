"""Cayley-STRING relative positional encoding over 3D patch coordinates.

A query/key ``v`` attached to coordinate ``r`` is encoded as
``P @ rope(r) @ P.T @ v`` where ``P`` is the Cayley map of a learnable
skew-symmetric generator and ``rope(r)`` is block-diagonal with 2x2
rotations by the angles ``freq @ r``.  Because the angles are linear in
``r``, the encoded inner product depends on coordinates only through
``r_j - r_i``; :func:`score_lemma1` evaluates that closed form directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .diffcore import ShapeError, stream_rng


class StringParams(nn.Module):
    """Skew generator (strict upper triangle) and per-block 3D frequencies."""

    def __init__(self, d_qk: int, trainable_freq: bool = True, freq_scale: float = 2 * math.pi / 0.1):
        super().__init__()
        if d_qk % 2:
            raise ShapeError(f"StringParams: d_qk must be even, got {d_qk}")
        self.d_qk = d_qk
        n = d_qk * (d_qk - 1) // 2
        self.skew = nn.Parameter(torch.zeros(n))
        freq = default_frequencies(d_qk, freq_scale)
        self.freq = nn.Parameter(freq, requires_grad=trainable_freq)

    def skew_matrix(self) -> Tensor:
        return skew_from_vector(self.skew, self.d_qk)

    def orthogonal(self) -> Tensor:
        return cayley_orthogonal(self.skew_matrix())


def default_frequencies(d_qk: int, scale: float = 1.0) -> Tensor:
    """Log-spaced magnitudes ``scale * 10**(-4k/(d_qk/2))`` assigned round-robin to x, y, z.

    Units are radians per meter.  The default layer scale 2π/0.1 makes the
    fastest block turn once per 10 cm, the size of a tabletop object.
    """
    half = d_qk // 2
    freq = torch.zeros(half, 3)
    for k in range(half):
        freq[k, k % 3] = scale * 10.0 ** (-4.0 * k / half)
    return freq


def skew_from_vector(vec: Tensor, d: int) -> Tensor:
    """``S = U - U.T`` with ``U`` strictly upper-triangular, so ``S + S.T == 0`` exactly."""
    rows, cols = torch.triu_indices(d, d, offset=1)
    upper = torch.zeros(d, d, dtype=vec.dtype)
    upper = upper.index_put((rows, cols), vec)
    return upper - upper.T


class SingularGeneratorError(ValueError):
    pass


def cayley_orthogonal(skew: Tensor, max_cond: float = 1e12) -> Tensor:
    """``P = (I - S)(I + S)^-1``; orthogonal with det +1 for skew-symmetric ``S``."""
    d = skew.shape[-1]
    eye = torch.eye(d, dtype=skew.dtype)
    a = eye + skew
    cond = float(torch.linalg.cond(a.detach()))
    if not math.isfinite(cond) or cond > max_cond:
        raise SingularGeneratorError(f"cayley_orthogonal: I + S is singular (condition number {cond:.3g})")
    # (I - S) and (I + S)^-1 commute, so solving from the left is the same map
    return torch.linalg.solve(a, eye - skew)


def rope_rotate(v: Tensor, coords: Tensor, freq: Tensor) -> Tensor:
    """Rotate each 2-block ``k`` of ``v`` by angle ``freq[k] @ coords``.

    ``v`` is ``(..., d)`` and ``coords`` broadcasts against ``(..., 3)``.
    """
    d = v.shape[-1]
    if d % 2:
        raise ShapeError(f"rope_rotate: last dim must be even, got {d}")
    angles = coords @ freq.T  # (..., d/2)
    cos, sin = torch.cos(angles), torch.sin(angles)
    pairs = v.reshape(*v.shape[:-1], d // 2, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = torch.stack([cos * x0 - sin * x1, sin * x0 + cos * x1], dim=-1)
    return out.reshape(v.shape)


def apply_string(v: Tensor, coords: Tensor, P: Tensor, freq: Tensor) -> Tensor:
    """``P @ rope(coords) @ P.T @ v`` for row vectors ``v`` of shape ``(..., d)``.

    Evaluated as ``v + P (rope - I) P.T v`` so zero angles return ``v`` bit-exactly.
    """
    local = v @ P
    return v + (rope_rotate(local, coords, freq) - local) @ P.T


def attention_scores(Q: Tensor, K: Tensor, coords: Tensor, P: Tensor, freq: Tensor,
                     valid: Tensor | None = None) -> Tensor:
    """Unnormalized STRING logits ``s_ij = <apply_string(Q_i, r_i), apply_string(K_j, r_j)>``.

    Coordinates of invalid patches are replaced by the origin.
    """
    if Q.shape != K.shape:
        raise ShapeError(f"attention_scores: Q {tuple(Q.shape)} vs K {tuple(K.shape)}")
    if coords.shape[:-1] != Q.shape[:-1] or coords.shape[-1] != 3:
        raise ShapeError(f"attention_scores: coords {tuple(coords.shape)} vs Q {tuple(Q.shape)}")
    if valid is not None:
        coords = coords * valid[..., None].to(coords.dtype)
    q = apply_string(Q, coords, P, freq)
    k = apply_string(K, coords, P, freq)
    return q @ k.transpose(-1, -2)


def score_lemma1(q: Tensor, k: Tensor, r_ij: Tensor, P: Tensor, freq: Tensor) -> Tensor:
    """Closed-form logit from per-block norms and angles in the ``P.T`` frame.

    ``sum_k |v_k| |w_k| cos(alpha_k + freq[k] @ r_ij)`` with ``v = P.T q``,
    ``w = P.T k`` and ``alpha_k`` the oriented angle from ``v_k`` to ``w_k``
    (its magnitude is the unsigned angle between the blocks).
    """
    d = q.shape[-1]
    if d % 2:
        raise ShapeError(f"score_lemma1: dim must be even, got {d}")
    v = (q @ P).reshape(*q.shape[:-1], d // 2, 2)
    w = (k @ P).reshape(*k.shape[:-1], d // 2, 2)
    nv = torch.linalg.vector_norm(v, dim=-1)
    nw = torch.linalg.vector_norm(w, dim=-1)
    dot = (v * w).sum(-1)
    cross = v[..., 0] * w[..., 1] - v[..., 1] * w[..., 0]
    alpha = torch.atan2(cross, dot)
    delta = r_ij @ freq.T
    return (nv * nw * torch.cos(alpha + delta)).sum(-1)


def block_angle_max(x: Tensor, y: Tensor) -> Tensor:
    """Largest unsigned angle between matching 2-blocks of ``x`` and ``y``."""
    d = x.shape[-1]
    if d % 2 or y.shape[-1] != d:
        raise ShapeError(f"block_angle_max: dims {d} and {y.shape[-1]} must match and be even")
    xb = x.reshape(*x.shape[:-1], d // 2, 2)
    yb = y.reshape(*y.shape[:-1], d // 2, 2)
    nx = torch.linalg.vector_norm(xb, dim=-1)
    ny = torch.linalg.vector_norm(yb, dim=-1)
    if bool((nx == 0).any()) or bool((ny == 0).any()):
        raise ValueError("block_angle_max: zero-norm block")
    cos = ((xb * yb).sum(-1) / (nx * ny)).clamp(-1.0, 1.0)
    return torch.arccos(cos).max(dim=-1).values


# ---------------------------------------------------------------- monotonicity probe


@dataclass
class Lemma2ProbeConfig:
    T: float = 1.0
    phi: float = math.pi / 8
    R: float = 4.0
    r_lb: float = 0.2
    d_qk: int = 8
    n_eta: int = 64
    eta_grid: tuple | None = None
    key_mode: str = "near"  # "near": cosine ≥ 1 - eps; "equal": k = q

    def interval(self) -> tuple[float, float]:
        return 2 * self.T * self.phi, self.T * (math.pi - self.phi)

    def grid(self) -> np.ndarray:
        lo, hi = self.interval()
        if self.eta_grid is not None:
            return np.asarray(self.eta_grid, dtype=np.float64)
        return np.linspace(lo, hi, self.n_eta)

    def validate(self) -> None:
        if self.T <= 0:
            raise ValueError("probe: T must be positive")
        if not 0 <= self.phi <= math.pi / 3:
            raise ValueError(f"probe: phi={self.phi} outside [0, pi/3]")
        lo, hi = self.interval()
        if lo > hi:
            raise ValueError("probe: empty eta interval")
        grid = self.grid()
        if grid.size == 0 or grid.min() < lo - 1e-12 or grid.max() > hi + 1e-12:
            raise ValueError("probe: eta grid leaves the admissible interval")
        if self.d_qk % 2:
            raise ValueError("probe: d_qk must be even")
        if not 0 < self.r_lb * math.sqrt(self.d_qk) < self.R:
            raise ValueError("probe: no vector meets both the ball and the lower bound")


@dataclass
class ProbeReport:
    eta: np.ndarray
    scores: np.ndarray
    strictly_decreasing: bool
    epsilon: float
    lipschitz: float
    cosine: float
    max_block_angle: float


def block_angle_lipschitz(d: int, R: float, r_lb: float, rng: np.random.Generator,
                          samples: int = 256, h: float = 1e-6) -> float:
    """Numerical Lipschitz estimate of :func:`block_angle_max` on the probe region.

    Takes the largest central-difference gradient norm over random points of
    the region plus its extreme points, where every coordinate sits at ``±r_lb``.
    """
    def f(z):
        return float(block_angle_max(torch.from_numpy(z[:d]), torch.from_numpy(z[d:])))

    def sample():
        mags = rng.uniform(r_lb, R / math.sqrt(2 * d), size=2 * d)
        return mags * rng.choice([-1.0, 1.0], size=2 * d)

    points = [sample() for _ in range(samples)]
    for _ in range(8):
        z = r_lb * rng.choice([-1.0, 1.0], size=2 * d)
        # separate x and y blocks so the active angle is differentiable
        z[d:] *= 1.0 + 0.1 * rng.uniform(size=d)
        points.append(z)
    best = 0.0
    for z in points:
        grad = np.empty(2 * d)
        for i in range(2 * d):
            e = np.zeros(2 * d)
            e[i] = h
            grad[i] = (f(z + e) - f(z - e)) / (2 * h)
        best = max(best, float(np.linalg.norm(grad)))
    return best


def lemma2_probe(cfg: Lemma2ProbeConfig, seed: int) -> ProbeReport:
    """Sweep a translated key away from a query and record the STRING logits.

    Follows the construction of the decreasing-score argument: a common
    linear angle ``delta(r) = (r . r_ij) / (T |r_ij|^2)`` for all blocks, so
    translating by ``r = eta * r_ij`` rotates every block by ``eta / T``.
    Queries and keys live in the canonical frame (``P = I``).
    """
    cfg.validate()
    rng = stream_rng(seed, "lemma2")
    d = cfg.d_qk
    lipschitz = block_angle_lipschitz(d, cfg.R, cfg.r_lb, stream_rng(seed, "lemma2/lipschitz"))
    ratio = min(1.0, cfg.phi / (2 * cfg.R * lipschitz))
    # largest eps with L * 2R * sin(arccos(1 - eps) / 2) <= phi
    epsilon = 1.0 - math.cos(2.0 * math.asin(ratio))

    for _ in range(1000):
        mags = rng.uniform(1.5 * cfg.r_lb, cfg.R / math.sqrt(d), size=d)
        q = mags * rng.choice([-1.0, 1.0], size=d)
        if cfg.key_mode == "equal" or epsilon == 0.0:
            k = q.copy()
        else:
            u = rng.normal(size=d)
            u -= (u @ q) / (q @ q) * q
            u /= np.linalg.norm(u)
            beta = math.acos(1.0 - epsilon)
            k = np.linalg.norm(q) * (math.cos(beta) * q / np.linalg.norm(q) + math.sin(beta) * u)
        if np.all(np.abs(k) >= cfg.r_lb) and np.linalg.norm(k) <= cfg.R:
            break
    else:
        raise ValueError("probe: could not draw a key inside the region")

    r_dir = rng.normal(size=3)
    r_ij = r_dir / np.linalg.norm(r_dir) * rng.uniform(0.05, 0.5)
    row = r_ij / (cfg.T * (r_ij @ r_ij))
    freq = torch.from_numpy(np.tile(row, (d // 2, 1)))
    P = torch.eye(d, dtype=torch.float64)
    qt = torch.from_numpy(q)
    kt = torch.from_numpy(k)
    eta = cfg.grid()
    origin = torch.zeros(3, dtype=torch.float64)
    q_enc = apply_string(qt, origin, P, freq)
    scores = np.array([
        float(q_enc @ apply_string(kt, torch.from_numpy(e * r_ij), P, freq)) for e in eta
    ])
    cosine = float(q @ k / (np.linalg.norm(q) * np.linalg.norm(k)))
    return ProbeReport(
        eta=eta,
        scores=scores,
        strictly_decreasing=bool(np.all(np.diff(scores) < 0)),
        epsilon=epsilon,
        lipschitz=lipschitz,
        cosine=cosine,
        max_block_angle=float(block_angle_max(qt, kt)),
    )
