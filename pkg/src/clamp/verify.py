"""Numerical checks of the STRING attention identities, shared by the CLI and tests."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import string_attention as sa
from .diffcore import stream_rng

F64 = torch.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _draw(d: int, rng: np.random.Generator):
    skew = sa.skew_from_vector(torch.from_numpy(rng.normal(size=d * (d - 1) // 2)), d)
    P = sa.cayley_orthogonal(skew)
    freq = torch.from_numpy(rng.normal(size=(d // 2, 3)) * 3.0)
    q, k = torch.from_numpy(rng.normal(size=d)), torch.from_numpy(rng.normal(size=d))
    ri, rj = torch.from_numpy(rng.normal(size=3)), torch.from_numpy(rng.normal(size=3))
    return P, freq, q, k, ri, rj


def lemma1(draws: int = 1000, dims=(4, 8, 64), seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Closed form against the rotated-vector path; error relative to ``max(1, |s|)``."""
    t0 = time.time()
    rng = stream_rng(seed, "verify/lemma1")
    worst = 0.0
    for n in range(draws):
        P, freq, q, k, ri, rj = _draw(dims[n % len(dims)], rng)
        direct = float(sa.apply_string(q, ri, P, freq) @ sa.apply_string(k, rj, P, freq))
        closed = float(sa.score_lemma1(q, k, rj - ri, P, freq))
        worst = max(worst, abs(direct - closed) / max(1.0, abs(direct)))
    return CheckResult("lemma1", worst < tol, f"{draws} draws, max scaled error {worst:.3e}", time.time() - t0)


def zero_displacement(draws: int = 1000, dims=(4, 8, 64), seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """With ``r_i = r_j`` both routes reduce to ``q . k``."""
    t0 = time.time()
    rng = stream_rng(seed, "verify/zero")
    worst = 0.0
    for n in range(draws):
        P, freq, q, k, ri, _ = _draw(dims[n % len(dims)], rng)
        plain = float(q @ k)
        closed = float(sa.score_lemma1(q, k, torch.zeros(3, dtype=F64), P, freq))
        direct = float(sa.apply_string(q, ri, P, freq) @ sa.apply_string(k, ri, P, freq))
        worst = max(worst, abs(closed - plain), abs(direct - plain))
    return CheckResult("zero_displacement", worst < tol, f"{draws} draws, max error {worst:.3e}", time.time() - t0)


def probe_configs(n: int = 50, seed: int = 0) -> list:
    rng = stream_rng(seed, "verify/lemma2/configs")
    out = []
    for _ in range(n):
        out.append(sa.Lemma2ProbeConfig(
            T=float(rng.uniform(0.5, 2.0)),
            phi=float(rng.uniform(math.pi / 24, math.pi / 6)),
            R=float(rng.uniform(3.0, 6.0)),
            d_qk=int(rng.choice([4, 8])),
        ))
    return out


def lemma2(n: int = 50, seed: int = 0) -> CheckResult:
    """Strictly decreasing scores along the probe sweep for every configuration."""
    t0 = time.time()
    reports = [sa.lemma2_probe(cfg, seed + i) for i, cfg in enumerate(probe_configs(n, seed))]
    ok = sum(r.strictly_decreasing for r in reports)
    return CheckResult("lemma2", ok == n, f"{ok}/{n} probe runs strictly decreasing", time.time() - t0)


def orthogonality(n: int = 100, dims=(4, 8, 16, 64), seed: int = 0, tol: float = 1e-9) -> CheckResult:
    t0 = time.time()
    rng = stream_rng(seed, "verify/cayley")
    worst = 0.0
    for i in range(n):
        d = dims[i % len(dims)]
        P = sa.cayley_orthogonal(sa.skew_from_vector(torch.from_numpy(rng.normal(size=d * (d - 1) // 2)), d))
        worst = max(worst, float((P.T @ P - torch.eye(d, dtype=F64)).abs().max()))
    return CheckResult("orthogonality", worst < tol, f"{n} generators, max |P^T P - I| {worst:.3e}", time.time() - t0)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [lemma1(seed=seed), zero_displacement(seed=seed), lemma2(seed=seed), orthogonality(seed=seed)]
