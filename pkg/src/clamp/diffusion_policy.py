"""DDPM action-chunk policy conditioned on camera features, proprioception and
(optionally) frozen contrastive-encoder tokens."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffcore import check_shape, load_checkpoint, load_into, save_checkpoint


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``i = k - 1`` for diffusion step ``k`` in ``1..K``.

    ``alpha``/``gamma``/``sigma`` are the sampler coefficients
    ``1/sqrt(1-beta)``, ``beta/sqrt(1-alpha_bar)`` and the posterior std.
    """

    K: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray


def make_schedule(K: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp; the endpoints are given for 1000 steps and rescaled by 1000/K."""
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    scale = 1000.0 / K
    lo, hi = min(beta_start * scale, 0.999), min(beta_end * scale, 0.999)
    beta = np.linspace(lo, hi, K) if K > 1 else np.array([lo])
    alpha_bar = np.cumprod(1.0 - beta)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    return NoiseSchedule(int(K), beta, alpha_bar, 1.0 / np.sqrt(1.0 - beta),
                         beta / np.sqrt(1.0 - alpha_bar), sigma)


def _coef(values: np.ndarray, idx, like: Tensor) -> Tensor:
    c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[idx]
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))


def add_noise(a0: Tensor, k, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """``sqrt(alpha_bar[k]) a0 + sqrt(1 - alpha_bar[k]) eps`` with ``k`` in ``[0, K)``.

    ``k`` is an int or a per-example integer tensor over the leading axis.
    """
    kt = torch.as_tensor(k)
    if torch.any(kt < 0) or torch.any(kt >= sched.K):
        raise ValueError(f"noise level index must be in [0, {sched.K})")
    if kt.dim() == 0:
        ab = float(sched.alpha_bar[int(kt)])
        return ab ** 0.5 * a0 + (1.0 - ab) ** 0.5 * eps
    ab = _coef(sched.alpha_bar, kt, a0)
    return ab.sqrt() * a0 + (1.0 - ab).sqrt() * eps


def clip_noise_estimate(a_k: Tensor, eps: Tensor, i: int, sched: NoiseSchedule, bound: float = 1.0) -> Tensor:
    """Noise estimate consistent with the implied clean chunk clipped to ``[-bound, bound]``."""
    ab = float(sched.alpha_bar[i])
    x0 = ((a_k - (1.0 - ab) ** 0.5 * eps) / ab ** 0.5).clamp(-bound, bound)
    return (a_k - ab ** 0.5 * x0) / (1.0 - ab) ** 0.5


def denoise_step(predict, a_k: Tensor, k: int, sched: NoiseSchedule, noise: Tensor | None = None,
                 mode: str = "literal", clip: float | None = None) -> Tensor:
    """One reverse step from ``a_k`` (step ``k`` in ``1..K``) to ``a_{k-1}``.

    ``predict(a, i)`` returns the noise estimate at level index ``i = k - 1``.
    ``literal``: ``alpha * (a - gamma * eps + sigma * z)``;
    ``textbook``: ``alpha * (a - gamma * eps) + sigma * z``.
    With ``clip`` set, the estimate is first replaced by ``clip_noise_estimate``;
    the chain multiplies errors in the estimate by up to ``1/sqrt(alpha_bar_K)``.
    """
    if not 1 <= k <= sched.K:
        raise ValueError(f"k must be in [1, {sched.K}], got {k}")
    i = k - 1
    alpha, gamma, sigma = float(sched.alpha[i]), float(sched.gamma[i]), float(sched.sigma[i])
    eps = predict(a_k, i)
    if clip is not None:
        eps = clip_noise_estimate(a_k, eps, i, sched, clip)
    z = torch.zeros_like(a_k) if noise is None else noise
    if mode == "literal":
        return alpha * (a_k - gamma * eps + sigma * z)
    if mode == "textbook":
        return alpha * (a_k - gamma * eps) + sigma * z
    raise ValueError(f"unknown sampler mode {mode!r}")


def sample_chunk(predict, shape, sched: NoiseSchedule, seed: int = 0, mode: str = "literal",
                 dtype=torch.float32, clip: float | None = None) -> Tensor:
    """Start from a unit Gaussian and apply ``denoise_step`` for ``k = K..1``."""
    gen = torch.Generator().manual_seed(int(seed))
    a = torch.randn(shape, generator=gen, dtype=dtype)
    for k in range(sched.K, 0, -1):
        z = torch.randn(shape, generator=gen, dtype=dtype)
        a = denoise_step(predict, a, k, sched, z, mode, clip)
    return a


# ---------------------------------------------------------------- normalization


@dataclass
class Normalizer:
    """Proprio/RGB standardization and action min-max scaling to ``[-1, 1]``."""

    proprio_mean: np.ndarray
    proprio_std: np.ndarray
    rgb_mean: np.ndarray  # per channel, in [0, 1] units
    rgb_std: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray

    @classmethod
    def fit(cls, proprio: np.ndarray, actions: np.ndarray, rgb_mean, rgb_std) -> "Normalizer":
        return cls(proprio.mean(0), proprio.std(0), np.asarray(rgb_mean, float), np.asarray(rgb_std, float),
                   actions.min(0), actions.max(0))

    def _range(self) -> np.ndarray:
        r = self.action_max - self.action_min
        return np.where(r > 1e-8, r, 1.0)

    def norm_actions(self, a):
        lo, r = self._cast(self.action_min, a), self._cast(self._range(), a)
        return (a - lo) / r * 2.0 - 1.0

    def denorm_actions(self, a):
        lo, r = self._cast(self.action_min, a), self._cast(self._range(), a)
        return (a + 1.0) / 2.0 * r + lo

    def norm_proprio(self, p):
        std = np.where(self.proprio_std > 1e-8, self.proprio_std, 1.0)
        return (p - self._cast(self.proprio_mean, p)) / self._cast(std, p)

    def norm_rgb(self, rgb_uint8: Tensor) -> Tensor:
        """``(..., H, W, 3)`` uint8 to channel-first standardized floats."""
        x = rgb_uint8.float() / 255.0
        x = (x - torch.as_tensor(self.rgb_mean, dtype=x.dtype)) / torch.as_tensor(
            np.maximum(self.rgb_std, 1e-6), dtype=x.dtype)
        return x.movedim(-1, -3)

    @staticmethod
    def _cast(v, like):
        if isinstance(like, Tensor):
            return torch.as_tensor(v, dtype=like.dtype)
        return v

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


# ---------------------------------------------------------------- network


@dataclass(frozen=True)
class PolicyConfig:
    chunk: int = 50
    action_dim: int = 14
    proprio_dim: int = 14
    n_cams: int = 2
    image_size: int = 64
    stem_channels: tuple = (16, 32, 64, 128)
    width: int = 128
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 3
    mlp_dim: int = 256
    K: int = 50
    clamp_dim: int = 64
    clamp_image_tokens: int = 320
    clamp_action_tokens: int = 16
    dropout: float = 0.0

    @property
    def stem_tokens(self) -> int:
        return (self.image_size // 2 ** len(self.stem_channels)) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def conv_stem(channels) -> nn.Sequential:
    layers, prev = [], 3
    for c in channels:
        layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.GroupNorm(min(8, c), c), nn.ReLU()]
        prev = c
    return nn.Sequential(*layers)


class PolicyNet(nn.Module):
    """Noise predictor: transformer encoder over observation tokens, decoder over the noised chunk."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.stems = nn.ModuleList(conv_stem(cfg.stem_channels) for _ in range(cfg.n_cams))
        self.stem_proj = nn.Linear(cfg.stem_channels[-1], w)
        self.cam_pos = nn.Parameter(torch.randn(cfg.n_cams * cfg.stem_tokens, w) * 0.02)
        self.proprio_proj = nn.Linear(cfg.proprio_dim, w)
        self.proprio_pos = nn.Parameter(torch.randn(1, w) * 0.02)
        self.clamp_image_proj = nn.Linear(cfg.clamp_dim, w)
        self.clamp_image_pos = nn.Parameter(torch.randn(cfg.clamp_image_tokens, w) * 0.02)
        self.clamp_action_proj = nn.Linear(cfg.clamp_dim, w)
        self.clamp_action_pos = nn.Parameter(torch.randn(cfg.clamp_action_tokens, w) * 0.02)
        enc = nn.TransformerEncoderLayer(w, cfg.heads, cfg.mlp_dim, cfg.dropout, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc, cfg.enc_layers, enable_nested_tensor=False)
        dec = nn.TransformerDecoderLayer(w, cfg.heads, cfg.mlp_dim, cfg.dropout, batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec, cfg.dec_layers)
        self.action_in = nn.Linear(cfg.action_dim, w)
        self.chunk_pos = nn.Parameter(torch.randn(cfg.chunk, w) * 0.02)
        self.step_embed = nn.Linear(cfg.K, w)  # applied to a one-hot of the noise level
        self.norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, cfg.action_dim)

    def observation_tokens(self, obs: dict) -> Tensor:
        """``obs``: rgb (B, n_cams, 3, H, W), proprio (B, P), optional clamp_image / clamp_action."""
        cfg = self.cfg
        rgb = obs["rgb"]
        B = rgb.shape[0]
        check_shape("predict_noise", "rgb", tuple(rgb.shape), (None, cfg.n_cams, 3, cfg.image_size, cfg.image_size))
        check_shape("predict_noise", "proprio", tuple(obs["proprio"].shape), (B, cfg.proprio_dim))
        feats = [self.stems[c](rgb[:, c]).flatten(2).transpose(1, 2) for c in range(cfg.n_cams)]
        tokens = [self.stem_proj(torch.cat(feats, 1)) + self.cam_pos,
                  self.proprio_proj(obs["proprio"])[:, None] + self.proprio_pos]
        if obs.get("clamp_image") is not None:
            ci = obs["clamp_image"]
            check_shape("predict_noise", "clamp_image", tuple(ci.shape), (B, cfg.clamp_image_tokens, cfg.clamp_dim))
            tokens.append(self.clamp_image_proj(ci) + self.clamp_image_pos)
        if obs.get("clamp_action") is not None:
            ca = obs["clamp_action"]
            check_shape("predict_noise", "clamp_action", tuple(ca.shape), (B, cfg.clamp_action_tokens, cfg.clamp_dim))
            tokens.append(self.clamp_action_proj(ca) + self.clamp_action_pos)
        return self.encoder(torch.cat(tokens, 1))

    def denoise(self, memory: Tensor, noised: Tensor, k: Tensor) -> Tensor:
        cfg = self.cfg
        check_shape("predict_noise", "noised", tuple(noised.shape), (memory.shape[0], cfg.chunk, cfg.action_dim))
        k = torch.as_tensor(k).reshape(-1).expand(noised.shape[0])
        if torch.any(k < 0) or torch.any(k >= cfg.K):
            raise ValueError(f"noise level index must be in [0, {cfg.K})")
        onehot = F.one_hot(k.long(), cfg.K).to(noised.dtype)
        x = self.action_in(noised) + self.chunk_pos + self.step_embed(onehot)[:, None]
        return self.head(self.norm(self.decoder(x, memory)))

    def forward(self, obs: dict, noised: Tensor, k) -> Tensor:
        return self.denoise(self.observation_tokens(obs), noised, k)


def predict_noise(policy: PolicyNet, obs: dict, noised: Tensor, k) -> Tensor:
    return policy(obs, noised, k)


def diffusion_loss(policy: PolicyNet, obs: dict, a0: Tensor, k: Tensor, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """MSE between injected noise and the prediction at noise level ``k``."""
    return F.mse_loss(policy(obs, add_noise(a0, k, eps, sched), k), eps)


def draw_noise(batch: int, shape, K: int, gen: torch.Generator, dtype=torch.float32):
    k = torch.randint(0, K, (batch,), generator=gen)
    eps = torch.randn((batch, *shape), generator=gen, dtype=dtype)
    return k, eps


def train_step(policy: PolicyNet, optimizer, obs: dict, a0: Tensor, sched: NoiseSchedule,
               gen: torch.Generator, scheduler=None, clip: float | None = 1.0) -> float:
    """Sample ``k`` and noise per element, regress the noise, apply one update."""
    if a0.shape[0] == 0:
        raise ValueError("empty batch")
    k, eps = draw_noise(a0.shape[0], a0.shape[1:], sched.K, gen, a0.dtype)
    optimizer.zero_grad(set_to_none=True)
    loss = diffusion_loss(policy, obs, a0, k, eps, sched)
    loss.backward()
    if clip:
        nn.utils.clip_grad_norm_(policy.parameters(), clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return float(loss.detach())


@torch.no_grad()
def sample_actions(policy: PolicyNet, obs: dict, sched: NoiseSchedule, seed: int = 0, mode: str = "literal",
                   clip: float | None = 1.0) -> Tensor:
    """Normalized action chunks ``(B, C, A)``; the observation is encoded once."""
    memory = policy.observation_tokens(obs)
    B = memory.shape[0]
    shape = (B, policy.cfg.chunk, policy.cfg.action_dim)

    def predict(a, i):
        return policy.denoise(memory, a, torch.full((B,), i))

    return sample_chunk(predict, shape, sched, seed, mode, memory.dtype, clip)


def warmup_lambda(warmup: int):
    """Linear ramp from ``1/warmup`` to 1 over ``warmup`` steps, then constant."""
    return lambda step: min(1.0, (step + 1) / max(1, warmup))


# ---------------------------------------------------------------- persistence


def save_policy(policy: PolicyNet, path, normalizer: Normalizer, config_hash: str, mode: str,
                extra: dict | None = None) -> None:
    path = Path(path)
    save_checkpoint(dict(policy.state_dict()), path)
    side = {"normalizer": normalizer.to_dict(), "config_hash": config_hash, "mode": mode,
            "policy_config": policy.cfg.to_dict(), **(extra or {})}
    sidecar(path).write_text(json.dumps(side, indent=1, sort_keys=True))


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_policy(path):
    """``(policy, normalizer, sidecar dict)``."""
    params, _ = load_checkpoint(path)
    side = json.loads(sidecar(path).read_text())
    cfg = side["policy_config"]
    cfg["stem_channels"] = tuple(cfg["stem_channels"])
    policy = PolicyNet(PolicyConfig(**cfg))
    load_into(policy, params)
    return policy, Normalizer.from_dict(side["normalizer"]), side
