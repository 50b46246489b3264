"""Image (STRING-ViT), text and action encoders with attention pooling."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .contrastive import TempBias
from .diffcore import ShapeError, check_shape
from .string_attention import StringParams, apply_string


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_dim: int = 128
    patch: int = 8
    view_size: int = 64
    n_views: int = 5
    action_history: int = 16
    history_pad: str = "start"  # or "zero": zeros with the mask off before the episode start
    action_dim: int = 14
    text_max_tokens: int = 256
    vocab_size: int = 512
    dropout: float = 0.0
    use_string: bool = True
    abs_pos: bool = False
    trainable_freq: bool = True
    freq_scale: float = 2 * math.pi / 0.1
    xyz_center: tuple = (0.0, 0.0, 0.9)

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if (self.embed_dim // self.heads) % 2:
            raise ValueError("per-head dim must be even for STRING")
        if self.history_pad not in ("start", "zero"):
            raise ValueError(f"unknown history_pad {self.history_pad!r}")
        if self.view_size % self.patch:
            raise ValueError("patch must divide view_size")

    @property
    def n_patches(self) -> int:
        return (self.view_size // self.patch) ** 2 * self.n_views

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- tokenizer

PAD, UNK = 0, 1
_SPECIAL = ["[PAD]", "[UNK]"]
_PUNCT = list("(),.:;-")
_DIGITS = [str(i) for i in range(10)]
_WORDS = """
task objects at progress none pick place put the a an and it in into on onto to from of with
up down left right slide push pull open close drawer along until stop grasp lift release move
arm gripper target source object container bin tray pad box ball cube block sphere
red_cube blue_bin green_ball yellow_tray purple_block orange_ball cyan_box pink_sphere
grey_drawer white_pad brown_crate teal_block black_ball olive_box
""".split()
VOCAB = _SPECIAL + _PUNCT + _DIGITS + _WORDS
_INDEX = {tok: i for i, tok in enumerate(VOCAB)}
_TOKEN_RE = re.compile(r"[a-z_]+|[0-9]|[^\sa-z_0-9]")


def split_words(text: str) -> list[str]:
    """Lowercased words; every digit and punctuation mark is its own token."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, max_tokens: int = 256) -> np.ndarray:
    ids = [_INDEX.get(w, UNK) for w in split_words(text)][:max_tokens]
    out = np.full(max_tokens, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


# ---------------------------------------------------------------- building blocks


class Attention(nn.Module):
    """Multihead self-attention; queries/keys optionally STRING-encoded.

    One :class:`StringParams` per layer is shared by all heads.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, string: StringParams | None = None):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.string = string
        self.dropout = dropout

    def forward(self, x: Tensor, coords: Tensor | None = None, key_mask: Tensor | None = None) -> Tensor:
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        if self.string is not None:
            if coords is None:
                raise ShapeError("Attention: STRING layer needs coordinates")
            P = self.string.orthogonal()
            c = coords[:, None]
            q = apply_string(q, c, P, self.string.freq)
            k = apply_string(k, c, P, self.string.freq)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(
            q, k, v, attn_mask=mask, dropout_p=self.dropout if self.training else 0.0
        )
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float = 0.0,
                 string: StringParams | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout, string)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(mlp_dim, dim))

    def forward(self, x, coords=None, key_mask=None):
        x = x + self.attn(self.norm1(x), coords, key_mask)
        return x + self.mlp(self.norm2(x))


class MAPPool(nn.Module):
    """Multihead attention pooling: one learned query cross-attends the tokens."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.probe = nn.Parameter(torch.randn(dim) * 0.02)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def weights(self, tokens: Tensor, key_mask: Tensor | None = None) -> Tensor:
        """Per-head softmax weights ``(B, heads, N)``."""
        B, N, D = tokens.shape
        dh = D // self.heads
        q = self.q(self.probe).reshape(self.heads, dh)
        k = self.kv(tokens)[..., :D].reshape(B, N, self.heads, dh)
        logits = torch.einsum("hd,bnhd->bhn", q, k) / math.sqrt(dh)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, :], float("-inf"))
        return logits.softmax(-1)

    def forward(self, tokens: Tensor, key_mask: Tensor | None = None) -> Tensor:
        B, N, D = tokens.shape
        if N == 0:
            raise ShapeError("MAPPool: empty token set")
        v = self.kv(tokens)[..., D:].reshape(B, N, self.heads, D // self.heads)
        w = self.weights(tokens, key_mask)
        pooled = torch.einsum("bhn,bnhd->bhd", w, v).reshape(B, D)
        return self.out(pooled)


def l2_normalize(x: Tensor) -> Tensor:
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True)


# ---------------------------------------------------------------- encoders


class ImageEncoder(nn.Module):
    """ViT over tiled DXYZ views with STRING on per-patch 3D coordinates."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * 4, d)
        self.pos = nn.Parameter(torch.randn(cfg.n_patches, d) * 0.02) if cfg.abs_pos else None
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_dim, cfg.dropout,
                  StringParams(d // cfg.heads, cfg.trainable_freq, cfg.freq_scale) if cfg.use_string else None)
            for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(d)
        self.pool = MAPPool(d, cfg.heads)
        self.register_buffer("center", torch.tensor([0.0, *cfg.xyz_center]), persistent=False)

    def patchify(self, image: Tensor) -> Tensor:
        B, H, W, C = image.shape
        p = self.cfg.patch
        check_shape("image_encode", "image", image.shape, (None, self.cfg.view_size, self.cfg.view_size * self.cfg.n_views, 4))
        x = image.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def forward(self, image: Tensor, coords: Tensor, patch_valid: Tensor | None = None):
        """Returns ``(unit embedding (B, d), unpooled tokens (B, P, d))``."""
        image = image.to(self.center.dtype)
        fg = (image[..., :1] > 0).to(image.dtype)
        x = self.patch_embed(self.patchify((image - self.center) * fg))
        check_shape("image_encode", "patch_coords", coords.shape, (x.shape[0], x.shape[1], 3))
        coords = coords.to(x.dtype)
        if patch_valid is not None:
            coords = coords * patch_valid[..., None].to(x.dtype)
        if self.pos is not None:
            x = x + self.pos
        for blk in self.blocks:
            x = blk(x, coords)
        tokens = self.norm(x)
        return l2_normalize(self.pool(tokens)), tokens


class _StartToken(nn.Module):
    """A learned always-attendable token so fully padded inputs stay well defined."""

    def __init__(self, dim: int):
        super().__init__()
        self.token = nn.Parameter(torch.randn(dim) * 0.02)

    def prepend(self, x: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        B = x.shape[0]
        start = self.token.expand(B, 1, -1)
        ones = torch.ones(B, 1, dtype=torch.bool)
        return torch.cat([start, x], 1), torch.cat([ones, mask], 1)


class ActionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = nn.Linear(cfg.action_dim, d)
        self.pos = nn.Parameter(torch.randn(cfg.action_history, d) * 0.02)
        self.start = _StartToken(d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_dim, cfg.dropout) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.pool = MAPPool(d, cfg.heads)

    def forward(self, history: Tensor, mask: Tensor):
        """``history`` is ``(B, H, A)`` oldest first; ``mask`` marks real steps."""
        B, H, A = history.shape
        check_shape("action_encode", "history", history.shape, (None, None, self.cfg.action_dim))
        if H > self.cfg.action_history:
            raise ShapeError(f"action_encode: history length {H} exceeds {self.cfg.action_history}")
        x = self.embed(history.to(self.pos.dtype)) + self.pos[:H]
        x, key_mask = self.start.prepend(x, mask.bool())
        for blk in self.blocks:
            x = blk(x, key_mask=key_mask)
        tokens = self.norm(x)
        return l2_normalize(self.pool(tokens, key_mask)), tokens[:, 1:]


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.pos = nn.Parameter(torch.randn(cfg.text_max_tokens, d) * 0.02)
        self.start = _StartToken(d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_dim, cfg.dropout) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.pool = MAPPool(d, cfg.heads)

    def forward(self, ids: Tensor) -> Tensor:
        if ids.shape[-1] > self.cfg.text_max_tokens:
            raise ShapeError(f"text_encode: {ids.shape[-1]} tokens exceed {self.cfg.text_max_tokens}")
        if bool((ids >= self.cfg.vocab_size).any()) or bool((ids < 0).any()):
            raise ValueError("text_encode: token id outside vocabulary")
        mask = ids != PAD
        # trailing all-pad columns are masked everywhere; dropping them is exact
        keep = int(mask.any(0).nonzero().max()) + 1 if bool(mask.any()) else 0
        ids, mask = ids[:, :keep], mask[:, :keep]
        x = self.embed(ids) + self.pos[:keep]
        x, key_mask = self.start.prepend(x, mask)
        for blk in self.blocks:
            x = blk(x, key_mask=key_mask)
        return l2_normalize(self.pool(self.norm(x), key_mask))


class ClampEncoders(nn.Module):
    """The three encoders plus the contrastive temperature/bias."""

    def __init__(self, cfg: EncoderConfig, per_pair_tempbias: bool = False):
        super().__init__()
        self.cfg = cfg
        self.image = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.action = ActionEncoder(cfg)
        if per_pair_tempbias:
            self.tempbias = nn.ModuleDict({k: TempBias() for k in ("image_text", "image_action", "text_action")})
        else:
            self.tempbias = TempBias()

    def embed(self, batch: dict) -> tuple[Tensor, Tensor, Tensor]:
        x, _ = self.image(batch["image"], batch["coords"], batch.get("patch_valid"))
        y = self.text(batch["text_ids"])
        z, _ = self.action(batch["history"], batch["history_mask"])
        return x, y, z
