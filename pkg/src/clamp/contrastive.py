"""Tri-modal sigmoid contrastive objective over image, text and action embeddings.

Labels are +1 on the batch diagonal and -1 elsewhere.  The pair loss is
``(1/|B|) * sum_ij softplus(-l_ij * z_ij)`` with logits ``z = t * X @ Y.T + b``.
The logits as literally printed in the source equations, ``t * X @ Y.T - b``,
are available through ``sign="literal"``.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffcore import ShapeError

PAIRS = ("image_text", "image_action", "text_action")


class TempBias(nn.Module):
    """Learnable temperature (stored as ``log t``) and bias."""

    def __init__(self, t: float = 10.0, b: float = -10.0, dtype=None):
        super().__init__()
        self.log_t = nn.Parameter(torch.tensor(math.log(t), dtype=dtype))
        self.b = nn.Parameter(torch.tensor(float(b), dtype=dtype))

    @property
    def t(self) -> Tensor:
        return self.log_t.exp()


def pairwise_logits(X: Tensor, Y: Tensor, tb: TempBias, sign: str = "standard") -> Tensor:
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"pairwise_logits: X {tuple(X.shape)} and Y {tuple(Y.shape)} disagree")
    sim = tb.t * (X @ Y.T)
    if sign == "standard":
        return sim + tb.b
    if sign == "literal":
        return sim - tb.b
    raise ValueError(f"unknown sign convention {sign!r}")


def labels(n: int, m: int | None = None, dtype=None) -> Tensor:
    m = n if m is None else m
    return 2 * torch.eye(n, m, dtype=dtype) - 1


def siglip_pair_loss(X: Tensor, Y: Tensor, tb: TempBias, sign: str = "standard") -> Tensor:
    z = pairwise_logits(X, Y, tb, sign)
    return F.softplus(-labels(*z.shape, dtype=z.dtype) * z).sum() / X.shape[0]


def tri_modal_loss(X: Tensor, Y: Tensor, Z: Tensor, tb, sign: str = "standard",
                   parts: bool = False):
    """Mean of the image-text, image-action and text-action pair losses.

    ``tb`` is one shared :class:`TempBias` or a mapping from pair name to one.
    """
    if not (X.shape == Y.shape == Z.shape):
        raise ShapeError(f"tri_modal_loss: shapes {tuple(X.shape)}, {tuple(Y.shape)}, {tuple(Z.shape)}")
    shared = isinstance(tb, TempBias)
    losses = {
        "image_text": siglip_pair_loss(X, Y, tb if shared else tb["image_text"], sign),
        "image_action": siglip_pair_loss(X, Z, tb if shared else tb["image_action"], sign),
        "text_action": siglip_pair_loss(Y, Z, tb if shared else tb["text_action"], sign),
    }
    total = (losses["image_text"] + losses["image_action"] + losses["text_action"]) / 3
    return (total, losses) if parts else total


def matching_probabilities(X: Tensor, Y: Tensor, tb: TempBias, sign: str = "standard") -> Tensor:
    return torch.sigmoid(pairwise_logits(X, Y, tb, sign))
