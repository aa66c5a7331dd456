"""Common-space encoders, shared classifier heads and the embedding loss."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .nets import check_dim, mlp

ENC_WIDTHS = (512, 256, 128)


class Encoder(nn.Module):
    """Maps a 512-d middle-level feature into the 128-d common space (``E_V`` / ``E_A``)."""

    def __init__(self, in_dim: int = 512, widths: Sequence[int] = ENC_WIDTHS):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = widths[-1]
        self.net = mlp(in_dim, widths)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        check_dim(f, self.in_dim, "encoder input")
        return self.net(f)


def encode_visual(f_v, enc_v: Encoder) -> torch.Tensor:
    return enc_v(f_v)


def encode_attribute(f_a, enc_a: Encoder) -> torch.Tensor:
    return enc_a(f_a)


class ClassifierHeads(nn.Module):
    """Single affine layers predicting the category (softmax) and each attribute (sigmoid)."""

    def __init__(self, dim: int, num_categories: int, attr_dim: int):
        super().__init__()
        self.category = nn.Linear(dim, num_categories)
        self.attribute = nn.Linear(dim, attr_dim)

    def forward(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.category(e), self.attribute(e)


def _finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite {what}")


def category_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of the true category."""
    _finite(logits, "category logits")
    return F.cross_entropy(logits, y)


def attribute_loss(logits: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Per-sample sum over attributes of sigmoid cross-entropy, averaged over the batch."""
    _finite(logits, "attribute logits")
    if logits.shape != a.shape:
        raise ValueError(f"attribute logits {tuple(logits.shape)} vs labels {tuple(a.shape)}")
    per = F.binary_cross_entropy_with_logits(logits, a.to(logits.dtype), reduction="none")
    return per.sum(dim=1).mean()


def embedding_loss(e: torch.Tensor, y: torch.Tensor, a: torch.Tensor, heads: ClassifierHeads,
                   has_category: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Category + attribute loss of common-space embeddings ``e``.

    Rows with ``has_category`` False (sampled unseen combinations) only
    contribute to the attribute term.  Returns ``{"cat", "att", "total"}``.
    """
    cat_logits, att_logits = heads(e)
    if has_category is None:
        l_cat = category_loss(cat_logits, y)
    elif has_category.any():
        l_cat = category_loss(cat_logits[has_category], y[has_category])
    else:
        l_cat = cat_logits.new_zeros(())
    l_att = attribute_loss(att_logits, a)
    return {"cat": l_cat, "att": l_att, "total": l_cat + l_att}
