"""High-level alignment GAN on the common space.

``D_2`` treats visual-branch embeddings as the real class and attribute-branch
embeddings as the fake class; ``E_A`` plays the generator.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .embedding import ClassifierHeads, embedding_loss
from .nets import check_dim, mlp, score_jointly
from .synthesis_gan import DISC_WIDTHS


class CommonDiscriminator(nn.Module):
    def __init__(self, dim: int = 128, widths: Sequence[int] = DISC_WIDTHS):
        super().__init__()
        self.dim = dim
        self.net = mlp(dim, widths, hidden="leaky", out="none")

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        check_dim(e, self.dim, "D_2 input")
        return self.net(e).squeeze(1)


def disc_common(e, d2: CommonDiscriminator) -> torch.Tensor:
    return torch.sigmoid(d2(e))


def modality_game(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """``(d_loss, g_loss_fake, g_loss_real)`` for a real-vs-fake modality game.

    ``d_loss`` negates ``E log D(real) + E log(1 - D(fake))``.  ``g_loss_fake`` is
    the non-saturating loss pulling fakes toward the real class; ``g_loss_real``
    the mirror-image loss pulling reals toward the fake class.
    """
    if real_logits.numel() == 0 or fake_logits.numel() == 0:
        raise ValueError("empty batch")
    objective = F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()
    return -objective, -F.logsigmoid(fake_logits).mean(), -F.logsigmoid(-real_logits).mean()


def gan2_loss(e_v: torch.Tensor, e_a: torch.Tensor, d2: CommonDiscriminator):
    """Modality game on real features; only ``E_A`` gets a generator loss."""
    d_loss, g_loss, _ = modality_game(*score_jointly(d2, e_v, e_a))
    return d_loss, g_loss


def aug_adv_loss(fv_tilde: torch.Tensor, fa_tilde: torch.Tensor, enc_v: nn.Module, enc_a: nn.Module,
                 d2: CommonDiscriminator):
    """Modality game on synthetic features ``E_V(G_V(f_a, z))`` vs ``E_A(G_A(f_v))``.

    The generator loss moves both encoders: ``E_A`` toward the visual class and
    ``E_V`` (on synthetic visuals) toward the attribute class.
    """
    d_loss, g_fake, g_real = modality_game(*score_jointly(d2, enc_v(fv_tilde), enc_a(fa_tilde)))
    return d_loss, g_fake + g_real


def aug_embed_loss(fa_tilde: torch.Tensor, y_a: torch.Tensor, a_a: torch.Tensor,
                   fv_tilde: torch.Tensor, y_v: torch.Tensor, a_v: torch.Tensor, has_cat_v: torch.Tensor,
                   enc_a: nn.Module, enc_v: nn.Module, heads: ClassifierHeads) -> dict[str, torch.Tensor]:
    """Embedding loss on encoded synthetic features carrying their source labels.

    ``has_cat_v`` marks synthetic visuals generated from seen categories; rows
    from sampled unseen combinations contribute only to the attribute term.
    """
    zero = heads.attribute.weight.new_zeros(())
    out = {"cat": zero, "att": zero, "total": zero}
    if len(fa_tilde):
        la = embedding_loss(enc_a(fa_tilde), y_a, a_a, heads)
        out = {k: out[k] + la[k] for k in out}
    if len(fv_tilde):
        lv = embedding_loss(enc_v(fv_tilde), y_v, a_v, heads, has_category=has_cat_v)
        out = {k: out[k] + lv[k] for k in out}
    return out
