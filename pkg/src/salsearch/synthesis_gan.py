"""Middle-level synthesis GAN: generators ``G_A`` (visual -> semantic), ``G_V``
(semantic + noise -> visual) and the pair discriminator ``D_1``.

Discriminators return logits; ``log D`` and ``log(1 - D)`` are evaluated as
``logsigmoid(l)`` and ``logsigmoid(-l)`` so saturated scores stay finite.
"""
from __future__ import annotations

import contextlib
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .nets import check_dim, mlp

GEN_WIDTHS = (256, 128, 256, 512)
DISC_WIDTHS = (512, 256, 1)
Z_DIM = 64


class AttrGenerator(nn.Module):
    """``G_A``: synthesizes a semantic feature from a visual feature."""

    def __init__(self, dim: int = 512, widths: Sequence[int] = GEN_WIDTHS):
        super().__init__()
        self.dim = dim
        self.net = mlp(dim, widths)

    def forward(self, f_v: torch.Tensor) -> torch.Tensor:
        check_dim(f_v, self.dim, "G_A input")
        return self.net(f_v)


class VisualGenerator(nn.Module):
    """``G_V``: synthesizes a visual feature from ``[f_a, z]``; one-to-many through the noise."""

    def __init__(self, dim: int = 512, z_dim: int = Z_DIM, widths: Sequence[int] = GEN_WIDTHS):
        super().__init__()
        self.dim = dim
        self.z_dim = z_dim
        self.net = mlp(dim + z_dim, widths)

    def forward(self, f_a: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        check_dim(f_a, self.dim, "G_V attribute input")
        check_dim(z, self.z_dim, "G_V noise input")
        return self.net(torch.cat([f_a, z], dim=1))



class PairDiscriminator(nn.Module):
    """``D_1``: scores a concatenated ``(f_a, f_v)`` pair as real (1) or synthetic (0)."""

    def __init__(self, dim: int = 512, widths: Sequence[int] = DISC_WIDTHS):
        super().__init__()
        self.dim = dim
        self.net = mlp(2 * dim, widths, hidden="leaky", out="none")

    def forward(self, f_a: torch.Tensor, f_v: torch.Tensor) -> torch.Tensor:
        check_dim(f_a, self.dim, "D_1 attribute input")
        check_dim(f_v, self.dim, "D_1 visual input")
        return self.net(torch.cat([f_a, f_v], dim=1)).squeeze(1)


def gen_attr_from_visual(f_v, g_a: AttrGenerator) -> torch.Tensor:
    return g_a(f_v)


def gen_visual_from_attr(f_a, z, g_v: VisualGenerator) -> torch.Tensor:
    return g_v(f_a, z)


def disc_pair(f_a, f_v, d1: PairDiscriminator) -> torch.Tensor:
    return torch.sigmoid(d1(f_a, f_v))


def _nonempty(*ts):
    for t in ts:
        if t.numel() == 0:
            raise ValueError("empty batch")


def gan1_loss(real: torch.Tensor, fake_av: torch.Tensor, fake_va: torch.Tensor):
    """Three-player pair game from ``D_1`` logits.

    ``real`` scores ``(f_a, f_v)``, ``fake_av`` scores ``(f_a, G_V(f_a, z))`` and
    ``fake_va`` scores ``(G_A(f_v), f_v)``.  Returns ``(d_loss, g_loss_A, g_loss_V)``:
    ``d_loss`` is the negated discriminator objective
    ``E log D(real) + 1/2 E log(1 - D(fake_av)) + 1/2 E log(1 - D(fake_va))``;
    the generator losses are the non-saturating ``-1/2 E log D(fake)``.
    """
    _nonempty(real, fake_av, fake_va)
    objective = (F.logsigmoid(real).mean()
                 + 0.5 * F.logsigmoid(-fake_av).mean()
                 + 0.5 * F.logsigmoid(-fake_va).mean())
    g_loss_a = -0.5 * F.logsigmoid(fake_va).mean()
    g_loss_v = -0.5 * F.logsigmoid(fake_av).mean()
    return -objective, g_loss_a, g_loss_v


def cycle_loss(f_a: torch.Tensor, g_v: VisualGenerator, g_a: AttrGenerator, z: torch.Tensor,
               fv_tilde: torch.Tensor | None = None) -> torch.Tensor:
    """Mean ``||G_A(G_V(f_a, z)) - f_a||`` (semantic -> visual -> semantic only).

    Pass ``fv_tilde = G_V(f_a, z)`` when it is already computed.
    """
    if fv_tilde is None:
        fv_tilde = g_v(f_a, z)
    return (g_a(fv_tilde) - f_a).norm(dim=1).mean()


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Evaluate ``modules`` as fixed functions: eval-mode BatchNorm, no parameter gradients."""
    state = [(m, m.training, [p.requires_grad for p in m.parameters()]) for m in modules]
    for m in modules:
        m.eval()
        m.requires_grad_(False)
    try:
        yield
    finally:
        for m, training, flags in state:
            m.train(training)
            for p, f in zip(m.parameters(), flags):
                p.requires_grad_(f)


def consistency_loss(f_a: torch.Tensor, f_v: torch.Tensor, fa_tilde: torch.Tensor, fv_tilde: torch.Tensor,
                     enc_a: nn.Module, enc_v: nn.Module) -> dict[str, torch.Tensor]:
    """Granularity consistency of synthetic features in the common space.

    ``f_v``/``fa_tilde`` are paired with the first ``len(f_v)`` rows of
    ``f_a``/``fv_tilde``; extra ``f_a`` rows are sampled unseen combinations
    with no visual partner, so they only enter the ``E_V(fv~) ~ E_A(f_a)`` term.
    The encoders are fixed targets: gradients reach only the synthetic inputs.
    """
    n = len(f_v)
    with frozen(enc_a, enc_v):
        with torch.no_grad():
            ev_real = enc_v(f_v)
            ea_real = enc_a(f_a)
        ea_fake = enc_a(fa_tilde)
        ev_fake = enc_v(fv_tilde)
    terms = {
        "a2v": (ea_fake - ev_real).norm(dim=1).mean(),
        "v2a": (ev_fake - ea_real).norm(dim=1).mean(),
        "a2a": (ea_fake - ea_real[:n]).norm(dim=1).mean(),
        "v2v": (ev_fake[:n] - ev_real).norm(dim=1).mean(),
    }
    terms["total"] = terms["a2v"] + terms["v2a"] + terms["a2a"] + terms["v2v"]
    return terms
