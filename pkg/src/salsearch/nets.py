"""Fully-connected stacks shared by every network in the model."""
from __future__ import annotations

import hashlib
from typing import Sequence

import torch
from torch import nn


def mlp(in_dim: int, widths: Sequence[int], hidden: str = "relu", out: str = "tanh") -> nn.Sequential:
    """Linear layers of the given widths.

    Every layer but the last is followed by BatchNorm and ``hidden``
    (``relu`` or ``leaky``); the last is followed by ``out`` (``tanh`` or ``none``).
    """
    layers: list[nn.Module] = []
    prev = in_dim
    for i, w in enumerate(widths):
        layers.append(nn.Linear(prev, w))
        if i < len(widths) - 1:
            layers.append(nn.BatchNorm1d(w))
            layers.append(nn.ReLU() if hidden == "relu" else nn.LeakyReLU(0.2))
        prev = w
    if out == "tanh":
        layers.append(nn.Tanh())
    elif out != "none":
        raise ValueError(f"unknown output activation {out!r}")
    return nn.Sequential(*layers)


def score_jointly(disc: nn.Module, *batches):
    """Run ``disc`` once over the concatenation of ``batches`` and split the logits back.

    Real and synthetic inputs must share one forward pass so BatchNorm cannot
    normalize away the difference between them.  Each batch is a tensor or a
    tuple of tensors (positional arguments of ``disc``).
    """
    batches = [b if isinstance(b, tuple) else (b,) for b in batches]
    sizes = [len(b[0]) for b in batches]
    args = [torch.cat(parts) for parts in zip(*batches)]
    return torch.split(disc(*args), sizes)


def last_linear(net: nn.Module) -> nn.Linear:
    return [m for m in net.modules() if isinstance(m, nn.Linear)][-1]


def zero_output_layer(net: nn.Module) -> None:
    lin = last_linear(net)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()


def check_dim(x: torch.Tensor, dim: int, what: str) -> None:
    if x.shape[-1] != dim:
        raise ValueError(f"{what}: expected last dimension {dim}, got {x.shape[-1]}")


def module_digest(module: nn.Module, buffers: bool = True) -> str:
    """SHA-256 over every parameter (and optionally buffer) of ``module``."""
    h = hashlib.sha256()
    items = module.state_dict().items() if buffers else module.named_parameters()
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
