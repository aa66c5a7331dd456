"""Middle-level feature extractors for both modalities.

Both branches end in ``tanh`` so attribute features ``f_a`` and visual
features ``f_v`` share the ``[-1, 1]`` range expected by the pair discriminator.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .nets import check_dim, mlp

MID_DIM = 512
ATTR_WIDTHS = (64, 128, 256, 512)
BACKBONE_KINDS = ("precomputed", "toy-mlp", "external-convnet")


class AttributeFeatureExtractor(nn.Module):
    def __init__(self, attr_dim: int, widths: Sequence[int] = ATTR_WIDTHS):
        super().__init__()
        self.attr_dim = attr_dim
        self.out_dim = widths[-1]
        self.net = mlp(attr_dim, widths)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        check_dim(a, self.attr_dim, "attribute vector")
        return self.net(a)


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "toy-mlp"
    input_dim: int = 32
    hidden: tuple[int, ...] = (256,)
    output_dim: int = MID_DIM

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}; choose from {BACKBONE_KINDS}")


class ImageFeatureExtractor(nn.Module):
    """Visual branch: optional trainable backbone, then one affine projection and ``tanh``.

    ``precomputed`` projects the stored vector directly; ``toy-mlp`` inserts a
    trainable MLP; ``external-convnet`` expects vectors already produced by the
    frozen :class:`ConvNetAdapter` (``input_dim`` = 2048 for ResNet-50).
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        if spec.kind == "toy-mlp" and spec.hidden:
            self.backbone = mlp(spec.input_dim, spec.hidden, out="none")
            self.backbone.append(nn.BatchNorm1d(spec.hidden[-1]))
            self.backbone.append(nn.ReLU())
            proj_in = spec.hidden[-1]
        else:
            self.backbone = nn.Identity()
            proj_in = spec.input_dim
        self.proj = nn.Linear(proj_in, spec.output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_dim(x, self.spec.input_dim, "visual feature")
        return torch.tanh(self.proj(self.backbone(x)))


def extract_attribute_features(a, net: AttributeFeatureExtractor) -> torch.Tensor:
    a = torch.as_tensor(np.asarray(a), dtype=next(net.parameters()).dtype)
    return net(a)


def extract_image_features(visual, net: ImageFeatureExtractor) -> torch.Tensor:
    """``visual`` is a (B, input_dim) array, or a list of image paths in ``external-convnet`` mode."""
    if net.spec.kind == "external-convnet" and not isinstance(visual, (np.ndarray, torch.Tensor)):
        visual = ConvNetAdapter().embed_paths(visual)
    x = torch.as_tensor(np.asarray(visual), dtype=next(net.parameters()).dtype)
    return net(x)


def load_feature_file(path, expected_dim: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file {path} not found")
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 2 or (expected_dim is not None and arr.shape[1] != expected_dim):
        raise ValueError(f"{path}: expected (N, {expected_dim}) array, got {arr.shape}")
    return arr


class ConvNetAdapter:
    """Frozen torchvision ResNet-50 turning image files into 2048-d pooled vectors."""

    output_dim = 2048

    def __init__(self, weights=None):
        from torchvision.models import resnet50

        net = resnet50(weights=weights)
        net.fc = nn.Identity()
        self.net = net.eval().requires_grad_(False)

    @torch.no_grad()
    def embed_paths(self, paths, size: int = 224) -> np.ndarray:
        from PIL import Image

        mean = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)
        batch = []
        for p in paths:
            if not Path(p).exists():
                raise FileNotFoundError(f"image {p} not found")
            img = Image.open(p).convert("RGB").resize((size // 2, size))
            t = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)
            batch.append((t - mean) / std)
        return self.net(torch.stack(batch)).numpy()
