"""The full SAL network: both feature branches, encoders, heads and the two GANs."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .alignment_gan import CommonDiscriminator
from .dataset import Dataset
from .embedding import ENC_WIDTHS, ClassifierHeads, Encoder
from .features import (ATTR_WIDTHS, AttributeFeatureExtractor, BackboneSpec, ConvNetAdapter,
                       ImageFeatureExtractor)
from .nets import module_digest
from .synthesis_gan import DISC_WIDTHS, GEN_WIDTHS, Z_DIM, AttrGenerator, PairDiscriminator, VisualGenerator

GROUPS = ("image_branch", "attr_branch", "enc_v", "enc_a", "heads", "g_a", "g_v", "d1", "d2")

# parameter groups each step of the symbiotic loop may modify
STEP_GROUPS = {
    1: frozenset({"image_branch", "attr_branch", "enc_v", "enc_a", "heads"}),
    2: frozenset({"g_a", "g_v", "d1"}),
    3: frozenset({"enc_a", "enc_v", "d2", "heads"}),
}

IMAGE_SIDE = frozenset({"image_branch", "enc_v", "heads"})
ATTRIBUTE_SIDE = frozenset({"attr_branch", "enc_a"})


@dataclass
class ModelConfig:
    attr_dim: int
    num_categories: int
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    attr_widths: tuple = ATTR_WIDTHS
    gen_widths: tuple = GEN_WIDTHS
    enc_widths: tuple = ENC_WIDTHS
    disc_widths: tuple = DISC_WIDTHS
    z_dim: int = Z_DIM
    share_heads: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.backbone.items()})
        for name in ("attr_widths", "gen_widths", "enc_widths", "disc_widths"):
            setattr(self, name, tuple(getattr(self, name)))
        mid = self.attr_widths[-1]
        if self.gen_widths[-1] != mid or self.backbone.output_dim != mid:
            raise ValueError("attribute, generator and backbone outputs must share one middle-level width")

    @property
    def mid_dim(self) -> int:
        return self.attr_widths[-1]

    @property
    def common_dim(self) -> int:
        return self.enc_widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)


class SharedOrSplitHeads(nn.Module):
    """Category/attribute heads, either one pair for both modalities or one per modality."""

    def __init__(self, dim: int, num_categories: int, attr_dim: int, shared: bool):
        super().__init__()
        self.visual = ClassifierHeads(dim, num_categories, attr_dim)
        self.attribute = self.visual if shared else ClassifierHeads(dim, num_categories, attr_dim)

    def for_branch(self, branch: str) -> ClassifierHeads:
        return self.visual if branch == "visual" else self.attribute


class SALModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        mid, common = cfg.mid_dim, cfg.common_dim
        self.image_branch = ImageFeatureExtractor(cfg.backbone)
        self.attr_branch = AttributeFeatureExtractor(cfg.attr_dim, cfg.attr_widths)
        self.enc_v = Encoder(mid, cfg.enc_widths)
        self.enc_a = Encoder(mid, cfg.enc_widths)
        self.heads = SharedOrSplitHeads(common, cfg.num_categories, cfg.attr_dim, cfg.share_heads)
        self.g_a = AttrGenerator(mid, cfg.gen_widths)
        self.g_v = VisualGenerator(mid, cfg.z_dim, cfg.gen_widths)
        self.d1 = PairDiscriminator(mid, cfg.disc_widths)
        self.d2 = CommonDiscriminator(common, cfg.disc_widths)

    def group(self, name: str) -> nn.Module:
        return getattr(self, name)

    def digests(self) -> dict[str, str]:
        return {g: module_digest(self.group(g)) for g in GROUPS}

    def grouped_state(self) -> dict[str, dict]:
        return {g: self.group(g).state_dict() for g in GROUPS}

    def load_grouped_state(self, state: dict[str, dict]) -> None:
        for g in GROUPS:
            self.group(g).load_state_dict(state[g])

    @torch.no_grad()
    def embed_visual(self, x, batch: int = 1024) -> np.ndarray:
        """Common-space embeddings of raw visual inputs (eval mode)."""
        was = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(np.asarray(x), dtype=dtype)
        out = [self.enc_v(self.image_branch(x[i:i + batch])) for i in range(0, len(x), batch)]
        self.train(was)
        return torch.cat(out).numpy()

    @torch.no_grad()
    def embed_attributes(self, a, batch: int = 1024) -> np.ndarray:
        was = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        a = torch.as_tensor(np.asarray(a), dtype=dtype)
        out = [self.enc_a(self.attr_branch(a[i:i + batch])) for i in range(0, len(a), batch)]
        self.train(was)
        return torch.cat(out).numpy()


def visual_matrix(ds: Dataset, spec: BackboneSpec) -> np.ndarray:
    """Raw visual input matrix for ``ds``; image paths go through the frozen convnet once."""
    if ds.has_features:
        x = np.asarray(ds.visuals, dtype=np.float64)
    elif spec.kind == "external-convnet":
        x = ConvNetAdapter().embed_paths(ds.visuals).astype(np.float64)
    else:
        raise ValueError(f"dataset holds image paths but backbone kind is {spec.kind!r}; "
                         "use external-convnet or precomputed features")
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"visual inputs have dimension {x.shape[1]}, backbone expects {spec.input_dim}")
    return x
