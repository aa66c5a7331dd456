"""Pretraining, the symbiotic three-step loop, ablation variants and checkpoints."""
from __future__ import annotations

import contextlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
from torch import nn

from . import alignment_gan as align
from . import synthesis_gan as synth
from .dataset import AttributeStats, Dataset, estimate_attribute_stats, sample_unseen_attributes
from .embedding import embedding_loss
from .evaluation import MetricsReport, evaluate_model
from .features import BackboneSpec
from .model import GROUPS, IMAGE_SIDE, STEP_GROUPS, ModelConfig, SALModel, visual_matrix
from .nets import score_jointly
from .synthesis_gan import frozen

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
VARIANTS = ("embed", "embed+adv", "embed+symb-adv", "sal", "sal-stagewise")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr_image_branch: float = 1e-3
    lr_attribute_branch: float = 1e-2
    lr_gan: float = 1e-3
    optimizer: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    z_dim: int = synth.Z_DIM
    lambda_gan1: float = 1.0
    lambda_cyc: float = 1.0
    lambda_consis: float = 1.0
    lambda_gan2: float = 1.0
    lambda_aug: float = 1.0
    unseen_per_batch: int | None = None
    seed: int = 0
    variant: str = "sal"
    pretrain_max_epochs: int = 100
    pretrain_patience: int = 5
    share_heads: bool = True
    backbone_kind: str = "toy-mlp"
    backbone_hidden: tuple = (256,)
    dtype: str = "float32"
    eval_every: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.backbone_hidden = tuple(self.backbone_hidden)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.epochs < 0 or self.batch_size <= 0 or self.pretrain_max_epochs < 0:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.lr_image_branch, self.lr_attribute_branch, self.lr_gan) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.lambda_gan1, self.lambda_cyc, self.lambda_consis, self.lambda_gan2, self.lambda_aug) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.unseen_per_batch is not None and self.unseen_per_batch < 0:
            raise ValueError("unseen_per_batch must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def unseen_count(self) -> int:
        """Unseen combinations injected per batch under this variant."""
        if self.variant not in ("sal", "sal-stagewise"):
            return 0
        return self.batch_size if self.unseen_per_batch is None else self.unseen_per_batch

    @property
    def steps(self) -> tuple[int, ...]:
        return {"embed": (1,), "embed+adv": (1, 3)}.get(self.variant, (1, 2, 3))

    @property
    def uses_synthesis(self) -> bool:
        return 2 in self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["backbone_hidden"] = list(self.backbone_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class Batch:
    x: torch.Tensor          # raw visual inputs
    a: torch.Tensor          # attribute vectors (float)
    y: torch.Tensor          # category ids


@dataclass
class Features:
    """Middle-level features of one batch, computed once per iteration after Step 1."""

    f_v: torch.Tensor
    f_a: torch.Tensor        # seen rows first, then sampled unseen rows
    a: torch.Tensor
    y: torch.Tensor          # -1 on unseen rows
    has_cat: torch.Tensor

    @property
    def n_seen(self) -> int:
        return len(self.f_v)


class Trainer:
    """Owns the model, one optimizer per parameter group, and every RNG stream.

    RNG streams are independent so that disabling a component does not shift
    the randomness seen by the others: ``batch_rng`` orders batches,
    ``unseen_rng`` samples attribute combinations and ``noise_gen`` draws ``z``.
    """

    def __init__(self, cfg: TrainConfig, train_ds: Dataset, stats: AttributeStats | None = None):
        self.cfg = cfg
        self.train_ds = train_ds
        spec = BackboneSpec(cfg.backbone_kind, input_dim=self._input_dim(train_ds), hidden=cfg.backbone_hidden)
        self.model_cfg = ModelConfig(train_ds.schema.total_dim, train_ds.num_categories, spec,
                                     z_dim=cfg.z_dim, share_heads=cfg.share_heads)
        self.x_train = visual_matrix(train_ds, spec)
        self.stats = stats or estimate_attribute_stats(train_ds)
        torch.manual_seed(cfg.seed)
        self.model = SALModel(self.model_cfg).to(cfg.torch_dtype)
        self.optimizers = {g: self._make_optimizer(g) for g in GROUPS}
        self.batch_rng = np.random.default_rng([cfg.seed, 1])
        self.unseen_rng = np.random.default_rng([cfg.seed, 2])
        self.noise_gen = torch.Generator().manual_seed(cfg.seed + 3)
        self.epoch = 0
        self.iteration = 0
        self.collisions = 0
        self.step_log: list[dict] = []
        self.log_steps = False
        self._seen_keys = {row.tobytes() for row in train_ds.category_attrs()}

    @staticmethod
    def _input_dim(ds: Dataset) -> int:
        if ds.has_features:
            return ds.visuals.shape[1]
        from .features import ConvNetAdapter
        return ConvNetAdapter.output_dim

    def _lr(self, group: str) -> float:
        if group in ("g_a", "g_v", "d1", "d2"):
            return self.cfg.lr_gan
        if group in IMAGE_SIDE:
            return self.cfg.lr_image_branch
        return self.cfg.lr_attribute_branch

    def _make_optimizer(self, group: str) -> torch.optim.Optimizer:
        params = list(self.model.group(group).parameters())
        if self.cfg.optimizer == "adam":
            return torch.optim.Adam(params, lr=self._lr(group), betas=self.cfg.adam_betas)
        return torch.optim.SGD(params, lr=self._lr(group))

    # ------------------------------------------------------------------
    # batching
    # ------------------------------------------------------------------

    def _tensor(self, arr, dtype=None) -> torch.Tensor:
        return torch.as_tensor(np.asarray(arr), dtype=dtype or self.cfg.torch_dtype)

    def make_batch(self, idx: np.ndarray) -> Batch:
        ds = self.train_ds
        return Batch(self._tensor(self.x_train[idx]), self._tensor(ds.attrs[idx]),
                     torch.as_tensor(ds.categories[idx], dtype=torch.long))

    def batches(self) -> Iterator[Batch]:
        """One shuffled epoch; a trailing singleton batch is dropped (BatchNorm needs >= 2 rows)."""
        perm = self.batch_rng.permutation(len(self.train_ds))
        for i in range(0, len(perm), self.cfg.batch_size):
            idx = perm[i:i + self.cfg.batch_size]
            if len(idx) >= 2:
                yield self.make_batch(idx)

    def sample_unseen(self, n: int) -> np.ndarray:
        a = sample_unseen_attributes(self.train_ds.schema, self.stats, n, self.unseen_rng)
        self.collisions += sum(row.tobytes() in self._seen_keys for row in a)
        return a

    # ------------------------------------------------------------------
    # the three steps
    # ------------------------------------------------------------------

    def _update(self, groups, loss: torch.Tensor, where: str) -> None:
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss in {where} (epoch {self.epoch}, iteration {self.iteration})")
        for g in groups:
            self.optimizers[g].zero_grad(set_to_none=True)
        loss.backward()
        for g in groups:
            self.optimizers[g].step()

    def step_embed(self, batch: Batch) -> dict[str, float]:
        """Step 1: both branches, encoders and heads by the embedding loss."""
        m = self.model
        lv = embedding_loss(m.enc_v(m.image_branch(batch.x)), batch.y, batch.a, m.heads.for_branch("visual"))
        la = embedding_loss(m.enc_a(m.attr_branch(batch.a)), batch.y, batch.a, m.heads.for_branch("attribute"))
        total = lv["total"] + la["total"]
        self._update(STEP_GROUPS[1], total, "step 1 (embedding)")
        return {"embed": total.item(), "embed_cat": (lv["cat"] + la["cat"]).item(),
                "embed_att": (lv["att"] + la["att"]).item()}

    @torch.no_grad()
    def middle_features(self, batch: Batch, n_unseen: int) -> Features:
        m = self.model
        a_all, y_all = batch.a, batch.y
        if n_unseen:
            a_un = self._tensor(self.sample_unseen(n_unseen))
            a_all = torch.cat([batch.a, a_un])
            y_all = torch.cat([batch.y, torch.full((n_unseen,), -1, dtype=torch.long)])
        with frozen(m.image_branch, m.attr_branch):
            f_v = m.image_branch(batch.x)
            f_a = m.attr_branch(a_all)
        return Features(f_v, f_a, a_all, y_all, y_all >= 0)

    def _noise(self, n: int) -> torch.Tensor:
        return torch.randn(n, self.cfg.z_dim, generator=self.noise_gen, dtype=self.cfg.torch_dtype)

    def step_synthesis(self, feats: Features) -> dict[str, float]:
        """Step 2: ``G_A``, ``G_V`` and ``D_1`` by the synthesis objective."""
        m, cfg = self.model, self.cfg
        f_v, f_a, n = feats.f_v, feats.f_a, feats.n_seen
        z = self._noise(len(f_a))

        with torch.no_grad():
            fv_t = m.g_v(f_a, z)
            fa_t = m.g_a(f_v)
        d_loss, _, _ = synth.gan1_loss(*score_jointly(m.d1, (f_a[:n], f_v), (f_a, fv_t), (fa_t, f_v)))
        self._update(["d1"], cfg.lambda_gan1 * d_loss, "step 2 (D_1)")

        fv_t = m.g_v(f_a, z)
        fa_t = m.g_a(f_v)
        with _no_param_grad(m.d1):
            _, g_a_loss, g_v_loss = synth.gan1_loss(*score_jointly(m.d1, (f_a[:n], f_v), (f_a, fv_t), (fa_t, f_v)))
        cyc = synth.cycle_loss(f_a, m.g_v, m.g_a, z, fv_tilde=fv_t)
        consis = synth.consistency_loss(f_a, f_v, fa_t, fv_t, m.enc_a, m.enc_v)
        total = cfg.lambda_gan1 * (g_a_loss + g_v_loss) + cfg.lambda_cyc * cyc + cfg.lambda_consis * consis["total"]
        self._update(["g_a", "g_v"], total, "step 2 (generators)")
        return {"gan1_d": d_loss.item(), "gan1_g": (g_a_loss + g_v_loss).item(), "cyc": cyc.item(),
                "consis": consis["total"].item(), "synth_adv": total.item()}

    def step_alignment(self, feats: Features) -> dict[str, float]:
        """Step 3: ``E_A``, ``E_V``, ``D_2`` and the heads by the alignment objective."""
        m, cfg = self.model, self.cfg
        f_v, f_a, n = feats.f_v, feats.f_a, feats.n_seen
        use_aug = self.cfg.uses_synthesis and cfg.lambda_aug > 0

        if use_aug:
            e_v = m.enc_v(f_v)
        else:
            # E_V only supplies the real class here; keep its BatchNorm statistics untouched
            with frozen(m.enc_v):
                e_v = m.enc_v(f_v)
        e_a = m.enc_a(f_a)
        if use_aug:
            with frozen(m.g_a, m.g_v), torch.no_grad():
                fv_t = m.g_v(f_a, self._noise(len(f_a)))
                fa_t = m.g_a(f_v)
            ev_t = m.enc_v(fv_t)
            ea_t = m.enc_a(fa_t)

        d_loss, _, _ = align.modality_game(*score_jointly(m.d2, e_v.detach(), e_a.detach()))
        d_total = cfg.lambda_gan2 * d_loss
        if use_aug:
            d_aug, _, _ = align.modality_game(*score_jointly(m.d2, ev_t.detach(), ea_t.detach()))
            d_total = d_total + cfg.lambda_aug * d_aug
        self._update(["d2"], d_total, "step 3 (D_2)")

        out = {"gan2_d": d_loss.item()}
        with _no_param_grad(m.d2):
            _, g_loss, _ = align.modality_game(*score_jointly(m.d2, e_v, e_a))
            total = cfg.lambda_gan2 * g_loss
            out["gan2"] = g_loss.item()
            if use_aug:
                _, g_fake, g_real = align.modality_game(*score_jointly(m.d2, ev_t, ea_t))
                aug1 = g_fake + g_real
                ha, hv = m.heads.for_branch("attribute"), m.heads.for_branch("visual")
                la = embedding_loss(ea_t, feats.y[:n], feats.a[:n], ha)
                lv = embedding_loss(ev_t, feats.y, feats.a, hv, has_category=feats.has_cat)
                aug2 = la["total"] + lv["total"]
                total = total + cfg.lambda_aug * (aug1 + aug2)
                out.update(aug1_d=d_aug.item(), aug1=aug1.item(), aug2=aug2.item())
        groups = STEP_GROUPS[3] if use_aug else ["enc_a"]
        if cfg.lambda_gan2 > 0 or use_aug:
            self._update(groups, total, "step 3 (encoders)")
        out["align_adv"] = total.item()
        return out

    def sal_train_step(self, batch: Batch, record_digests: bool = False) -> dict:
        """One iteration of the variant's steps; optionally records parameter digests around each step."""
        cfg = self.cfg
        losses: dict = {}
        digests = [self.model.digests()] if record_digests else None

        def after(step):
            if record_digests:
                digests.append(self.model.digests())

        if 1 in cfg.steps:
            losses.update(self.step_embed(batch))
            after(1)
        if 2 in cfg.steps or 3 in cfg.steps:
            feats = self.middle_features(batch, cfg.unseen_count)
            if 2 in cfg.steps:
                losses.update(self.step_synthesis(feats))
                after(2)
            if 3 in cfg.steps:
                losses.update(self.step_alignment(feats))
                after(3)
        self.iteration += 1
        if self.log_steps:
            self.step_log.append({"iteration": self.iteration, "epoch": self.epoch, **losses})
        if record_digests:
            steps = [s for s in (1, 2, 3) if s in cfg.steps]
            losses["changed"] = {s: {g for g in GROUPS if digests[i][g] != digests[i + 1][g]}
                                 for i, s in enumerate(steps)}
        return losses

    # ------------------------------------------------------------------
    # epochs
    # ------------------------------------------------------------------

    def run_epoch(self, step: Callable[[Batch], dict]) -> dict[str, float]:
        sums: dict[str, float] = {}
        count = 0
        for batch in self.batches():
            for k, v in step(batch).items():
                if isinstance(v, float):
                    sums[k] = sums.get(k, 0.0) + v
            count += 1
        self.epoch += 1
        return {k: v / max(count, 1) for k, v in sums.items()}

    def evaluate(self, ds: Dataset, visuals=None, **meta) -> MetricsReport:
        return evaluate_model(self.model, ds, visuals=visuals, seed=self.cfg.seed, variant=self.cfg.variant, **meta)

    def pretrain_embed(self, probe: Dataset | None = None) -> list[dict]:
        """Step 1 only until the held-in probe mAP stops improving for ``pretrain_patience`` epochs.

        The best-scoring parameters are restored at the end.
        """
        probe = probe or self.train_ds
        x_probe = self.x_train if probe is self.train_ds else None
        best, best_state, stale, history = -1.0, None, 0, []
        for ep in range(self.cfg.pretrain_max_epochs):
            losses = self.run_epoch(self.step_embed)
            rep = self.evaluate(probe, visuals=x_probe)
            history.append({"phase": "pretrain", "epoch": ep, "losses": losses, "train_mAP": rep.mAP})
            if rep.mAP > best:
                best, stale = rep.mAP, 0
                best_state = _clone_state(self.model.state_dict())
            else:
                stale += 1
                if stale >= self.cfg.pretrain_patience:
                    break
        if best_state is not None:
            self.model.load_state_dict(best_state)
        self.epoch = 0
        return history

    # ------------------------------------------------------------------
    # checkpoints
    # ------------------------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT,
            "epoch": self.epoch,
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "model_config": self.model_cfg.to_dict(),
            "params": self.model.grouped_state(),
            "optimizers": {g: o.state_dict() for g, o in self.optimizers.items()},
            "rng": {
                "batch": self.batch_rng.bit_generator.state,
                "unseen": self.unseen_rng.bit_generator.state,
                "noise": self.noise_gen.get_state(),
            },
        }

    def restore(self, ckpt: dict, optimizers: bool = True, rng: bool = True) -> None:
        if ckpt.get("format_version") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {ckpt.get('format_version')!r}")
        self.model.load_grouped_state(ckpt["params"])
        if optimizers:
            for g, o in self.optimizers.items():
                o.load_state_dict(ckpt["optimizers"][g])
        if rng:
            self.batch_rng.bit_generator.state = ckpt["rng"]["batch"]
            self.unseen_rng.bit_generator.state = ckpt["rng"]["unseen"]
            self.noise_gen.set_state(ckpt["rng"]["noise"])
            self.epoch = ckpt["epoch"]
            self.iteration = ckpt["iteration"]


def _clone_state(state: dict) -> dict:
    return {k: v.clone() for k, v in state.items()}


@contextlib.contextmanager
def _no_param_grad(module: nn.Module):
    """Let gradients flow through ``module`` to its inputs without touching its parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def save_checkpoint(ckpt: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(ckpt: dict) -> SALModel:
    mcfg = ModelConfig(**ckpt["model_config"])
    model = SALModel(mcfg).to(getattr(torch, ckpt["config"]["dtype"]))
    model.load_grouped_state(ckpt["params"])
    return model


# --------------------------------------------------------------------------
# full runs
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    checkpoint: dict
    reports: list[MetricsReport]
    log: list[dict] = field(default_factory=list)
    pretrain_report: MetricsReport | None = None

    @property
    def final(self) -> MetricsReport:
        return self.reports[-1]


def _epoch_record(cfg: TrainConfig, epoch: int, losses: dict, rep: MetricsReport, **extra) -> dict:
    return {"variant": cfg.variant, "epoch": epoch, "seed": cfg.seed, "losses": losses, "mAP": rep.mAP,
            "cmc1": rep.cmc[1], "cmc5": rep.cmc[5], "cmc10": rep.cmc[10], **extra}


def _prepare(cfg: TrainConfig, train_ds: Dataset, eval_ds: Dataset, pretrained: dict | None):
    trainer = Trainer(cfg, train_ds)
    x_eval = visual_matrix(eval_ds, trainer.model_cfg.backbone)
    log: list[dict] = []
    if pretrained is None:
        log.extend(trainer.pretrain_embed())
    else:
        trainer.restore(pretrained, optimizers=True, rng=True)
        trainer.epoch = 0
    pre = trainer.evaluate(eval_ds, visuals=x_eval, extra={"phase": "pretrain"})
    return trainer, x_eval, log, pre


def pretrain(cfg: TrainConfig, train_ds: Dataset) -> dict:
    """Checkpoint of the converged ``embed`` baseline; shareable across variants with the same seed."""
    trainer = Trainer(cfg, train_ds)
    trainer.pretrain_embed()
    return trainer.checkpoint()


def train(cfg: TrainConfig, train_ds: Dataset, eval_ds: Dataset, pretrained: dict | None = None,
          step_callback: Callable | None = None) -> RunResult:
    """Pretrain (or reuse ``pretrained``), then run the variant's loop for ``cfg.epochs`` epochs."""
    if cfg.variant == "sal-stagewise":
        return stage_wise_train(cfg, train_ds, eval_ds, pretrained)
    trainer, x_eval, log, pre = _prepare(cfg, train_ds, eval_ds, pretrained)
    reports = []
    step = trainer.sal_train_step if step_callback is None else (lambda b: step_callback(trainer, b))
    for ep in range(cfg.epochs):
        losses = trainer.run_epoch(step)
        if (ep + 1) % cfg.eval_every == 0 or ep == cfg.epochs - 1:
            rep = trainer.evaluate(eval_ds, visuals=x_eval)
            reports.append(rep)
            log.append(_epoch_record(cfg, ep, losses, rep, phase="main"))
    if not reports:
        reports.append(pre)
    ck = trainer.checkpoint()
    ck["unseen_collisions"] = trainer.collisions
    return RunResult(ck, reports, log, pre)


def stage_wise_train(cfg: TrainConfig, train_ds: Dataset, eval_ds: Dataset,
                     pretrained: dict | None = None) -> RunResult:
    """Synthesis GAN alone for ``epochs`` epochs, then Steps 1 and 3 with the generators frozen.

    Each parameter group receives as many updates as in the interleaved run.
    """
    trainer, x_eval, log, pre = _prepare(cfg, train_ds, eval_ds, pretrained)
    n_unseen = cfg.unseen_count

    def synth_only(batch):
        return trainer.step_synthesis(trainer.middle_features(batch, n_unseen))

    def align_only(batch):
        losses = trainer.step_embed(batch)
        losses.update(trainer.step_alignment(trainer.middle_features(batch, n_unseen)))
        return losses

    reports = []
    for phase, fn in (("synthesis", synth_only), ("alignment", align_only)):
        for ep in range(cfg.epochs):
            losses = trainer.run_epoch(fn)
            if phase == "alignment" and ((ep + 1) % cfg.eval_every == 0 or ep == cfg.epochs - 1):
                rep = trainer.evaluate(eval_ds, visuals=x_eval)
                reports.append(rep)
                log.append(_epoch_record(cfg, ep, losses, rep, phase=phase))
            elif phase == "synthesis":
                log.append({"variant": cfg.variant, "epoch": ep, "seed": cfg.seed, "phase": phase,
                            "losses": losses})
    if not reports:
        reports.append(pre)
    ck = trainer.checkpoint()
    ck["unseen_collisions"] = trainer.collisions
    return RunResult(ck, reports, log, pre)


def write_jsonl(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
