"""Multi-seed ablation ladders on the synthetic benchmark."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from .dataset import SynthBenchConfig, generate_synth_benchmark
from .evaluation import MetricsReport, ablation_report
from .trainer import TrainConfig, pretrain, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    """A named ablation row: a trainer variant plus config overrides."""

    name: str
    variant: str
    overrides: tuple = ()

    def config(self, base: TrainConfig) -> TrainConfig:
        return base.replace(variant=self.variant, **dict(self.overrides))


ARMS = {
    "embed": Arm("embed", "embed"),
    "embed+adv": Arm("embed+adv", "embed+adv"),
    "embed+symb-adv": Arm("embed+symb-adv", "embed+symb-adv"),
    "sal": Arm("sal", "sal"),
    "sal-no-aug": Arm("sal-no-aug", "sal", (("lambda_aug", 0.0),)),
    "sal-no-consis": Arm("sal-no-consis", "sal", (("lambda_consis", 0.0),)),
    "sal-stagewise": Arm("sal-stagewise", "sal-stagewise"),
}

# embedding-only up to the full model; interaction-loss removals; training schedule
LADDER = ("embed", "embed+adv", "embed+symb-adv", "sal")
INTERACTION = ("sal-no-aug", "sal-no-consis", "sal")
SCHEDULE = ("sal-stagewise", "sal")


def resolve_arms(names: Iterable[str]) -> list[Arm]:
    out = []
    for n in names:
        if n not in ARMS:
            raise KeyError(f"unknown ablation arm {n!r}; choose from {', '.join(ARMS)}")
        out.append(ARMS[n])
    return out


def run_study(arm_names: Sequence[str], seeds: Sequence[int], base: TrainConfig,
              bench: SynthBenchConfig | None = None, datasets=None) -> dict[str, list[MetricsReport]]:
    """Final-epoch eval report of every arm for every seed.

    Per seed the benchmark (unless ``datasets`` is given) and the pretrained
    ``embed`` checkpoint are shared by all arms, so arms differ only in what
    happens after pretraining.
    """
    arms = resolve_arms(arm_names)
    results: dict[str, list[MetricsReport]] = {a.name: [] for a in arms}
    for seed in seeds:
        if datasets is None:
            bcfg = SynthBenchConfig.from_dict({**(bench or SynthBenchConfig()).to_dict(), "seed": seed})
            train_ds, eval_ds = generate_synth_benchmark(bcfg)
        else:
            train_ds, eval_ds = datasets
        cfg = base.replace(seed=seed)
        pre = pretrain(cfg, train_ds)
        for arm in arms:
            rep = train(arm.config(cfg), train_ds, eval_ds, pretrained=pre).final
            rep.variant = arm.name
            results[arm.name].append(rep)
            logger.info("seed %d %-15s mAP %.4f", seed, arm.name, rep.mAP)
    return results


def wins(results: dict[str, list[MetricsReport]], better: str, worse: str, margin: float = 0.0) -> int:
    """Number of seeds where ``better`` beats ``worse`` on mAP by at least ``margin``."""
    return sum(b.mAP - w.mAP >= margin for b, w in zip(results[better], results[worse]))


def report(results: dict[str, list[MetricsReport]]) -> str:
    return ablation_report(results)[1]
