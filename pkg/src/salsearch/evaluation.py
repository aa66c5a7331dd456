"""Attribute-query retrieval protocol, CMC / mAP, and ablation tables."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CMC_RANKS = (1, 5, 10)


@dataclass
class Ranking:
    query_id: int
    order: np.ndarray      # gallery indices, most similar first
    relevant: np.ndarray   # bool, aligned with ``order``


@dataclass
class MetricsReport:
    mAP: float
    cmc: dict[int, float]
    num_queries: int
    num_gallery: int
    seed: int | None = None
    variant: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["cmc"] = {int(k): v for k, v in d["cmc"].items()}
        return cls(**d)


def cosine_similarity(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """(Q, G) cosine similarities; pairs involving a zero-norm vector score -1."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    zero_q, zero_g = qn == 0, gn == 0
    if zero_q.any() or zero_g.any():
        logger.warning("%d query / %d gallery embeddings have zero norm; scoring them -1",
                       zero_q.sum(), zero_g.sum())
    sim = (q / np.where(zero_q, 1, qn)[:, None]) @ (g / np.where(zero_g, 1, gn)[:, None]).T
    sim[zero_q, :] = -1.0
    sim[:, zero_g] = -1.0
    return sim


def rank_gallery(sim: np.ndarray, query_cats: Sequence[int], gallery_cats: Sequence[int]) -> list[Ranking]:
    """Descending-similarity rankings; equal scores keep ascending gallery order."""
    gallery_cats = np.asarray(gallery_cats)
    out = []
    for qi, row in enumerate(np.atleast_2d(sim)):
        order = np.argsort(-row, kind="stable")
        out.append(Ranking(qi, order, gallery_cats[order] == query_cats[qi]))
    return out


def retrieve(query_embedding: np.ndarray, gallery_embeddings: np.ndarray) -> np.ndarray:
    """Gallery indices for one query embedding, most cosine-similar first."""
    sim = cosine_similarity(np.atleast_2d(query_embedding), gallery_embeddings)[0]
    return np.argsort(-sim, kind="stable")


def _valid(rankings: Iterable[Ranking]) -> list[Ranking]:
    rankings = list(rankings)
    valid = [r for r in rankings if r.relevant.any()]
    if len(valid) < len(rankings):
        logger.warning("excluded %d queries with no relevant gallery item", len(rankings) - len(valid))
    if not valid:
        raise ValueError("no query has a relevant gallery item")
    return valid


def cmc(rankings: Iterable[Ranking], k: int) -> float:
    """Fraction of queries whose first relevant item sits at rank <= k."""
    valid = _valid(rankings)
    hits = [int(np.argmax(r.relevant)) < k for r in valid]
    return float(np.mean(hits))


def average_precision(relevant: np.ndarray) -> float:
    """Mean of precision@i over the positions i of relevant items (no interpolation)."""
    relevant = np.asarray(relevant, dtype=bool)
    pos = np.flatnonzero(relevant)
    if pos.size == 0:
        raise ValueError("no relevant items")
    return float(np.mean(np.arange(1, pos.size + 1) / (pos + 1)))


def interpolated_average_precision(relevant: np.ndarray) -> float:
    """AP with precision replaced by its running maximum from the right."""
    relevant = np.asarray(relevant, dtype=bool)
    pos = np.flatnonzero(relevant)
    if pos.size == 0:
        raise ValueError("no relevant items")
    prec = np.cumsum(relevant) / np.arange(1, relevant.size + 1)
    interp = np.maximum.accumulate(prec[::-1])[::-1]
    return float(interp[pos].mean())


def mean_average_precision(rankings: Iterable[Ranking], interpolated: bool = False) -> float:
    ap = interpolated_average_precision if interpolated else average_precision
    return float(np.mean([ap(r.relevant) for r in _valid(rankings)]))


def metrics_from_rankings(rankings: Sequence[Ranking], num_gallery: int, ranks=CMC_RANKS,
                          interpolated: bool = False, **meta) -> MetricsReport:
    valid = _valid(rankings)
    return MetricsReport(
        mAP=mean_average_precision(valid, interpolated),
        cmc={k: cmc(valid, k) for k in ranks},
        num_queries=len(valid),
        num_gallery=num_gallery,
        **meta,
    )


def random_ranking_map(gallery_cats: np.ndarray, query_cats: Sequence[int], trials: int = 200,
                       seed: int = 0) -> float:
    """Expected mAP of uniformly random gallery orderings (permutation baseline)."""
    rng = np.random.default_rng(seed)
    gallery_cats = np.asarray(gallery_cats)
    vals = []
    for _ in range(trials):
        vals.append(np.mean([average_precision(gallery_cats[rng.permutation(len(gallery_cats))] == q)
                             for q in query_cats]))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# ablation reporting
# --------------------------------------------------------------------------

def ablation_report(results: Mapping[str, Sequence[MetricsReport]], variants: Sequence[str] | None = None,
                    ranks=CMC_RANKS) -> tuple[list[dict], str]:
    """Per-variant mean/std of mAP and CMC across seeds.

    Returns the structured rows and an aligned text table (percent units).
    """
    variants = list(variants or results)
    missing = [v for v in variants if not results.get(v)]
    if missing:
        raise KeyError(f"no completed runs for variant(s): {', '.join(missing)}")
    rows = []
    for v in variants:
        reps = results[v]
        row = {"variant": v, "seeds": [r.seed for r in reps]}
        cols = {"mAP": [r.mAP for r in reps]}
        cols.update({f"rank{k}": [r.cmc[k] for r in reps] for k in ranks})
        for name, vals in cols.items():
            row[name] = float(np.mean(vals))
            row[f"{name}_std"] = float(np.std(vals))
            row[f"{name}_all"] = [float(x) for x in vals]
        rows.append(row)

    names = ["mAP"] + [f"rank{k}" for k in ranks]
    width = max(len("Variant"), *(len(v) for v in variants)) + 2
    lines = ["Metric (%)".ljust(width) + "".join(n.rjust(16) for n in names)]
    lines.append("-" * len(lines[0]))
    for row in rows:
        cells = "".join(f"{100 * row[n]:7.1f} ± {100 * row[n + '_std']:5.1f}".rjust(16) for n in names)
        lines.append(row["variant"].ljust(width) + cells)
    lines.append(f"(mean ± std over {max(len(r['seeds']) for r in rows)} seed(s))")
    return rows, "\n".join(lines)


# --------------------------------------------------------------------------
# model-level protocol
# --------------------------------------------------------------------------

def evaluate_embeddings(query_emb: np.ndarray, query_cats, gallery_emb: np.ndarray, gallery_cats,
                        interpolated: bool = False, **meta) -> MetricsReport:
    sim = cosine_similarity(query_emb, gallery_emb)
    rankings = rank_gallery(sim, np.asarray(query_cats), gallery_cats)
    return metrics_from_rankings(rankings, len(gallery_emb), interpolated=interpolated, **meta)


def evaluate_model(model, ds, visuals: np.ndarray | None = None, interpolated: bool = False,
                   **meta) -> MetricsReport:
    """One attribute query per category of ``ds``; the gallery is every image of ``ds``."""
    from .model import visual_matrix

    if visuals is None:
        visuals = visual_matrix(ds, model.cfg.backbone)
    gallery = model.embed_visual(visuals)
    queries = model.embed_attributes(ds.category_attrs())
    return evaluate_embeddings(queries, np.arange(ds.num_categories), gallery, ds.categories,
                               interpolated=interpolated, **meta)
