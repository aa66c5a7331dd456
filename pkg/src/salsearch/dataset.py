"""Pedestrian attribute data model, manifest I/O, protocol splits and samplers.

A manifest is a tab-separated text file::

    #schema: hat:binary, age:exclusive(young|adult|old)
    #features: feats.npy            (optional; precomputed-feature mode)
    visual  hat  age=young  age=adult  age=old
    img/0001.jpg  1  0  1  0
    feat:3        0  1  0  0

Every ``#`` line before the column header is a directive.  The column header
names ``visual`` followed by one column per attribute entry; exclusive groups
expand to ``group=value`` one-hot columns.  A ``visual`` cell is either an
image path or ``feat:<row>`` pointing into the ``.npy`` array declared by the
``#features`` directive (path relative to the manifest).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_PREFIX = "feat:"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


# --------------------------------------------------------------------------
# schema
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Binary:
    name: str

    @property
    def width(self) -> int:
        return 1

    def columns(self) -> list[str]:
        return [self.name]


@dataclass(frozen=True)
class Exclusive:
    name: str
    value_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.value_names) < 2:
            raise ValueError(f"exclusive group {self.name!r} needs at least 2 values")
        if len(set(self.value_names)) != len(self.value_names):
            raise ValueError(f"exclusive group {self.name!r} has duplicate value names")

    @property
    def width(self) -> int:
        return len(self.value_names)

    def columns(self) -> list[str]:
        return [f"{self.name}={v}" for v in self.value_names]


Group = Union[Binary, Exclusive]


@dataclass(frozen=True)
class AttributeSchema:
    groups: tuple[Group, ...]

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValueError("group names must be unique")
        if not self.groups:
            raise ValueError("schema needs at least one group")

    @property
    def total_dim(self) -> int:
        return sum(g.width for g in self.groups)

    def slices(self) -> list[tuple[Group, slice]]:
        out, start = [], 0
        for g in self.groups:
            out.append((g, slice(start, start + g.width)))
            start += g.width
        return out

    def columns(self) -> list[str]:
        return [c for g in self.groups for c in g.columns()]

    def validate(self, attrs: np.ndarray, row: int | None = None) -> None:
        """Raise ManifestError unless ``attrs`` (1-D or 2-D) is a valid attribute vector batch."""
        attrs = np.atleast_2d(attrs)
        where = "" if row is None else f" (row {row})"
        if attrs.shape[1] != self.total_dim:
            raise ManifestError(f"attribute length {attrs.shape[1]} != schema dim {self.total_dim}{where}")
        if not np.isin(attrs, (0, 1)).all():
            raise ManifestError(f"attribute values must be 0/1{where}")
        for g, sl in self.slices():
            if isinstance(g, Exclusive):
                bad = np.flatnonzero(attrs[:, sl].sum(axis=1) != 1)
                if bad.size:
                    r = bad[0] if row is None else row
                    raise ManifestError(f"exclusivity violated in group {g.name!r} at row {r}")

    def header(self) -> str:
        parts = []
        for g in self.groups:
            if isinstance(g, Binary):
                parts.append(f"{g.name}:binary")
            else:
                parts.append(f"{g.name}:exclusive({'|'.join(g.value_names)})")
        return ", ".join(parts)

    @classmethod
    def parse(cls, text: str) -> "AttributeSchema":
        groups: list[Group] = []
        for item in (s.strip() for s in text.split(",")):
            if not item:
                continue
            name, sep, kind = item.partition(":")
            name, kind = name.strip(), kind.strip()
            if not sep or not name:
                raise ManifestError(f"bad schema entry {item!r}")
            if kind == "binary":
                groups.append(Binary(name))
            elif kind.startswith("exclusive(") and kind.endswith(")"):
                values = tuple(v.strip() for v in kind[len("exclusive("):-1].split("|"))
                try:
                    groups.append(Exclusive(name, values))
                except ValueError as e:
                    raise ManifestError(str(e)) from None
            else:
                raise ManifestError(f"unknown group type {kind!r} for {name!r}")
        try:
            return cls(tuple(groups))
        except ValueError as e:
            raise ManifestError(str(e)) from None

    @classmethod
    def from_spec(cls, spec: dict) -> "AttributeSchema":
        """Build from ``{"binary": k, "exclusive": [w1, w2, ...]}`` with generated names."""
        groups: list[Group] = [Binary(f"b{i}") for i in range(spec.get("binary", 0))]
        for j, w in enumerate(spec.get("exclusive", [])):
            groups.append(Exclusive(f"e{j}", tuple(f"v{i}" for i in range(w))))
        return cls(tuple(groups))


def binary_schema(m: int) -> AttributeSchema:
    return AttributeSchema(tuple(Binary(f"a{i}") for i in range(m)))


# --------------------------------------------------------------------------
# samples and datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    """Samples sharing one schema; ``categories`` are dense ids in ``[0, num_categories)``.

    ``visuals`` holds either image references (list of str) or a 2-D float
    array of precomputed raw features, row-aligned with ``attrs``.
    """

    schema: AttributeSchema
    attrs: np.ndarray
    categories: np.ndarray
    visuals: Union[np.ndarray, list]
    num_categories: int = field(default=-1)

    def __post_init__(self):
        self.attrs = np.asarray(self.attrs, dtype=np.int8)
        self.categories = np.asarray(self.categories, dtype=np.int64)
        if self.num_categories < 0:
            self.num_categories = int(self.categories.max()) + 1 if len(self.categories) else 0
        if len(self.attrs) != len(self.categories) or len(self.attrs) != len(self.visuals):
            raise ValueError("attrs, categories and visuals must be row-aligned")
        self.schema.validate(self.attrs)
        present = np.unique(self.categories)
        if len(present) != self.num_categories or (len(present) and present[-1] != self.num_categories - 1):
            raise ValueError("every category id in [0, M) must appear at least once")

    def __len__(self) -> int:
        return len(self.attrs)

    @property
    def has_features(self) -> bool:
        return isinstance(self.visuals, np.ndarray)

    def category_attrs(self) -> np.ndarray:
        """(M, m) attribute vector of each category."""
        out = np.zeros((self.num_categories, self.schema.total_dim), dtype=np.int8)
        out[self.categories] = self.attrs
        return out

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        vis = self.visuals[idx] if self.has_features else [self.visuals[i] for i in idx]
        return derive_categories(self.schema, self.attrs[idx], vis)


def derive_categories(schema: AttributeSchema, attrs, visuals=None) -> Dataset:
    """Group identical attribute vectors into categories numbered by first occurrence."""
    attrs = np.asarray(attrs, dtype=np.int8)
    if attrs.ndim != 2 or len(attrs) == 0:
        raise ValueError("derive_categories needs a non-empty (N, m) attribute array")
    ids: dict[bytes, int] = {}
    cats = np.empty(len(attrs), dtype=np.int64)
    for i, row in enumerate(attrs):
        cats[i] = ids.setdefault(row.tobytes(), len(ids))
    if visuals is None:
        visuals = [""] * len(attrs)
    return Dataset(schema, attrs, cats, visuals, len(ids))


def split_by_category(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint category split; every sample of a category lands on one side."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if ds.num_categories < 2:
        raise ValueError("need at least 2 categories to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.num_categories)
    n_train = min(max(1, round(train_fraction * ds.num_categories)), ds.num_categories - 1)
    train_cats = np.zeros(ds.num_categories, dtype=bool)
    train_cats[perm[:n_train]] = True
    mask = train_cats[ds.categories]
    return ds.subset(np.flatnonzero(mask)), ds.subset(np.flatnonzero(~mask))


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def load_manifest(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    directives: dict[str, str] = {}
    pos = 0
    while pos < len(lines) and lines[pos].startswith("#"):
        key, _, value = lines[pos][1:].partition(":")
        directives[key.strip()] = value.strip()
        pos += 1
    if "schema" not in directives:
        raise ManifestError(f"{path}: missing '#schema:' header")
    schema = AttributeSchema.parse(directives["schema"])
    if pos >= len(lines):
        raise ManifestError(f"{path}: missing column header")
    header = lines[pos].split("\t")
    if header[0] != "visual" or header[1:] != schema.columns():
        raise ManifestError(f"{path}: column header does not match schema {schema.columns()}")
    pos += 1

    feats = None
    if "features" in directives:
        fpath = path.parent / directives["features"]
        if not fpath.exists():
            raise FileNotFoundError(f"feature file {fpath} not found")
        feats = np.load(fpath, allow_pickle=False)
        if feats.ndim != 2:
            raise ManifestError(f"{fpath}: feature array must be 2-D")

    m = schema.total_dim
    visuals, rows = [], []
    for r, line in enumerate(l for l in lines[pos:] if l.strip()):
        cells = line.split("\t")
        if len(cells) != m + 1:
            raise ManifestError(f"row {r}: expected {m + 1} columns, got {len(cells)}")
        try:
            vals = np.array([int(c) for c in cells[1:]], dtype=np.int8)
        except ValueError:
            raise ManifestError(f"row {r}: attribute cells must be integers") from None
        schema.validate(vals, row=r)
        rows.append(vals)
        visuals.append(cells[0])
    if not rows:
        raise ManifestError(f"{path}: no samples")
    attrs = np.stack(rows)

    if feats is not None:
        idx = []
        for r, v in enumerate(visuals):
            if not v.startswith(FEATURE_PREFIX):
                raise ManifestError(f"row {r}: expected '{FEATURE_PREFIX}<index>' visual in feature mode")
            k = int(v[len(FEATURE_PREFIX):])
            if not 0 <= k < len(feats):
                raise ManifestError(f"row {r}: feature index {k} out of range")
            idx.append(k)
        visuals = feats[np.asarray(idx)]
    return derive_categories(schema, attrs, visuals)


def save_manifest(ds: Dataset, path, features_name: str | None = None) -> None:
    """Write ``ds`` as a manifest; precomputed features go to a sibling ``.npy`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"#schema: {ds.schema.header()}", f"#version: {MANIFEST_VERSION}"]
    if ds.has_features:
        features_name = features_name or path.with_suffix(".npy").name
        np.save(path.parent / features_name, np.ascontiguousarray(ds.visuals), allow_pickle=False)
        lines.append(f"#features: {features_name}")
        vis = [f"{FEATURE_PREFIX}{i}" for i in range(len(ds))]
    else:
        vis = list(ds.visuals)
    lines.append("\t".join(["visual"] + ds.schema.columns()))
    for v, a in zip(vis, ds.attrs):
        lines.append("\t".join([v] + [str(int(x)) for x in a]))
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# attribute statistics and the unseen-combination sampler
# --------------------------------------------------------------------------

@dataclass
class AttributeStats:
    """Per-group marginals: a float for binary groups, a probability vector for exclusive ones."""

    schema: AttributeSchema
    probs: list

    def __post_init__(self):
        for g, p in zip(self.schema.groups, self.probs):
            if isinstance(g, Exclusive):
                p = np.asarray(p, dtype=float)
                if p.shape != (g.width,) or abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
                    raise ValueError(f"bad probability vector for group {g.name!r}")
            elif not 0.0 <= float(p) <= 1.0:
                raise ValueError(f"bad frequency for group {g.name!r}")

    def expected_vector(self) -> np.ndarray:
        """Expected value of every attribute entry (length m)."""
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in self.probs])


def estimate_attribute_stats(train: Dataset) -> AttributeStats:
    if len(train) == 0:
        raise ValueError("empty training set")
    probs = []
    for g, sl in train.schema.slices():
        block = train.attrs[:, sl].astype(float)
        if isinstance(g, Binary):
            probs.append(float(block.mean()))
        else:
            counts = block.sum(axis=0)
            probs.append(counts / counts.sum())
    return AttributeStats(train.schema, probs)


def sample_unseen_attributes(schema: AttributeSchema, stats: AttributeStats, count: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` attribute vectors: Bernoulli per binary group, one-trial multinomial per exclusive group."""
    if stats.schema != schema:
        raise ValueError("stats were estimated for a different schema")
    out = np.zeros((count, schema.total_dim), dtype=np.int8)
    for (g, sl), p in zip(schema.slices(), stats.probs):
        if isinstance(g, Binary):
            out[:, sl.start] = rng.random(count) < p
        else:
            out[np.arange(count), sl.start + rng.choice(g.width, size=count, p=p)] = 1
    return out


# --------------------------------------------------------------------------
# synthetic benchmark
# --------------------------------------------------------------------------

@dataclass
class SynthBenchConfig:
    num_seen_categories: int = 50
    num_unseen_categories: int = 20
    samples_per_category_range: tuple[int, int] = (8, 12)
    schema_spec: dict = field(default_factory=lambda: {"binary": 6, "exclusive": [3, 3]})
    raw_dim: int = 32
    intra_class_noise_scale: float = 0.3
    inter_class_similarity: float = 0.3
    category_offset_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.samples_per_category_range = tuple(self.samples_per_category_range)
        lo, hi = self.samples_per_category_range
        if min(self.num_seen_categories, self.num_unseen_categories, lo, self.raw_dim) <= 0 or hi < lo:
            raise ValueError("counts must be positive and the sample range ordered")
        if self.intra_class_noise_scale < 0 or self.category_offset_scale < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0 <= self.inter_class_similarity < 1:
            raise ValueError("inter_class_similarity must lie in [0, 1)")

    @property
    def schema(self) -> AttributeSchema:
        return AttributeSchema.from_spec(self.schema_spec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_category_range"] = list(self.samples_per_category_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthBenchConfig":
        return cls(**d)


def _schema_capacity(schema: AttributeSchema) -> int:
    cap = 1
    for g in schema.groups:
        cap *= 2 if isinstance(g, Binary) else g.width
    return cap


def generating_stats(cfg: SynthBenchConfig) -> AttributeStats:
    """Attribute marginals the benchmark draws its category combinations from."""
    rng = np.random.default_rng([cfg.seed, 0])
    probs = []
    for g in cfg.schema.groups:
        probs.append(rng.uniform(0.2, 0.8) if isinstance(g, Binary) else rng.dirichlet(np.full(g.width, 2.0)))
    return AttributeStats(cfg.schema, probs)


def generate_synth_benchmark(cfg: SynthBenchConfig) -> tuple[Dataset, Dataset]:
    """Seen/unseen category benchmark whose raw visuals are a noisy function of the attributes.

    Category prototypes are ``tanh(W a / sqrt(m) + offset_c)`` with a fixed
    random ``W`` and a per-category offset whose pairwise correlation equals
    ``inter_class_similarity``; samples add isotropic Gaussian noise.
    """
    schema = cfg.schema
    m = schema.total_dim
    n_cat = cfg.num_seen_categories + cfg.num_unseen_categories
    if n_cat > _schema_capacity(schema):
        raise ValueError(f"{n_cat} categories requested but schema only has "
                         f"{_schema_capacity(schema)} attribute combinations")
    rng = np.random.default_rng([cfg.seed, 1])
    gen_stats = generating_stats(cfg)

    combos, seen = [], set()
    while len(combos) < n_cat:
        a = sample_unseen_attributes(schema, gen_stats, 1, rng)[0]
        if a.tobytes() not in seen:
            seen.add(a.tobytes())
            combos.append(a)
    combos = np.stack(combos)

    W = rng.standard_normal((m, cfg.raw_dim)) * 2.0
    shared = rng.standard_normal(cfg.raw_dim)
    rho = cfg.inter_class_similarity
    own = rng.standard_normal((n_cat, cfg.raw_dim))
    offsets = cfg.category_offset_scale * (np.sqrt(rho) * shared + np.sqrt(1 - rho) * own)
    protos = np.tanh(combos @ W / np.sqrt(m) + offsets)

    lo, hi = cfg.samples_per_category_range
    counts = rng.integers(lo, hi + 1, size=n_cat)
    cat_of = np.repeat(np.arange(n_cat), counts)
    noise = rng.standard_normal((len(cat_of), cfg.raw_dim)) * cfg.intra_class_noise_scale
    visuals = protos[cat_of] + noise
    attrs = combos[cat_of]

    is_train = cat_of < cfg.num_seen_categories
    train = derive_categories(schema, attrs[is_train], visuals[is_train])
    test = derive_categories(schema, attrs[~is_train], visuals[~is_train])
    return train, test


def write_synth_benchmark(cfg: SynthBenchConfig, out_dir) -> tuple[Path, Path]:
    """Emit ``train.tsv`` / ``eval.tsv`` manifests plus a ``bench_config.json`` echo."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate_synth_benchmark(cfg)
    save_manifest(train, out_dir / "train.tsv")
    save_manifest(test, out_dir / "eval.tsv")
    (out_dir / "bench_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out_dir / "train.tsv", out_dir / "eval.tsv"
