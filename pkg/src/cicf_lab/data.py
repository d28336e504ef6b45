"""Multi-domain datasets: a confounded synthetic generator, CSV I/O and
leave-one-domain-out splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import Batch


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = "train"


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    class_count: int
    domain_count: int
    sample_ids: np.ndarray = None
    norm: NormStats | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
        n = self.labels.size
        if n == 0 or self.features.size == 0:
            raise DataError("dataset is empty")
        if self.features.shape[0] != n or self.domains.size != n:
            raise DataError("features, labels and domains disagree in length")
        if self.sample_ids is None:
            self.sample_ids = np.arange(n)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64).reshape(-1)
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if self.domains.min() < 0 or self.domains.max() >= self.domain_count:
            raise DataError(f"domains must lie in [0, {self.domain_count})")

    def __len__(self):
        return self.labels.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "DomainDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            domains=self.domains[rows],
            sample_ids=self.sample_ids[rows],
        )

    def batch(self, rows=None) -> Batch:
        """Rows as a model Batch; indices are row positions in this dataset."""
        if rows is None:
            rows = np.arange(len(self))
        rows = np.asarray(rows, dtype=np.int64)
        return Batch(self.features[rows], self.labels[rows], rows)

    def present_domains(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.domains))


@dataclass(frozen=True)
class DomainSpec:
    rho: float
    samples_per_class: int


@dataclass(frozen=True)
class SyntheticDomainSpec:
    class_count: int = 2
    causal_dims: int = 2
    confounder_dims: int = 3
    domains: tuple[DomainSpec, ...] = field(default_factory=tuple)
    causal_separation: float = 2.0
    noise_std: float = 1.0
    confounder_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        doms = tuple(d if isinstance(d, DomainSpec) else DomainSpec(*d) if not isinstance(d, dict)
                     else DomainSpec(**d) for d in self.domains)
        object.__setattr__(self, "domains", doms)
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2")
        if self.causal_dims < 1:
            raise ConfigError("causal_dims must be at least 1")
        if self.confounder_dims < 0:
            raise ConfigError("confounder_dims must be non-negative")
        if len(doms) < 2:
            raise ConfigError("at least 2 domains are required")
        for d in doms:
            if not -1.0 <= d.rho <= 1.0:
                raise ConfigError(f"confounder correlation must be in [-1, 1], got {d.rho}")
            if d.samples_per_class < 1:
                raise ConfigError("samples_per_class must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


def _class_means(spec: SyntheticDomainSpec, rng) -> np.ndarray:
    k, d, sep = spec.class_count, spec.causal_dims, spec.causal_separation
    if k == 2:
        u = np.ones(d) / np.sqrt(d)
        return np.stack([-0.5 * sep * u, 0.5 * sep * u])
    if d >= k:
        means = np.zeros((k, d))
        means[np.arange(k), np.arange(k)] = sep / np.sqrt(2.0)
        return means
    dirs = rng.standard_normal((k, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * sep / np.sqrt(2.0)


def _confounder_prototypes(spec: SyntheticDomainSpec, rng) -> np.ndarray:
    k, d = spec.class_count, spec.confounder_dims
    if k == 2:
        return np.stack([-np.ones(d), np.ones(d)])
    return rng.choice([-1.0, 1.0], size=(k, d))


def _confounder_classes(labels, rho, k, rng):
    """Class whose prototype drives each sample's confounder channel.

    With probability |rho| the channel follows the label (rho > 0) or a
    uniformly chosen other class (rho < 0); otherwise a uniformly random
    class. For two classes this makes the sign agree with the label with
    probability (1 + rho) / 2, and rho = 0 makes the channel independent of
    the label for any class count.
    """
    n = labels.size
    tied = rng.random(n) < abs(rho)
    free = rng.integers(0, k, size=n)
    if rho >= 0:
        driven = labels
    else:
        driven = (labels + rng.integers(1, k, size=n)) % k
    return np.where(tied, driven, free)


def generate(spec: SyntheticDomainSpec) -> DomainDataset:
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    protos = _confounder_prototypes(spec, rng)
    feats, labels, domains = [], [], []
    for dom_id, dom in enumerate(spec.domains):
        y = np.repeat(np.arange(spec.class_count), dom.samples_per_class)
        causal = means[y] + spec.noise_std * rng.standard_normal((y.size, spec.causal_dims))
        src = _confounder_classes(y, dom.rho, spec.class_count, rng)
        conf = (spec.confounder_scale * protos[src]
                + spec.noise_std * rng.standard_normal((y.size, spec.confounder_dims)))
        feats.append(np.hstack([causal, conf]))
        labels.append(y)
        domains.append(np.full(y.size, dom_id))
    return DomainDataset(
        np.vstack(feats), np.concatenate(labels), np.concatenate(domains),
        class_count=spec.class_count, domain_count=len(spec.domains),
    )


PRESETS = {
    # two confounded source domains, one unconfounded target
    "confounded-3": dict(
        class_count=2, causal_dims=2, confounder_dims=3,
        domains=[(0.9, 100), (0.9, 100), (0.0, 100)],
        causal_separation=2.0, noise_std=0.5, confounder_scale=1.0,
    ),
    # 7 classes x 3 clusters each gives 21 clusters
    "pacs-like": dict(
        class_count=7, causal_dims=8, confounder_dims=4,
        domains=[(0.8, 40), (0.6, 30), (0.4, 20), (0.0, 30)],
        causal_separation=3.0, noise_std=1.0, confounder_scale=1.0,
    ),
}


def preset(name: str, seed: int = 0, **overrides) -> SyntheticDomainSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    kw["seed"] = seed
    return SyntheticDomainSpec(**kw)


def save_csv(dataset: DomainDataset, path) -> None:
    """Write ``f0,...,f{d-1},label,domain`` with round-trip float formatting."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(dataset.feature_dim)] + ["label", "domain"])
        for row, lab, dom in zip(dataset.features, dataset.labels, dataset.domains):
            w.writerow([repr(float(v)) for v in row] + [int(lab), int(dom)])


def _parse_index(cell, what, lineno):
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"line {lineno}: {what} value {cell!r} is not a number") from None
    if not value.is_integer() or value < 0:
        raise DataError(f"line {lineno}: {what} value {cell!r} is not a non-negative integer")
    return int(value)


def load_csv(path, schema: dict | None = None) -> DomainDataset:
    """Read a dataset CSV.

    ``schema`` may name ``label_column``, ``domain_column``, ``feature_columns``
    and fix ``class_count`` / ``domain_count``; by default every column other
    than ``label`` and ``domain`` is a feature.
    """
    schema = dict(schema or {})
    label_col = schema.get("label_column", "label")
    domain_col = schema.get("domain_column", "domain")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        for col in (label_col, domain_col):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        feat_cols = schema.get("feature_columns") or [
            h for h in header if h not in (label_col, domain_col)]
        missing = [c for c in feat_cols if c not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        fpos = [header.index(c) for c in feat_cols]
        lpos, dpos = header.index(label_col), header.index(domain_col)
        rows, labels, domains = [], [], []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(cells)}")
            if any(c.strip() == "" for c in cells):
                raise DataError(f"line {lineno}: missing value")
            try:
                rows.append([float(cells[p]) for p in fpos])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric feature value") from None
            if not all(np.isfinite(rows[-1])):
                raise DataError(f"line {lineno}: non-finite feature value")
            labels.append(_parse_index(cells[lpos], "label", lineno))
            domains.append(_parse_index(cells[dpos], "domain", lineno))
    if not rows:
        raise DataError(f"{path}: no data rows")
    labels = np.array(labels)
    domains = np.array(domains)
    class_count = int(schema.get("class_count", labels.max() + 1))
    domain_count = int(schema.get("domain_count", domains.max() + 1))
    if labels.max() >= class_count:
        raise DataError(f"{path}: label {labels.max()} outside declared class_count {class_count}")
    if domains.max() >= domain_count:
        raise DataError(f"{path}: domain {domains.max()} outside declared domain_count {domain_count}")
    return DomainDataset(np.array(rows), labels, domains, class_count, domain_count)


def normalization_stats(dataset: DomainDataset) -> NormStats:
    mean = dataset.features.mean(axis=0)
    std = dataset.features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean, std, "train")


def apply_normalization(dataset: DomainDataset, stats: NormStats) -> DomainDataset:
    return replace(dataset, features=(dataset.features - stats.mean) / stats.std, norm=stats)


def leave_one_domain_out(dataset: DomainDataset, test_domain: int,
                         normalize: bool = True) -> tuple[DomainDataset, DomainDataset]:
    if test_domain not in dataset.present_domains():
        raise ConfigError(f"domain {test_domain} not present; have {dataset.present_domains()}")
    held = dataset.domains == test_domain
    train = dataset.subset(np.flatnonzero(~held))
    test = dataset.subset(np.flatnonzero(held))
    if normalize:
        stats = normalization_stats(train)
        train = apply_normalization(train, stats)
        test = apply_normalization(test, stats)
    return train, test
