"""Mini-batch samplers: stratified over clusters, uniform, and class-weighted."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .clustering import ClusterAssignment
from .data import DomainDataset
from .errors import AllocationError, ConfigError
from .model import Batch

log = logging.getLogger(__name__)


class SamplerKind(str, Enum):
    STRATIFIED_PROPORTIONAL = "stratified_proportional"
    STRATIFIED_EQUAL = "stratified_equal"
    RANDOM = "random"
    CLASS_WEIGHTED_RANDOM = "class_weighted_random"

    @property
    def stratified(self) -> bool:
        return self in (SamplerKind.STRATIFIED_PROPORTIONAL, SamplerKind.STRATIFIED_EQUAL)


@dataclass(frozen=True)
class Allocation:
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ConfigError("allocation counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    def __len__(self):
        return len(self.counts)


def _apportion(weights, seats: int):
    """Largest-remainder split of ``seats`` in proportion to integer ``weights``.

    Remainders are compared as exact integers (seats * w_k mod W), so equal
    fractional parts tie exactly and go to the lower index.
    """
    W = int(weights.sum())
    base = seats * weights // W
    rem = seats * weights % W
    left = seats - int(base.sum())
    order = sorted(range(weights.size), key=lambda i: (-int(rem[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def _largest_remainder(weights, seats: int, caps):
    """Apportion ``seats`` in proportion to ``weights``, never exceeding ``caps``.

    Seats a cluster cannot hold are re-apportioned among the clusters that
    still have room, in proportion to their original weights.
    """
    weights = np.asarray(weights, dtype=np.int64)
    caps = np.asarray(caps, dtype=np.int64)
    counts = np.zeros(weights.size, dtype=np.int64)
    open_ = caps > 0
    while True:
        remaining = seats - int(counts.sum())
        if remaining <= 0 or not open_.any():
            return counts
        w = np.where(open_, weights, 0)
        if w.sum() <= 0:
            w = open_.astype(np.int64)
        proposed = _apportion(w, remaining)
        room = caps - counts
        counts += np.minimum(proposed, room)
        if np.all(proposed <= room):
            return counts
        open_ &= counts < caps


def proportional_allocation(sizes, M: int) -> Allocation:
    """N_k proportional to cluster size, by largest-remainder apportionment."""
    sizes = np.asarray(sizes, dtype=np.int64)
    N = int(sizes.sum())
    if M < 1:
        raise ConfigError("M must be at least 1")
    if M > N:
        raise ConfigError(f"M={M} exceeds the population size N={N}")
    counts = _largest_remainder(sizes, M, sizes)
    return Allocation(tuple(counts))


def equal_allocation(n_clusters: int, M: int, sizes=None) -> Allocation:
    """floor(M/K) per cluster, remainder to the lowest indices."""
    if n_clusters < 1 or M < 1:
        raise ConfigError("need at least one cluster and M >= 1")
    if M < n_clusters:
        log.warning("M=%d < %d clusters; only the first M clusters get a sample", M, n_clusters)
    base, extra = divmod(M, n_clusters)
    counts = np.full(n_clusters, base, dtype=np.int64)
    counts[:extra] += 1
    if sizes is not None:
        sizes = np.asarray(sizes, dtype=np.int64)
        if np.any(counts > sizes):
            if M > sizes.sum():
                raise ConfigError(f"M={M} exceeds the population size {sizes.sum()}")
            counts = _largest_remainder(np.ones(n_clusters, dtype=np.int64), M, sizes)
    return Allocation(tuple(counts))


def allocation_for(kind: SamplerKind, assignment: ClusterAssignment, M: int) -> Allocation:
    kind = SamplerKind(kind)
    if kind is SamplerKind.STRATIFIED_PROPORTIONAL:
        return proportional_allocation(assignment.sizes, M)
    if kind is SamplerKind.STRATIFIED_EQUAL:
        return equal_allocation(assignment.n_clusters, M, assignment.sizes)
    raise ConfigError(f"{kind.value} does not use a cluster allocation")


def _class_strata(labels):
    classes = np.unique(labels)
    return [np.flatnonzero(labels == c) for c in classes]


def draw_indices(strata: list[np.ndarray], counts, rng) -> np.ndarray:
    """Uniform draws without replacement inside each stratum, concatenated."""
    parts = []
    for members, n in zip(strata, counts):
        if n > members.size:
            raise AllocationError(f"asked for {n} samples from a stratum of {members.size}")
        if n:
            parts.append(rng.choice(members, size=int(n), replace=False))
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def draw(dataset: DomainDataset, assignment: ClusterAssignment | None, kind, M: int,
         rng: np.random.Generator, allocation: Allocation | None = None) -> Batch:
    kind = SamplerKind(kind)
    n = len(dataset)
    if kind.stratified:
        if assignment is None:
            raise ConfigError("stratified sampling needs a cluster assignment")
        if allocation is None:
            raise ConfigError("stratified sampling needs an allocation")
        if len(allocation) != assignment.n_clusters:
            raise ConfigError("allocation length differs from the cluster count")
        rows = draw_indices(assignment.member_lists(), allocation.counts, rng)
    elif kind is SamplerKind.RANDOM:
        if M > n:
            raise ConfigError(f"M={M} exceeds the dataset size {n}")
        rows = rng.choice(n, size=M, replace=False)
    else:
        strata = _class_strata(dataset.labels)
        counts = proportional_allocation([s.size for s in strata], M).counts
        rows = draw_indices(strata, counts, rng)
    return dataset.batch(rows)


def draw_many(strata: list[np.ndarray], counts, trials: int, rng) -> np.ndarray:
    """(trials, M) index matrix; each row is one stratified without-replacement draw.

    Uses random sort keys per stratum, which is equivalent in distribution to
    ``draw_indices`` but vectorized over trials.
    """
    cols = []
    for members, n in zip(strata, counts):
        n = int(n)
        if n == 0:
            continue
        if n > members.size:
            raise AllocationError(f"asked for {n} samples from a stratum of {members.size}")
        if n == members.size:
            cols.append(np.broadcast_to(members, (trials, n)))
            continue
        keys = rng.random((trials, members.size))
        pick = np.argpartition(keys, n - 1, axis=1)[:, :n]
        cols.append(members[pick])
    return np.ascontiguousarray(np.hstack(cols), dtype=np.int64)


def strata_for(kind, assignment: ClusterAssignment, labels, M: int):
    """Strata and per-stratum counts that define ``kind`` for a batch of size M."""
    kind = SamplerKind(kind)
    if kind.stratified:
        return assignment.member_lists(), allocation_for(kind, assignment, M).counts
    if kind is SamplerKind.RANDOM:
        return [np.arange(len(labels))], (M,)
    strata = _class_strata(np.asarray(labels))
    return strata, proportional_allocation([s.size for s in strata], M).counts


def cluster_histogram(rows, assignment: ClusterAssignment) -> np.ndarray:
    return np.bincount(assignment.assignment[np.asarray(rows, dtype=np.int64)],
                       minlength=assignment.n_clusters)


@dataclass(frozen=True)
class Difference:
    E: int
    M: int

    @property
    def ratio(self) -> float:
        return self.E / self.M if self.M else 0.0


def sampler_difference_E(allocation, random_counts) -> Difference:
    """E = sum_k |N_k - R_k| between two per-cluster histograms."""
    a = np.asarray(getattr(allocation, "counts", allocation), dtype=np.int64)
    b = np.asarray(getattr(random_counts, "counts", random_counts), dtype=np.int64)
    if a.shape != b.shape:
        raise ConfigError("histograms cover different cluster counts")
    if a.sum() != b.sum():
        raise ConfigError(f"histogram totals differ: {a.sum()} vs {b.sum()}")
    return Difference(int(np.abs(a - b).sum()), int(a.sum()))


class BatchLog:
    """Appends (iteration, cluster histogram) rows to a CSV file."""

    def __init__(self, path, n_clusters: int):
        self.path = Path(path)
        self.n_clusters = n_clusters
        with self.path.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                ["iteration"] + [f"cluster_{k}" for k in range(n_clusters)])

    def append(self, iteration: int, histogram) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [iteration] + [int(h) for h in histogram])
