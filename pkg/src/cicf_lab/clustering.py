"""Per-class K-means and per-cluster gradient statistics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from . import kernels
from .data import DomainDataset
from .errors import ConfigError, DataError
from .model import ModelSpec, ParamVector, encode, per_sample_grads

log = logging.getLogger(__name__)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list
    n_iter: int


def _kmeans_pp(points, k, rng):
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centroid already; pick any unused row
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _repair_empty(points, labels, sqdist, centroids, k):
    """Move the point farthest from its centroid into each empty cluster."""
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        cand = np.where(donors, sqdist, -1.0)
        far = int(np.argmax(cand))
        counts[labels[far]] -= 1
        labels[far] = c
        counts[c] = 1
        centroids[c] = points[far]
        sqdist[far] = 0.0
    return labels


def _inertia(points, labels, centroids):
    diff = points - centroids[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans(points, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``history`` holds the inertia after every iteration and never increases.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n == 0:
        raise DataError("kmeans needs at least one point")
    if K < 1 or K > n:
        raise ConfigError(f"K must be in [1, {n}], got {K}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, K, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, sqdist = kernels.assign_nearest(points, centroids)
        labels = _repair_empty(points, labels, sqdist, centroids, K)
        new = np.empty_like(centroids)
        for c in range(K):
            new[c] = points[labels == c].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        history.append(_inertia(points, labels, centroids))
        if shift < tol:
            break
    return KMeansResult(labels, centroids, history[-1], history, it)


@dataclass
class ClusterAssignment:
    assignment: np.ndarray
    centroids: np.ndarray
    class_of_cluster: np.ndarray
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.class_of_cluster = np.asarray(self.class_of_cluster, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.assignment.size)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        k = self.class_of_cluster.size
        if self.assignment.size == 0:
            raise DataError("empty assignment")
        if self.assignment.min() < 0 or self.assignment.max() >= k:
            raise DataError("cluster ids outside [0, K)")
        if np.any(np.bincount(self.assignment, minlength=k) == 0):
            raise DataError("every cluster must be nonempty")

    @property
    def n_clusters(self) -> int:
        return self.class_of_cluster.size

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)

    @property
    def weights(self) -> np.ndarray:
        return self.sizes / self.assignment.size

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def member_lists(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        return np.split(order, bounds)

    def check_against(self, dataset: DomainDataset) -> None:
        if self.assignment.size != len(dataset):
            raise DataError("assignment does not cover the dataset")
        if np.any(self.class_of_cluster[self.assignment] != dataset.labels):
            raise DataError("a cluster spans more than one class")

    def save_csv(self, path, class_ids=None) -> None:
        classes = self.class_of_cluster[self.assignment] if class_ids is None else class_ids
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "class_id", "cluster_id"])
            for sid, cls, cid in zip(self.sample_ids, classes, self.assignment):
                w.writerow([int(sid), int(cls), int(cid)])

    @classmethod
    def load_csv(cls, path, dataset: DomainDataset | None = None) -> "ClusterAssignment":
        """Rebuild an assignment; centroids are recomputed from ``dataset`` when given."""
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{path}: no assignment rows")
        sids = np.array([int(r["sample_id"]) for r in rows])
        classes = np.array([int(r["class_id"]) for r in rows])
        cids = np.array([int(r["cluster_id"]) for r in rows])
        k = cids.max() + 1
        class_of = np.full(k, -1)
        class_of[cids] = classes
        if np.any(class_of[cids] != classes):
            raise DataError(f"{path}: a cluster spans more than one class")
        if dataset is not None:
            pos = {int(s): i for i, s in enumerate(dataset.sample_ids)}
            rows_idx = np.array([pos[int(s)] for s in sids])
            order = np.argsort(rows_idx)
            sids, cids = sids[order], cids[order]
            cents = np.stack([dataset.features[rows_idx[order][cids == c]].mean(axis=0)
                              for c in range(k)])
        else:
            cents = np.zeros((k, 0))
        return cls(cids, cents, class_of, sids)


def cluster_per_class(dataset: DomainDataset, K: int = 3, space: str = "raw_input",
                      params: ParamVector | None = None, spec: ModelSpec | None = None,
                      seed: int = 0, max_iter: int = 100, tol: float = 1e-8) -> ClusterAssignment:
    """K-means within each class; class c gets min(K, |c|) clusters."""
    if len(dataset) == 0:
        raise DataError("cannot cluster an empty dataset")
    if K < 1:
        raise ConfigError("K must be positive")
    if space == "raw_input":
        feats = dataset.features
    elif space == "encoder_output":
        if params is None or spec is None:
            raise ConfigError("encoder_output clustering needs params and spec")
        feats = encode(params, spec, dataset.features)
    else:
        raise ConfigError(f"unknown clustering space {space!r}")
    assignment = np.empty(len(dataset), dtype=np.int64)
    centroids, class_of = [], []
    next_id = 0
    for c in np.unique(dataset.labels):
        rows = np.flatnonzero(dataset.labels == c)
        k_c = min(K, rows.size)
        if k_c < K:
            log.warning("class %d has %d samples; using %d clusters instead of %d",
                        c, rows.size, k_c, K)
        class_seed = int(np.random.SeedSequence([seed, int(c)]).generate_state(1)[0])
        res = kmeans(feats[rows], k_c, seed=class_seed, max_iter=max_iter, tol=tol)
        assignment[rows] = res.labels + next_id
        centroids.append(res.centroids)
        class_of.extend([int(c)] * k_c)
        next_id += k_c
    out = ClusterAssignment(assignment, np.vstack(centroids), np.array(class_of),
                            dataset.sample_ids.copy())
    out.check_against(dataset)
    return out


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _pairs(members, max_pairs, rng):
    m = members.size
    if m * (m - 1) // 2 <= max_pairs:
        return list(combinations(members.tolist(), 2))
    out = []
    for _ in range(max_pairs):
        i, j = rng.choice(members, size=2, replace=False)
        out.append((int(i), int(j)))
    return out


def gradient_coherence(params: ParamVector, spec: ModelSpec, dataset: DomainDataset,
                       assignment: ClusterAssignment, max_pairs: int = 64,
                       seed: int = 0, grads=None) -> np.ndarray:
    """Mean pairwise cosine similarity of per-sample gradients inside each cluster.

    Singleton clusters report 1.0.
    """
    if grads is None:
        grads = per_sample_grads(params, spec, dataset.features, dataset.labels)
    rng = np.random.default_rng(seed)
    out = np.empty(assignment.n_clusters)
    for k, members in enumerate(assignment.member_lists()):
        if members.size < 2:
            out[k] = 1.0
            continue
        sims = [_cosine(grads[i], grads[j]) for i, j in _pairs(members, max_pairs, rng)]
        out[k] = float(np.mean(sims))
    return out


def cross_cluster_coherence(params, spec, dataset, assignment, max_pairs: int = 64,
                            seed: int = 0, grads=None) -> float:
    """Mean cosine similarity of gradient pairs drawn from different clusters."""
    if grads is None:
        grads = per_sample_grads(params, spec, dataset.features, dataset.labels)
    if assignment.n_clusters < 2:
        return float("nan")
    rng = np.random.default_rng(seed)
    lab = assignment.assignment
    sims = []
    while len(sims) < max_pairs:
        i, j = rng.integers(lab.size, size=2)
        if lab[i] != lab[j]:
            sims.append(_cosine(grads[i], grads[j]))
    return float(np.mean(sims))


@dataclass
class ClusterGradientStats:
    mu_k: np.ndarray
    sigma2_k: np.ndarray
    mu: np.ndarray
    sigma2: float
    weights: np.ndarray
    sizes: np.ndarray

    @property
    def within(self) -> float:
        """Sum_k P_k sigma_k^2."""
        return float(self.weights @ self.sigma2_k)

    @property
    def between(self) -> float:
        """Sum_k P_k |mu_k - mu|^2."""
        d = self.mu_k - self.mu
        return float(self.weights @ np.einsum("kp,kp->k", d, d))


def stats_from_gradients(grads, assignment: ClusterAssignment) -> ClusterGradientStats:
    """Exact population statistics of an (N, P) per-sample gradient matrix."""
    grads = np.asarray(grads, dtype=np.float64)
    mu = grads.mean(axis=0)
    dev = grads - mu
    sigma2 = float(np.einsum("np,np->", dev, dev) / grads.shape[0])
    mus, vars_ = [], []
    for members in assignment.member_lists():
        g = grads[members]
        m = g.mean(axis=0)
        d = g - m
        mus.append(m)
        vars_.append(float(np.einsum("np,np->", d, d) / members.size))
    return ClusterGradientStats(np.array(mus), np.array(vars_), mu, sigma2,
                                assignment.weights, assignment.sizes)


def cluster_gradient_stats(params: ParamVector, spec: ModelSpec, dataset: DomainDataset,
                           assignment: ClusterAssignment) -> ClusterGradientStats:
    assignment.check_against(dataset)
    grads = per_sample_grads(params, spec, dataset.features, dataset.labels)
    return stats_from_gradients(grads, assignment)
