"""Global-scope gradient estimation, the virtual update and standard-error analytics.

The global-scope gradient is the population mean of per-sample gradients. It
is estimated from a cluster-stratified mini-batch and used to take a
lookahead step ``theta_dagger = theta - alpha * g_dagger`` at which the outer
loss is evaluated. The standard-error helpers compare that estimator with
plain uniform mini-batches, both in closed form and by simulation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .clustering import ClusterAssignment, stats_from_gradients
from .data import DomainDataset
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .model import Batch, ModelSpec, ParamVector, forward_batch, loss_and_grad
from .sampling import Allocation, SamplerKind, draw, draw_many, strata_for


@dataclass
class GradientEstimate:
    g: np.ndarray
    sampler: SamplerKind
    batch_indices: np.ndarray
    allocation: Allocation | None = None
    alpha: float = 0.0
    batch: Batch | None = field(default=None, repr=False)
    loss: float = float("nan")


def global_gradient(params: ParamVector, spec: ModelSpec, dataset: DomainDataset,
                    assignment: ClusterAssignment, allocation: Allocation,
                    rng: np.random.Generator, alpha: float = 0.0,
                    kind=SamplerKind.STRATIFIED_PROPORTIONAL, grad_fn=None) -> GradientEstimate:
    """Mean gradient over one stratified draw of ``allocation.total`` samples."""
    batch = draw(dataset, assignment, kind, allocation.total, rng, allocation=allocation)
    if grad_fn is None:
        loss, g = loss_and_grad(params, spec, batch)
    else:
        loss, g = grad_fn(params, batch)
    return GradientEstimate(g, SamplerKind(kind), batch.indices, allocation, alpha, batch, loss)


def virtual_update(theta: ParamVector, g, alpha: float | None = None,
                   mask: slice | None = None) -> ParamVector:
    """theta - alpha * g as a new vector; ``theta`` is left untouched.

    ``g`` may be a GradientEstimate (its alpha is used unless overridden) or a
    plain array. ``mask`` restricts the step to a slice of the flat vector.
    """
    if isinstance(g, GradientEstimate):
        step = g.g
        alpha = g.alpha if alpha is None else alpha
    else:
        step = np.asarray(g, dtype=np.float64)
    if alpha is None:
        raise ConfigError("alpha is required when g is a plain vector")
    if step.shape != theta.values.shape:
        raise ShapeError(f"gradient shape {step.shape} != parameter shape {theta.values.shape}")
    if mask is None:
        return theta.with_values(theta.values - alpha * step)
    out = theta.values.copy()
    out[mask] = out[mask] - alpha * step[mask]
    return theta.with_values(out)


def taylor_residual(params: ParamVector, spec: ModelSpec, x, batch_for_g: Batch,
                    alpha: float, fd_step: float = 1e-4) -> float:
    """Max-abs gap between f at the virtually updated parameters and its
    first-order expansion around the current ones.

    The directional derivative along g is a central difference with step
    ``fd_step`` on the unit direction.
    """
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, g = loss_and_grad(params, spec, batch_for_g)
    if alpha == 0:
        return 0.0
    base = forward_batch(params, spec, X)[1]
    moved = forward_batch(params.with_values(params.values - alpha * g), spec, X)[1]
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        return float(np.max(np.abs(moved - base)))
    u = g / norm
    plus = forward_batch(params.with_values(params.values + fd_step * u), spec, X)[1]
    minus = forward_batch(params.with_values(params.values - fd_step * u), spec, X)[1]
    directional = (plus - minus) / (2.0 * fd_step) * norm
    resid = moved - (base - alpha * directional)
    if not np.all(np.isfinite(resid)):
        raise NumericError("non-finite Taylor residual")
    return float(np.max(np.abs(resid)))


def se_random(sigma2: float, M: int, N: int, mode: str = "exact") -> float:
    """Mean squared error of a uniform without-replacement batch mean."""
    if N < 2 or M < 1 or M > N:
        raise DomainError(f"need 1 <= M <= N and N >= 2, got M={M}, N={N}")
    if sigma2 < 0:
        raise DomainError("sigma2 must be non-negative")
    if mode == "approx":
        return sigma2 / M
    if mode != "exact":
        raise DomainError(f"unknown mode {mode!r}")
    return sigma2 / M * (1.0 - (M - 1) / (N - 1))


def se_ours(weights, allocations, cluster_sizes, sigma2_k, mode: str = "exact") -> float:
    """Mean squared error of the cluster-stratified batch mean.

    exact:  sum_k P_k^2 / N_k * (1 - (N_k - 1)/(N_k^K - 1)) * sigma_k^2
    approx: sum_k P_k / M * sigma_k^2
    """
    P = np.asarray(weights, dtype=np.float64)
    n = np.asarray(getattr(allocations, "counts", allocations), dtype=np.float64)
    big = np.asarray(cluster_sizes, dtype=np.float64)
    s2 = np.asarray(sigma2_k, dtype=np.float64)
    if not (P.size == n.size == big.size == s2.size):
        raise DomainError("weights, allocations, sizes and variances differ in length")
    if np.any(s2 < 0):
        raise DomainError("cluster variances must be non-negative")
    if mode == "approx":
        M = n.sum()
        if M <= 0:
            raise DomainError("allocation total must be positive")
        return float(np.sum(P / M * s2))
    if mode != "exact":
        raise DomainError(f"unknown mode {mode!r}")
    if np.any(n < 1):
        raise DomainError("exact mode needs N_k >= 1 for every cluster")
    if np.any(n > big):
        raise DomainError("N_k exceeds the cluster size")
    total = 0.0
    for Pk, nk, Nk, vk in zip(P, n, big, s2):
        if nk == Nk:
            continue  # the whole cluster is drawn; no sampling error
        if Nk < 2:
            raise DomainError("exact mode needs N_k^K >= 2")
        # same operation order as se_random so one cluster reproduces it exactly
        total += vk / nk * (1.0 - (nk - 1.0) / (Nk - 1.0)) * (Pk * Pk)
    return float(total)


def rounding_bias(assignment: ClusterAssignment, allocation: Allocation, mu_k, mu) -> float:
    """|E[batch mean] - mu| when N_k / M differs from P_k."""
    n = allocation.as_array().astype(float)
    expected = (n / n.sum()) @ np.asarray(mu_k)
    return float(np.linalg.norm(expected - np.asarray(mu)))


@dataclass
class MonteCarloSE:
    estimate: float
    half_width: float
    trials: int


def _bootstrap_half_width(errors, rng, resamples=200):
    t = errors.size
    means = np.empty(resamples)
    for b in range(resamples):
        means[b] = errors[rng.integers(0, t, size=t)].mean()
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float((hi - lo) / 2.0)


def monte_carlo_se(per_sample_gradients, assignment: ClusterAssignment | None, kind, M: int,
                   trials: int, rng: np.random.Generator, labels=None,
                   chunk: int = 20000) -> MonteCarloSE:
    """Empirical mean squared error of batch-mean gradients against the population mean.

    Trials are simulated in chunks from ``rng`` in order, so results depend
    only on the generator state. The half-width is a 95% percentile bootstrap
    of the mean.
    """
    if trials < 100:
        raise ConfigError("need at least 100 trials")
    G = np.ascontiguousarray(per_sample_gradients, dtype=np.float64)
    mu = G.mean(axis=0)
    kind = SamplerKind(kind)
    if labels is None and assignment is not None:
        labels = assignment.class_of_cluster[assignment.assignment]
    if labels is None:
        labels = np.zeros(G.shape[0], dtype=np.int64)
    strata, counts = strata_for(kind, assignment, labels, M)
    errors = np.empty(trials)
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        idx = draw_many(strata, counts, n, rng)
        errors[start:start + n] = kernels.batch_mean_sq_errors(G, idx, mu)
    return MonteCarloSE(float(errors.mean()), _bootstrap_half_width(errors, rng), trials)


@dataclass
class SeReport:
    M: int
    N: int
    se_random_exact: float
    se_random_approx: float
    se_ours_exact: float
    se_ours_approx: float
    se_random_mc: float
    se_ours_mc: float
    se_random_mc_half_width: float
    se_ours_mc_half_width: float
    trials: int
    seed: int
    rounding_bias: float = 0.0

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, float) and not np.isfinite(v):
                v = None
            out[k] = v
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def se_report(per_sample_gradients, assignment: ClusterAssignment, M: int,
              trials: int, seed: int) -> SeReport:
    """Analytic and simulated SE for uniform vs proportional stratified batches."""
    stats = stats_from_gradients(per_sample_gradients, assignment)
    N = assignment.assignment.size
    alloc = Allocation(strata_for(SamplerKind.STRATIFIED_PROPORTIONAL, assignment, None, M)[1])
    rng = np.random.default_rng(seed)
    mc_rand = monte_carlo_se(per_sample_gradients, assignment, SamplerKind.RANDOM, M, trials, rng)
    mc_ours = monte_carlo_se(per_sample_gradients, assignment,
                             SamplerKind.STRATIFIED_PROPORTIONAL, M, trials, rng)
    if np.all(alloc.as_array() >= 1):
        exact_ours = se_ours(stats.weights, alloc, stats.sizes, stats.sigma2_k, "exact")
    else:
        exact_ours = float("nan")
    return SeReport(
        M=M, N=N,
        se_random_exact=se_random(stats.sigma2, M, N, "exact"),
        se_random_approx=se_random(stats.sigma2, M, N, "approx"),
        se_ours_exact=exact_ours,
        se_ours_approx=se_ours(stats.weights, alloc, stats.sizes, stats.sigma2_k, "approx"),
        se_random_mc=mc_rand.estimate, se_ours_mc=mc_ours.estimate,
        se_random_mc_half_width=mc_rand.half_width, se_ours_mc_half_width=mc_ours.half_width,
        trials=trials, seed=seed,
        rounding_bias=rounding_bias(assignment, alloc, stats.mu_k, stats.mu),
    )
