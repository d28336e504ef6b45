"""ERM, MAML and CICF training loops plus evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .clustering import ClusterAssignment, cluster_per_class
from .data import DomainDataset
from .errors import ConfigError, NumericError
from .intervention import GradientEstimate, global_gradient, virtual_update
from .model import (Batch, ModelSpec, ParamVector, hvp, init_params, loss_and_grad,
                    model_grad_fn, predict)
from .sampling import SamplerKind, allocation_for, draw_indices, equal_allocation

log = logging.getLogger(__name__)

OUTER_MODES = ("first_order", "exact_hvp")


@dataclass
class TrainConfig:
    alpha: float = 0.05
    beta: float = 0.01
    epochs: int = 60
    M: int = 256
    M_l: int = 84
    K: int = 3
    outer_mode: str = "first_order"
    allocation_scheme: str = "proportional"
    outer_sampler: str = "uniform"
    cluster_space: str = "raw_input"
    virtual_scope: str = "full"
    maml_tasks: str = "domain"
    hvp_eps: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("training.alpha must be >= 0")
        if self.beta < 0:
            raise ConfigError("training.beta must be >= 0")
        if self.epochs < 0:
            raise ConfigError("training.epochs must be >= 0")
        for name in ("M", "M_l", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be >= 1")
        choices = {
            "outer_mode": OUTER_MODES,
            "allocation_scheme": ("proportional", "equal"),
            "outer_sampler": ("uniform", "per_cluster"),
            "cluster_space": ("raw_input", "encoder_output"),
            "virtual_scope": ("full", "head"),
            "maml_tasks": ("domain", "random"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"training.{name} must be one of {allowed}")
        if self.hvp_eps <= 0:
            raise ConfigError("training.hvp_eps must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    spec: ModelSpec
    params: ParamVector


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: dict = field(default_factory=dict)
    test_loss: dict = field(default_factory=dict)


@dataclass
class RunMetrics:
    method: str
    seed: int
    epochs: list = field(default_factory=list)
    iterations: int = 0
    wall_seconds: float = 0.0

    @property
    def final_test_accuracy(self) -> dict:
        return self.epochs[-1].test_accuracy if self.epochs else {}

    @property
    def mean_test_accuracy(self) -> float:
        acc = self.final_test_accuracy
        return float(np.mean(list(acc.values()))) if acc else float("nan")

    def csv_rows(self):
        for rec in self.epochs:
            yield (rec.epoch, "train", "all", rec.train_loss, rec.train_accuracy)
            for dom in sorted(rec.test_accuracy):
                yield (rec.epoch, "test", dom, rec.test_loss[dom], rec.test_accuracy[dom])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "domain", "loss", "accuracy"])
            for row in self.csv_rows():
                w.writerow([row[0], row[1], row[2], repr(float(row[3])), repr(float(row[4]))])

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "iterations": self.iterations,
            "final_test_accuracy": {str(k): v for k, v in self.final_test_accuracy.items()},
            "mean_test_accuracy": self.mean_test_accuracy,
        }


class TrainingDiverged(NumericError):
    def __init__(self, message, metrics: RunMetrics):
        super().__init__(message)
        self.metrics = metrics


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    loss: float
    per_domain: dict


def evaluate(params: ParamVector, spec: ModelSpec, dataset: DomainDataset) -> EvalResult:
    """Argmax accuracy (lowest index wins ties), confusion counts and mean loss."""
    pred = predict(params, spec, dataset.features)
    correct = pred == dataset.labels
    k = spec.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    loss, _ = loss_and_grad(params, spec, dataset.batch())
    per_domain = {int(d): float(correct[dataset.domains == d].mean())
                  for d in dataset.present_domains()}
    return EvalResult(float(correct.mean()), confusion, loss, per_domain)


def _resolve_model(model, train: DomainDataset, seed_seq) -> Model:
    if isinstance(model, Model):
        return Model(model.spec, model.params.copy())
    if isinstance(model, ModelSpec):
        return Model(model, init_params(model, int(seed_seq.generate_state(1)[0])))
    raise ConfigError("model must be a Model or a ModelSpec")


def _streams(seed: int):
    """Independent child streams: (init, outer batches, inner draws, clustering)."""
    children = np.random.SeedSequence(seed).spawn(4)
    return (children[0], np.random.default_rng(children[1]),
            np.random.default_rng(children[2]), int(children[3].generate_state(1)[0]))


def _uniform_batches(n: int, size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def _iterations_per_epoch(n: int, size: int) -> int:
    return math.ceil(n / size)


def _record_epoch(metrics, epoch, params, spec, train, test, losses):
    tr = evaluate(params, spec, train)
    rec = EpochRecord(epoch, float(np.mean(losses)) if losses else tr.loss, tr.accuracy)
    if test is not None:
        for dom in test.present_domains():
            sub = test.subset(np.flatnonzero(test.domains == dom))
            ev = evaluate(params, spec, sub)
            rec.test_accuracy[dom] = ev.accuracy
            rec.test_loss[dom] = ev.loss
    metrics.epochs.append(rec)


def _sgd(params: ParamVector, grad, beta: float) -> ParamVector:
    new = params.values - beta * grad
    if not np.all(np.isfinite(new)):
        raise NumericError("parameters became non-finite")
    return params.with_values(new)


Callback = Callable[[int, ParamVector], None]


def train_erm(config: TrainConfig, train: DomainDataset, model, test: DomainDataset | None = None,
              callback: Callback | None = None):
    """Plain mini-batch SGD on cross-entropy with step ``beta`` and batch ``M_l``."""
    init_seq, outer_rng, _, _ = _streams(config.seed)
    m = _resolve_model(model, train, init_seq)
    spec, params = m.spec, m.params
    metrics = RunMetrics("erm", config.seed)
    t0 = time.perf_counter()
    size = min(config.M_l, len(train))
    it = 0
    try:
        for epoch in range(config.epochs):
            losses = []
            for rows in _uniform_batches(len(train), size, outer_rng):
                loss, grad = loss_and_grad(params, spec, train.batch(rows))
                params = _sgd(params, grad, config.beta)
                losses.append(loss)
                it += 1
                if callback:
                    callback(it, params)
            _record_epoch(metrics, epoch, params, spec, train, test, losses)
    except NumericError as exc:
        metrics.iterations = it
        raise TrainingDiverged(f"ERM diverged at iteration {it}: {exc}", metrics) from exc
    metrics.iterations = it
    metrics.wall_seconds = time.perf_counter() - t0
    return Model(spec, params), metrics


def outer_gradient(theta: ParamVector, g_dagger: GradientEstimate, outer_batch: Batch,
                   mode: str = "first_order", spec: ModelSpec | None = None, grad_fn=None,
                   eps: float = 1e-4, mask: slice | None = None, return_loss: bool = False):
    """Gradient of the outer loss L(theta_dagger) used for the real update.

    first_order treats g_dagger as a constant and returns grad L at
    theta_dagger. exact_hvp also differentiates through
    theta_dagger = theta - alpha * g_dagger(theta), subtracting
    alpha * H(theta) @ grad L(theta_dagger) with H the Hessian of the loss on
    the batch that produced g_dagger.
    """
    if mode not in OUTER_MODES:
        raise ConfigError(f"outer mode must be one of {OUTER_MODES}")
    if grad_fn is None:
        grad_fn = model_grad_fn(spec)
    theta_dagger = virtual_update(theta, g_dagger, mask=mask)
    loss, g_out = grad_fn(theta_dagger, outer_batch)
    if mode == "exact_hvp" and g_dagger.alpha != 0:
        v = g_out
        if mask is not None:
            v = np.zeros_like(g_out)
            v[mask] = g_out[mask]
        g_out = g_out - g_dagger.alpha * hvp(theta, spec, g_dagger.batch, v, eps=eps,
                                             grad_fn=grad_fn)
    return (loss, g_out) if return_loss else g_out


def _outer_batches(config, train, assignment, rng):
    size = min(config.M_l, len(train))
    if config.outer_sampler == "uniform":
        yield from _uniform_batches(len(train), size, rng)
        return
    alloc = equal_allocation(assignment.n_clusters, size, assignment.sizes)
    strata = assignment.member_lists()
    for _ in range(_iterations_per_epoch(len(train), size)):
        yield draw_indices(strata, alloc.counts, rng)


def train_cicf(config: TrainConfig, train: DomainDataset, model, test: DomainDataset | None = None,
               assignment: ClusterAssignment | None = None, callback: Callback | None = None):
    """Two-stage update per iteration.

    A stratified batch of size M gives g_dagger; the outer loss on a batch of
    size M_l is evaluated at theta - alpha * g_dagger and its gradient (per
    ``outer_mode``) moves the real parameters with step beta. Clusters are
    computed once, before the first iteration.
    """
    init_seq, outer_rng, inner_rng, cluster_seed = _streams(config.seed)
    m = _resolve_model(model, train, init_seq)
    spec, params = m.spec, m.params
    if assignment is None:
        assignment = cluster_per_class(train, config.K, config.cluster_space,
                                       params=params, spec=spec, seed=cluster_seed)
    assignment.check_against(train)
    M = min(config.M, len(train))
    kind = (SamplerKind.STRATIFIED_PROPORTIONAL if config.allocation_scheme == "proportional"
            else SamplerKind.STRATIFIED_EQUAL)
    alloc = allocation_for(kind, assignment, M)
    mask = spec.head_slice() if config.virtual_scope == "head" else None
    grad_fn = model_grad_fn(spec)
    metrics = RunMetrics("cicf", config.seed)
    t0 = time.perf_counter()
    it = 0
    try:
        for epoch in range(config.epochs):
            losses = []
            for rows in _outer_batches(config, train, assignment, outer_rng):
                est = global_gradient(params, spec, train, assignment, alloc, inner_rng,
                                      alpha=config.alpha, kind=kind)
                loss, grad = outer_gradient(params, est, train.batch(rows), config.outer_mode,
                                            spec, grad_fn, config.hvp_eps, mask, return_loss=True)
                params = _sgd(params, grad, config.beta)
                losses.append(loss)
                it += 1
                if callback:
                    callback(it, params)
            _record_epoch(metrics, epoch, params, spec, train, test, losses)
    except NumericError as exc:
        metrics.iterations = it
        raise TrainingDiverged(f"CICF diverged at iteration {it}: {exc}", metrics) from exc
    metrics.iterations = it
    metrics.wall_seconds = time.perf_counter() - t0
    return Model(spec, params), metrics


@dataclass
class TaskSplit:
    meta_train: Batch
    meta_test: Batch
    task_id: int = 0


def maml_gradient(params: ParamVector, spec: ModelSpec | None, tasks: list[TaskSplit],
                  alpha: float, mode: str = "first_order", eps: float = 1e-4, grad_fn=None):
    """Sum over tasks of the meta-test loss after one inner step on meta-train."""
    if not tasks:
        raise ConfigError("MAML needs at least one task")
    if grad_fn is None:
        grad_fn = model_grad_fn(spec)
    total_loss = 0.0
    total = np.zeros_like(params.values)
    for task in tasks:
        _, g_tr = grad_fn(params, task.meta_train)
        est = GradientEstimate(g_tr, SamplerKind.RANDOM, task.meta_train.indices,
                               alpha=alpha, batch=task.meta_train)
        loss, g = outer_gradient(params, est, task.meta_test, mode, spec, grad_fn, eps,
                                 return_loss=True)
        total_loss += loss
        total += g
    return total_loss, total


def build_tasks(train: DomainDataset, batch_size: int, rng, by_domain: bool = True) -> list[TaskSplit]:
    """One task per source domain with disjoint meta-train / meta-test rows.

    With ``by_domain=False`` (or a single domain) the pool is the whole
    training set split into as many random tasks as there are domains.
    """
    doms = train.present_domains()
    if by_domain and len(doms) > 1:
        pools = [np.flatnonzero(train.domains == d) for d in doms]
    else:
        perm = rng.permutation(len(train))
        pools = np.array_split(perm, max(len(doms), 1))
    tasks = []
    for t, pool in enumerate(pools):
        if pool.size < 2:
            continue
        half = min(batch_size, pool.size // 2)
        rows = rng.choice(pool, size=2 * half, replace=False)
        tasks.append(TaskSplit(train.batch(rows[:half]), train.batch(rows[half:]), t))
    if not tasks:
        raise ConfigError("no domain has enough samples to form a MAML task")
    return tasks


def train_maml(config: TrainConfig, train: DomainDataset, model, test: DomainDataset | None = None,
               tasks: list[TaskSplit] | None = None, callback: Callback | None = None):
    """MAML with one inner step per task; fresh tasks each iteration unless ``tasks`` is fixed."""
    init_seq, outer_rng, _, _ = _streams(config.seed)
    m = _resolve_model(model, train, init_seq)
    spec, params = m.spec, m.params
    size = min(config.M_l, len(train))
    per_epoch = _iterations_per_epoch(len(train), size)
    metrics = RunMetrics("maml", config.seed)
    t0 = time.perf_counter()
    it = 0
    try:
        for epoch in range(config.epochs):
            losses = []
            for _ in range(per_epoch):
                batch_tasks = tasks if tasks is not None else build_tasks(
                    train, size, outer_rng, by_domain=config.maml_tasks == "domain")
                loss, grad = maml_gradient(params, spec, batch_tasks, config.alpha,
                                           config.outer_mode, config.hvp_eps)
                params = _sgd(params, grad, config.beta)
                losses.append(loss / len(batch_tasks))
                it += 1
                if callback:
                    callback(it, params)
            _record_epoch(metrics, epoch, params, spec, train, test, losses)
    except NumericError as exc:
        metrics.iterations = it
        raise TrainingDiverged(f"MAML diverged at iteration {it}: {exc}", metrics) from exc
    metrics.iterations = it
    metrics.wall_seconds = time.perf_counter() - t0
    return Model(spec, params), metrics


TRAINERS = {"erm": train_erm, "cicf": train_cicf, "maml": train_maml}


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
