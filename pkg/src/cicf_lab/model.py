"""Dense feed-forward network with an encoder/head split.

The network is a stack of affine layers. Layers ``[0, split_index)`` form the
encoder ``h`` and the remaining layers form the head ``f``; ``z = h(x)`` is the
activation tapped at the split. All parameters live in one flat float64 vector
so optimizers, virtual updates and Hessian-vector products can treat them as a
single point in parameter space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    split_index: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("layer_widths needs an input and an output width")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 <= self.split_index < self.n_layers:
            raise ConfigError(
                f"split_index must be in [0, {self.n_layers}), got {self.split_index}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def manifest(self) -> tuple[tuple[int, int, int], ...]:
        """(rows, cols, bias length) per layer; weights are stored (out, in)."""
        w = self.layer_widths
        return tuple((w[i + 1], w[i], w[i + 1]) for i in range(self.n_layers))

    @property
    def n_params(self) -> int:
        return sum(r * c + b for r, c, b in self.manifest)

    def layer_offsets(self) -> list[int]:
        offsets = [0]
        for r, c, b in self.manifest:
            offsets.append(offsets[-1] + r * c + b)
        return offsets

    def head_slice(self) -> slice:
        """Flat-vector slice holding the head ``f`` (layers >= split_index)."""
        return slice(self.layer_offsets()[self.split_index], self.n_params)


@dataclass
class ParamVector:
    values: np.ndarray
    manifest: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("parameter values must be a flat vector")
        expected = sum(r * c + b for r, c, b in self.manifest)
        if self.values.size != expected:
            raise ShapeError(
                f"parameter vector has {self.values.size} entries, manifest needs {expected}"
            )

    def __len__(self) -> int:
        return self.values.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) into ``values`` for each layer."""
        out = []
        pos = 0
        for r, c, b in self.manifest:
            W = self.values[pos:pos + r * c].reshape(r, c)
            pos += r * c
            out.append((W, self.values[pos:pos + b]))
            pos += b
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.manifest)

    def copy(self) -> "ParamVector":
        return self.with_values(self.values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.indices is None:
            self.indices = np.arange(self.labels.size)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.features.shape[0] < 1:
            raise ShapeError("a batch needs at least one row")
        if not (self.features.shape[0] == self.labels.size == self.indices.size):
            raise ShapeError("features, labels and indices disagree in length")

    def __len__(self) -> int:
        return self.labels.size


GradFn = Callable[[ParamVector, Batch], "tuple[float, np.ndarray]"]


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for rows, cols, nb in spec.manifest:
        bound = 1.0 / np.sqrt(cols)
        chunks.append(rng.uniform(-bound, bound, size=rows * cols))
        chunks.append(np.zeros(nb))
    return ParamVector(np.concatenate(chunks), spec.manifest)


def _activate(a, kind):
    if kind == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _activation_grad(post, kind):
    # derivative expressed through the post-activation value
    if kind == "tanh":
        return 1.0 - post * post
    return (post > 0.0).astype(np.float64)


def _check_params(params: ParamVector, spec: ModelSpec):
    if params.manifest != spec.manifest:
        raise ShapeError("parameter manifest does not match the model spec")


def _forward_all(params, spec, X):
    """Return the list of layer outputs, starting with X itself."""
    _check_params(params, spec)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.input_dim:
        raise ShapeError(f"expected {spec.input_dim} input features, got {X.shape[1]}")
    acts = [X]
    last = spec.n_layers - 1
    for i, (W, b) in enumerate(params.layers()):
        with np.errstate(over="ignore", invalid="ignore"):
            a = acts[-1] @ W.T + b
            if i < last:
                a = _activate(a, spec.activation)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activations in layer {i}", layer=i)
        acts.append(a)
    return acts


def forward_batch(params: ParamVector, spec: ModelSpec, X) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise forward pass; returns (z, logits) for every row of X."""
    acts = _forward_all(params, spec, X)
    return acts[spec.split_index], acts[-1]


def forward(params: ParamVector, spec: ModelSpec, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward takes a single feature vector; use forward_batch")
    z, logits = forward_batch(params, spec, x[None, :])
    return z[0], logits[0]


def encode(params: ParamVector, spec: ModelSpec, X) -> np.ndarray:
    return forward_batch(params, spec, X)[0]


def _softmax_terms(logits, labels, n_classes):
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    probs = expd / denom
    rows = np.arange(labels.size)
    losses = np.log(denom[:, 0]) - shifted[rows, labels]
    dlogits = probs
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def _backward(params, spec, acts, delta):
    """Accumulate dL/dtheta from the logit gradient ``delta`` (rows summed)."""
    layers = params.layers()
    grads = []
    for i in range(spec.n_layers - 1, -1, -1):
        W, _ = layers[i]
        grads.append((delta.sum(axis=0), delta.T @ acts[i]))
        if i > 0:
            delta = (delta @ W) * _activation_grad(acts[i], spec.activation)
    flat = []
    for db, dW in reversed(grads):
        flat.append(dW.ravel())
        flat.append(db)
    return np.concatenate(flat)


def loss_and_grad(params: ParamVector, spec: ModelSpec, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    acts = _forward_all(params, spec, batch.features)
    losses, dlogits = _softmax_terms(acts[-1], batch.labels, spec.n_classes)
    m = batch.labels.size
    grad = _backward(params, spec, acts, dlogits / m)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return float(losses.mean()), grad


def per_sample_grads(params: ParamVector, spec: ModelSpec, X, y) -> np.ndarray:
    """Gradient of each sample's own loss, one row per sample."""
    acts = _forward_all(params, spec, X)
    labels = np.asarray(y, dtype=np.int64).reshape(-1)
    _, delta = _softmax_terms(acts[-1], labels, spec.n_classes)
    layers = params.layers()
    m = labels.size
    blocks = [None] * (2 * spec.n_layers)
    for i in range(spec.n_layers - 1, -1, -1):
        W, _ = layers[i]
        blocks[2 * i] = np.einsum("mi,mj->mij", delta, acts[i]).reshape(m, -1)
        blocks[2 * i + 1] = delta
        if i > 0:
            delta = (delta @ W) * _activation_grad(acts[i], spec.activation)
    return np.concatenate(blocks, axis=1)


def model_grad_fn(spec: ModelSpec) -> GradFn:
    def fn(params, batch):
        return loss_and_grad(params, spec, batch)
    return fn


class QuadraticLoss:
    """L(theta) = 0.5 * theta^T A theta, ignoring the batch.

    Plugs into any ``grad_fn`` slot so second-order code paths can be checked
    against closed forms.
    """

    def __init__(self, A):
        self.A = np.asarray(A, dtype=np.float64)

    def __call__(self, params: ParamVector, batch: Batch | None = None):
        th = params.values
        g = self.A @ th
        return float(0.5 * th @ g), g


def hvp(params: ParamVector, spec: ModelSpec | None, batch: Batch | None, v,
        eps: float = 1e-4, grad_fn: GradFn | None = None) -> np.ndarray:
    """Hessian-vector product by central differences of exact gradients.

    The step is taken along the unit direction v/|v| and the result rescaled by
    |v|, so ``eps`` is an absolute distance in parameter space.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.values.shape:
        raise ShapeError(f"direction has shape {v.shape}, params {params.values.shape}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(v)
    if grad_fn is None:
        grad_fn = model_grad_fn(spec)
    unit = v / norm
    _, g_plus = grad_fn(params.with_values(params.values + eps * unit), batch)
    _, g_minus = grad_fn(params.with_values(params.values - eps * unit), batch)
    return (g_plus - g_minus) / (2.0 * eps) * norm


def numerical_grad(fn: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        out[i] = (fn(theta + e) - fn(theta - e)) / (2.0 * step)
    return out


def predict(params: ParamVector, spec: ModelSpec, X) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward_batch(params, spec, X)[1], axis=1)


def as_batch(X, y, indices: Sequence[int] | None = None) -> Batch:
    return Batch(X, y, None if indices is None else np.asarray(indices))
