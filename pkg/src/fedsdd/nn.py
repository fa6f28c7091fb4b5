"""Dense feed-forward network engine with exact analytic gradients.

This is the numeric substrate shared by client trainers, global models and
the server-side distillation loop.  Models are plain MLPs described by a
:class:`NetworkSpec`; all trainable weights live in a single flat float64
vector (:class:`ParameterVector`), which is the unit of broadcast,
averaging and checkpointing.

All operations are pure: inputs are never mutated and new weights are only
produced as return values, so specs, weight vectors and batches are safe to
share across concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionMismatchError(ValueError):
    """Shape disagreement between a network, its weights, or a batch."""


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""

    def __init__(self, message: str, *, step: int | None = None,
                 client_id: int | None = None):
        super().__init__(message)
        self.step = step
        self.client_id = client_id


_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a dense network: layer widths plus hidden activation.

    ``layer_sizes`` runs input dim, hidden dims..., class count.  The output
    layer produces raw logits.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {_ACTIVATIONS}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, in forward order."""
        sizes = self.layer_sizes
        return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]

    @property
    def param_count(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in self.layer_shapes())


@dataclass(frozen=True)
class ParameterVector:
    """All trainable weights of one network, flattened.

    Layout is ``[W0.ravel(), b0, W1.ravel(), b1, ...]`` with ``Wl`` of shape
    (fan_in, fan_out).  Values are finite, float64 and frozen read-only;
    updates are expressed by constructing new vectors.
    """

    values: np.ndarray
    spec: NetworkSpec

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"parameter vector must be flat, got shape {arr.shape}")
        if arr.shape[0] != self.spec.param_count:
            raise DimensionMismatchError(
                f"parameter vector has {arr.shape[0]} entries, spec requires {self.spec.param_count}")
        if not np.isfinite(arr).all():
            raise ValueError("parameter vector contains non-finite entries")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Batch:
    """A mini-batch of inputs with optional integer class labels.

    Labels are absent for the server's unlabeled distillation pool.
    """

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"batch inputs must be a non-empty 2-D matrix, got shape {x.shape}")
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ValueError(f"labels shape {y.shape} does not match batch size {x.shape[0]}")
            object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class LossGrad:
    """A scalar loss and its exact gradient w.r.t. a flat weight vector."""

    loss: float
    grad: np.ndarray


def _layer_views(spec: NetworkSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(W, b) views into the flat vector, cheap and read-only."""
    views = []
    off = 0
    for n_in, n_out in spec.layer_shapes():
        w = values[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = values[off:off + n_out]
        off += n_out
        views.append((w, b))
    return views


def _check_forward_inputs(spec: NetworkSpec, w: ParameterVector, batch: Batch) -> None:
    if w.spec != spec:
        raise DimensionMismatchError("parameter vector was built for a different network spec")
    if batch.inputs.shape[1] != spec.n_inputs:
        raise DimensionMismatchError(
            f"layer 0 expects input size {spec.n_inputs}, batch provides {batch.inputs.shape[1]}")


def _activate(spec: NetworkSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_deriv(spec: NetworkSpec, post: np.ndarray) -> np.ndarray:
    # Derivative expressed through the post-activation value; relu uses the
    # subgradient 0 at exactly 0.
    if spec.activation == "relu":
        return (post > 0.0).astype(np.float64)
    return 1.0 - post * post


def _forward_cached(spec: NetworkSpec, values: np.ndarray, x: np.ndarray):
    """Forward pass keeping the per-layer post-activations for backprop."""
    acts = [x]
    a = x
    layers = _layer_views(spec, values)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        if i == last:
            return z, acts
        a = _activate(spec, z)
        acts.append(a)
    raise AssertionError("unreachable")


def forward(spec: NetworkSpec, w: ParameterVector, batch: Batch) -> np.ndarray:
    """Logits of the network on a batch, shape [batch, classes].

    Pure function of (w, batch): repeated calls are bitwise identical.
    """
    _check_forward_inputs(spec, w, batch)
    logits, _ = _forward_cached(spec, w.values, batch.inputs)
    return logits


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax along the last axis, max-subtracted for stability."""
    if temperature <= 0.0 or not np.isfinite(temperature):
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty logit vector")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _backprop(spec: NetworkSpec, values: np.ndarray, acts: list[np.ndarray],
              dlogits: np.ndarray) -> np.ndarray:
    """Exact gradient of a loss given d(loss)/d(logits), packed flat."""
    layers = _layer_views(spec, values)
    grads_w: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    delta = dlogits
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        grads_w[l] = acts[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ w.T) * _activation_deriv(spec, acts[l])
    flat = np.empty(spec.param_count, dtype=np.float64)
    off = 0
    for gw, gb in zip(grads_w, grads_b):
        flat[off:off + gw.size] = gw.ravel()
        off += gw.size
        flat[off:off + gb.size] = gb
        off += gb.size
    return flat


def ce_loss_grad(spec: NetworkSpec, w: ParameterVector, batch: Batch) -> LossGrad:
    """Mean cross-entropy over the batch and its exact gradient."""
    if batch.labels is None:
        raise ValueError("cross-entropy requires a labeled batch")
    if batch.labels.max() >= spec.n_classes or batch.labels.min() < 0:
        raise ValueError(f"label out of range for {spec.n_classes} classes")
    _check_forward_inputs(spec, w, batch)
    logits, acts = _forward_cached(spec, w.values, batch.inputs)
    logp = log_softmax(logits)
    n = len(batch)
    rows = np.arange(n)
    loss = float(-logp[rows, batch.labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, batch.labels] -= 1.0
    dlogits /= n
    return LossGrad(loss, _backprop(spec, w.values, acts, dlogits))


def kl_loss_grad(spec: NetworkSpec, w_student: ParameterVector, batch: Batch,
                 teacher_probs: np.ndarray, temperature: float) -> LossGrad:
    """Mean KL(teacher || student) at a softmax temperature, with exact gradient.

    The student distribution is ``softmax(F(x | w_student) / temperature)``;
    teacher rows must already be normalized probabilities.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p = np.asarray(teacher_probs, dtype=np.float64)
    n = len(batch)
    if p.shape != (n, spec.n_classes):
        raise DimensionMismatchError(
            f"teacher probabilities shape {p.shape} does not match (batch={n}, classes={spec.n_classes})")
    if p.min() < 0.0:
        raise ValueError("teacher probabilities contain negative entries")
    row_sums = p.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > 1e-6
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(f"teacher row {idx} is not normalized (sum={row_sums[idx]!r})")
    _check_forward_inputs(spec, w_student, batch)
    logits, acts = _forward_cached(spec, w_student.values, batch.inputs)
    logq = log_softmax(logits / temperature)
    q = np.exp(logq)
    p_safe = np.where(p > 0.0, p, 1.0)
    plogp = np.where(p > 0.0, p * np.log(p_safe), 0.0)
    loss = float((plogp.sum(axis=1) - (p * logq).sum(axis=1)).mean())
    loss = max(loss, 0.0)
    dlogits = (q - p) / (temperature * n)
    return LossGrad(loss, _backprop(spec, w_student.values, acts, dlogits))


def sgd_step(w: ParameterVector, grad: np.ndarray, lr: float) -> ParameterVector:
    """One step of plain SGD: ``w - lr * grad``, leaving the input untouched."""
    if lr <= 0.0 or not np.isfinite(lr):
        raise ValueError(f"learning rate must be positive, got {lr}")
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != w.values.shape:
        raise DimensionMismatchError(
            f"gradient length {g.shape} does not match weights {w.values.shape}")
    if not np.isfinite(g).all():
        raise DivergenceError("non-finite gradient entries")
    return ParameterVector(w.values - lr * g, w.spec)


def init_weights(spec: NetworkSpec, seed: int) -> ParameterVector:
    """Seeded scaled-uniform initialization, bound 1/sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return ParameterVector(np.concatenate(chunks), spec)


def pairwise_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Sum arrays by recursive halving.

    The summation tree depends only on the number of inputs, so the result is
    bitwise reproducible for a fixed input order.
    """
    if len(arrays) == 0:
        raise ValueError("pairwise_sum of an empty sequence")
    if len(arrays) == 1:
        return np.array(arrays[0], dtype=np.float64)
    mid = len(arrays) // 2
    return pairwise_sum(arrays[:mid]) + pairwise_sum(arrays[mid:])
