"""Checkpoint history, temporal-ensemble teachers, and the server KD loop.

Each global model keeps a ring of its most recent post-averaging weight
vectors.  The teacher is the uniform logit average over all models' retained
checkpoints, softmaxed at the distillation temperature; its size is
``num_models * depth`` and therefore independent of how many clients
participate.  Distillation runs SGD on KL(teacher || student) over batches
drawn with replacement from the unlabeled server pool.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .data import UnlabeledPool
from .nn import (Batch, DivergenceError, NetworkSpec, ParameterVector, forward,
                 kl_loss_grad, pairwise_sum, sgd_step, softmax)


@dataclass(frozen=True)
class DistillConfig:
    """Server-side distillation settings."""

    steps: int = 200
    batch_size: int = 256
    lr: float = 0.1
    temperature: float = 4.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("lr and temperature must be positive")


class CheckpointBuffer:
    """Per-model rings of the most recent post-averaging weight vectors.

    Ring entry r (0 = newest) for model k holds the group-k average from r
    rounds ago.  Entries are the pre-distillation averages for every model,
    including the main one.
    """

    def __init__(self, num_models: int, capacity: int):
        if num_models < 1 or capacity < 1:
            raise ValueError("num_models and capacity must be >= 1")
        self.num_models = num_models
        self.capacity = capacity
        self._rings: list[deque[ParameterVector]] = [
            deque(maxlen=capacity) for _ in range(num_models)]
        self._spec: NetworkSpec | None = None

    @property
    def spec(self) -> NetworkSpec | None:
        return self._spec

    def sizes(self) -> list[int]:
        return [len(ring) for ring in self._rings]

    def entry(self, k: int, r: int) -> ParameterVector:
        """Checkpoint of model k from r rounds ago (r = 0 is the newest)."""
        ring = self._rings[k]
        return ring[len(ring) - 1 - r]


def push_checkpoint(buf: CheckpointBuffer, k: int, w: ParameterVector) -> None:
    """Record model k's newest averaged weights, evicting the oldest when full."""
    if not 0 <= k < buf.num_models:
        raise ValueError(f"model index {k} outside [0, {buf.num_models})")
    if buf._spec is None:
        buf._spec = w.spec
    elif w.spec != buf._spec:
        raise ValueError("checkpoint weight length does not match the buffer's network")
    buf._rings[k].append(w)


@dataclass(frozen=True)
class EnsembleSpec:
    """The teacher: member weight vectors with a uniform logit coefficient.

    ``members`` are (model index, rounds-ago, weights) triples; the
    coefficient is 1 / member count.
    """

    members: tuple[tuple[int, int, ParameterVector], ...]
    coefficient: float


def build_ensemble(buf: CheckpointBuffer, depth: int | None = None) -> EnsembleSpec:
    """Assemble the teacher from the buffer.

    The effective depth is the smallest ring size (early rounds have fewer
    checkpoints than the capacity), further capped by ``depth`` when given;
    the coefficient renormalizes to 1/(num_models * effective_depth).
    """
    sizes = buf.sizes()
    if min(sizes) == 0:
        empty = sizes.index(0)
        raise ValueError(f"model {empty} has no checkpoints yet")
    eff = min(sizes)
    if depth is not None:
        if depth < 1:
            raise ValueError("depth must be >= 1")
        eff = min(eff, depth)
    members = tuple((k, r, buf.entry(k, r))
                    for k in range(buf.num_models) for r in range(eff))
    return EnsembleSpec(members=members, coefficient=1.0 / len(members))


def ensemble_from_weights(weights: list[ParameterVector]) -> EnsembleSpec:
    """Uniform ensemble over an explicit member list (e.g. client models)."""
    if not weights:
        raise ValueError("ensemble needs at least one member")
    members = tuple((0, i, w) for i, w in enumerate(weights))
    return EnsembleSpec(members=members, coefficient=1.0 / len(members))


class CostCounter:
    """Counts single-model teacher forward passes actually executed."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n


def ensemble_forward(ens: EnsembleSpec, spec: NetworkSpec, batch: Batch,
                     temperature: float, counter: CostCounter | None = None) -> np.ndarray:
    """Teacher probabilities: softmax of the averaged member logits.

    Logits are averaged before the softmax; members are summed in a fixed
    (model, rounds-ago) order so the output is invariant under permutation
    of the member list.
    """
    if not ens.members:
        raise ValueError("ensemble has no members")
    ordered = sorted(ens.members, key=lambda m: (m[0], m[1]))
    logits = [forward(spec, w, batch) * ens.coefficient for _, _, w in ordered]
    if counter is not None:
        counter.add(len(ordered))
    return softmax(pairwise_sum(logits), temperature)


def distill(student_init: ParameterVector, ens: EnsembleSpec, pool: UnlabeledPool,
            cfg: DistillConfig, seed: int, counter: CostCounter | None = None,
            stop_check=None, check_every: int = 10) -> ParameterVector:
    """SGD on KL(teacher || student) over pool batches; returns the student.

    Teacher weights never change.  Batches are sampled with replacement from
    the pool, seeded.  With ``steps == 0`` the initial weights are returned
    unchanged.  ``stop_check(step, weights) -> bool`` is polled every
    ``check_every`` steps and halts the loop when it returns True.
    """
    if cfg.steps == 0:
        return student_init
    spec = student_init.spec
    if pool.dim != spec.n_inputs:
        raise ValueError(f"pool feature dim {pool.dim} does not match the network input {spec.n_inputs}")
    rng = np.random.default_rng(seed)
    w = student_init
    for step in range(cfg.steps):
        idx = rng.integers(0, len(pool), size=cfg.batch_size)
        batch = Batch(pool.inputs[idx])
        teacher = ensemble_forward(ens, spec, batch, cfg.temperature, counter)
        lg = kl_loss_grad(spec, w, batch, teacher, cfg.temperature)
        if not np.isfinite(lg.loss):
            raise DivergenceError(f"distillation loss diverged at step {step}", step=step)
        w = sgd_step(w, lg.grad, cfg.lr)
        if stop_check is not None and (step + 1) % check_every == 0:
            if stop_check(step + 1, w):
                break
    return w
