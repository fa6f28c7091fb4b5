"""Pluggable client-side optimizers: FedAvg, FedProx and SCAFFOLD.

Each trainer maps (initial weights, client dataset, config) to updated
weights via mini-batch SGD on cross-entropy; FedProx adds a proximal pull
toward the broadcast weights and SCAFFOLD corrects every gradient with
control variates.  The trainer is chosen per run, independently of the
server-side aggregation scheme, so any orchestrator can swap it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .nn import Batch, DivergenceError, ParameterVector, ce_loss_grad, sgd_step

TRAINER_KINDS = ("fedavg", "fedprox", "scaffold")


@dataclass(frozen=True)
class LocalConfig:
    """Client optimizer settings.

    ``prox_mu`` only matters for the fedprox trainer; it is the coefficient
    of the (mu/2)||w - w_init||^2 penalty added to every mini-batch loss.
    """

    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.2
    prox_mu: float = 0.001
    trainer_kind: str = "fedavg"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be non-negative")
        if self.trainer_kind not in TRAINER_KINDS:
            raise ValueError(f"unknown trainer {self.trainer_kind!r}, expected one of {TRAINER_KINDS}")


@dataclass
class ClientState:
    """Per-client persistent state: data slice plus the SCAFFOLD control variate."""

    client_id: int
    data: LabeledDataset
    control_variate: np.ndarray | None = None


@dataclass(frozen=True)
class LocalResult:
    """Outcome of one client's round: updated weights and its sample count."""

    client_id: int
    weights: ParameterVector
    sample_count: int
    delta_control: np.ndarray | None = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def local_train(init: ParameterVector, client: ClientState, cfg: LocalConfig,
                server_control: np.ndarray | None = None, seed: int = 0) -> LocalResult:
    """Train a client model from the broadcast weights.

    fedavg runs ``epochs`` passes of shuffled mini-batch SGD on cross-entropy.
    fedprox adds the gradient ``prox_mu * (w - init)`` to every step.
    scaffold applies the corrected gradient ``g - c_i + c`` and afterwards
    updates the client variate ``c_i <- c_i - c + (init - w_final)/(lr * steps)``,
    reporting ``delta_control = c_i_new - c_i_old`` for the server.

    Deterministic for a fixed seed; the batch order reshuffles every epoch.
    """
    spec = init.spec
    data = client.data
    n = len(data)
    scaffold = cfg.trainer_kind == "scaffold"
    correction = None
    if scaffold:
        if server_control is None:
            raise ValueError("scaffold requires the server control variate")
        if client.control_variate is None:
            raise ValueError(f"client {client.client_id} control variate not initialized")
        if client.control_variate.shape != init.values.shape:
            raise ValueError("control variate length does not match the weight vector")
        correction = server_control - client.control_variate
        if not np.any(correction):
            correction = None  # adding an all-zero vector is a no-op
    prox_mu = cfg.prox_mu if cfg.trainer_kind == "fedprox" and cfg.prox_mu != 0.0 else 0.0

    rng = np.random.default_rng(seed)
    w = ParameterVector(init.values, spec)
    steps = 0
    try:
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                batch = Batch(data.inputs[idx], data.labels[idx])
                lg = ce_loss_grad(spec, w, batch)
                if not np.isfinite(lg.loss):
                    raise DivergenceError(
                        f"client {client.client_id}: non-finite loss at local step {steps}",
                        step=steps, client_id=client.client_id)
                g = lg.grad
                if prox_mu:
                    g = g + prox_mu * (w.values - init.values)
                if correction is not None:
                    g = g + correction
                w = sgd_step(w, g, cfg.lr)
                steps += 1
    except (DivergenceError, ValueError) as err:
        if isinstance(err, DivergenceError) and err.client_id is not None:
            raise
        raise DivergenceError(
            f"client {client.client_id}: diverged at local step {steps}: {err}",
            step=steps, client_id=client.client_id) from err

    delta = None
    if scaffold and steps > 0:
        c_old = client.control_variate
        c_new = (c_old - server_control
                 + (init.values - w.values) / (cfg.lr * steps))
        client.control_variate = c_new
        delta = c_new - c_old
    elif scaffold:
        delta = np.zeros_like(init.values)
    return LocalResult(client.client_id, w, n, delta)
