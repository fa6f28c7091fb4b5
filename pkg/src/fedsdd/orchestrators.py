"""Full training loops: FedSDD, weight-averaging baselines, FedDF, ablations.

Every method runs through one engine so that degenerate configurations are
trivially comparable: FedSDD with a single global model, a single checkpoint
and zero distillation steps follows exactly the FedAvg code path.  Per round
the engine samples participants, reshuffles them into groups, trains each
group behind the aggregation boundary, records the fresh group averages as
checkpoints, builds the teacher ensemble, optionally distills, and evaluates.

Only FedDF and the client-ensemble evaluation mode pull individual client
models across the boundary; all other methods consume group aggregates only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .aggregation import (GroupAggregate, RoundPlan, assign_groups, round_half,
                          run_group_training, run_group_training_open,
                          sample_participants)
from .data import DataBundle, LabeledDataset, dirichlet_partition
from .distillation import (CheckpointBuffer, CostCounter, DistillConfig,
                           EnsembleSpec, build_ensemble, distill,
                           ensemble_from_weights, ensemble_forward,
                           push_checkpoint)
from .local_training import ClientState, LocalConfig
from .nn import (Batch, NetworkSpec, ParameterVector, forward, init_weights,
                 kl_loss_grad)
from .seeding import derive_seed, spawn_rng

METHODS = ("fedavg", "fedprox", "scaffold", "feddf", "fedsdd",
           "ablation_basic", "ablation_warmup", "ensemble_eval")

ENSEMBLE_STRATEGIES = ("aggregated", "clients", "all")

_EARLY_STOP_PATIENCE = 5
_EARLY_STOP_INTERVAL = 10


class RoundError(RuntimeError):
    """A failure inside the training loop, tagged with round and phase."""

    def __init__(self, message: str, *, round: int, phase: str):
        super().__init__(message)
        self.round = round
        self.phase = phase


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of one run; the metrics log is a pure function of this."""

    method: str = "fedsdd"
    rounds: int = 30
    num_models: int = 4
    ensemble_rounds: int = 2
    total_clients: int = 20
    participation: float = 0.4
    alpha: float = 0.1
    seed: int = 1
    shared_init: bool = False
    warmup_rounds: int = 0
    ensemble_strategy: str = "all"
    drop_worst: bool = False
    early_stop: bool = False
    hidden_sizes: tuple[int, ...] = (64,)
    activation: str = "relu"
    deterministic: bool = True
    max_workers: int = 0
    local: LocalConfig = field(default_factory=LocalConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.rounds < 1 or self.num_models < 1 or self.ensemble_rounds < 1:
            raise ValueError("rounds, num_models and ensemble_rounds must be >= 1")
        if self.total_clients < 1:
            raise ValueError("total_clients must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.warmup_rounds < 0:
            raise ValueError("warmup_rounds must be >= 0")
        if self.ensemble_strategy not in ENSEMBLE_STRATEGIES:
            raise ValueError(f"ensemble_strategy must be one of {ENSEMBLE_STRATEGIES}")
        if self.max_workers < 0:
            raise ValueError("max_workers must be >= 0")


@dataclass
class MetricsRecord:
    """One row of the per-round run log."""

    round: int
    slot_accuracy: list[float]
    ensemble_accuracy: float
    ensemble_size: int
    probe_kl_before: float
    probe_kl_after: float
    teacher_cost_per_batch: int
    teacher_forwards: int
    phase_seconds: dict[str, float]
    extras: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "slot_accuracy": self.slot_accuracy,
            "ensemble_accuracy": self.ensemble_accuracy,
            "ensemble_size": self.ensemble_size,
            "probe_kl_before": self.probe_kl_before,
            "probe_kl_after": self.probe_kl_after,
            "teacher_cost_per_batch": self.teacher_cost_per_batch,
            "teacher_forwards": self.teacher_forwards,
            "phase_seconds": self.phase_seconds,
            "extras": self.extras,
        }


@dataclass
class RunState:
    """Live state of a run; slot 0 is the main global model."""

    config: ExperimentConfig
    spec: NetworkSpec
    global_weights: list[ParameterVector]
    buffer: CheckpointBuffer
    clients: dict[int, ClientState]
    server_control: np.ndarray | None
    metrics: list[MetricsRecord] = field(default_factory=list)
    plans: list[RoundPlan] = field(default_factory=list)

    def final_accuracy(self) -> float:
        return self.metrics[-1].slot_accuracy[0]


def evaluate(spec: NetworkSpec, model: ParameterVector | EnsembleSpec,
             test: LabeledDataset) -> float:
    """Top-1 accuracy of a single model or an ensemble on a labeled set.

    Predictions take the argmax of the logits (or ensemble probabilities);
    ties resolve to the lowest class index.
    """
    batch = Batch(test.inputs)
    if isinstance(model, EnsembleSpec):
        scores = ensemble_forward(model, spec, batch, 1.0)
    else:
        scores = forward(spec, model, batch)
    preds = np.argmax(scores, axis=1)
    return float((preds == test.labels).mean())


@dataclass(frozen=True)
class _Policy:
    distill_main: bool = False
    distill_all: bool = False
    warmup: int = 0
    client_teacher: bool = False
    sweep: str | None = None

    @property
    def needs_client_models(self) -> bool:
        return self.client_teacher or self.sweep in ("clients", "all")


def _normalize(cfg: ExperimentConfig) -> tuple[ExperimentConfig, _Policy]:
    m = cfg.method
    if m in ("fedavg", "fedprox", "scaffold"):
        trainer = "fedavg" if m == "fedavg" else m
        cfg = replace(cfg, num_models=1, ensemble_rounds=1,
                      local=replace(cfg.local, trainer_kind=trainer),
                      distill=replace(cfg.distill, steps=0))
        return cfg, _Policy()
    if m == "feddf":
        cfg = replace(cfg, num_models=1, ensemble_rounds=1)
        return cfg, _Policy(distill_main=True, client_teacher=True)
    if m == "fedsdd":
        return cfg, _Policy(distill_main=True)
    if m == "ablation_basic":
        return cfg, _Policy(distill_all=True)
    if m == "ablation_warmup":
        return cfg, _Policy(distill_all=True, warmup=cfg.warmup_rounds)
    if m == "ensemble_eval":
        cfg = replace(cfg, distill=replace(cfg.distill, steps=0))
        return cfg, _Policy(sweep=cfg.ensemble_strategy)
    raise ValueError(f"unknown method {m!r}")


def _flat_results(client_results) -> list:
    flat = [r for group in client_results for r in group]
    flat.sort(key=lambda r: r.client_id)
    return flat


def run_experiment(cfg: ExperimentConfig, bundle: DataBundle,
                   on_round: Callable | None = None) -> RunState:
    """Run the configured method end to end and return the final state."""
    cfg, policy = _normalize(cfg)
    expected = max(1, round_half(cfg.participation * cfg.total_clients))
    if expected < cfg.num_models:
        raise ValueError(
            f"{expected} participants per round cannot populate {cfg.num_models} groups")
    if policy.client_teacher and (cfg.drop_worst or cfg.early_stop) and bundle.server_val is None:
        raise ValueError("drop_worst/early_stop need a server validation split "
                         "(set data.server_val_fraction > 0)")
    return _engine(cfg, policy, bundle, on_round)


def run_fedavg(cfg: ExperimentConfig, bundle: DataBundle, on_round=None) -> RunState:
    return run_experiment(replace(cfg, method="fedavg"), bundle, on_round)


def run_fedprox(cfg: ExperimentConfig, bundle: DataBundle, on_round=None) -> RunState:
    return run_experiment(replace(cfg, method="fedprox"), bundle, on_round)


def run_scaffold(cfg: ExperimentConfig, bundle: DataBundle, on_round=None) -> RunState:
    return run_experiment(replace(cfg, method="scaffold"), bundle, on_round)


def run_fedsdd(cfg: ExperimentConfig, bundle: DataBundle, on_round=None) -> RunState:
    return run_experiment(replace(cfg, method="fedsdd"), bundle, on_round)


def run_feddf(cfg: ExperimentConfig, bundle: DataBundle,
              drop_worst: bool | None = None, early_stop: bool | None = None,
              on_round=None) -> RunState:
    cfg = replace(cfg, method="feddf",
                  drop_worst=cfg.drop_worst if drop_worst is None else drop_worst,
                  early_stop=cfg.early_stop if early_stop is None else early_stop)
    return run_experiment(cfg, bundle, on_round)


def run_ablation(cfg: ExperimentConfig, bundle: DataBundle, variant: str,
                 on_round=None) -> RunState:
    """Distillation-scheme ablations: basic, warmup, or diversity (= fedsdd)."""
    mapping = {"basic": "ablation_basic", "warmup": "ablation_warmup",
               "diversity": "fedsdd"}
    if variant not in mapping:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return run_experiment(replace(cfg, method=mapping[variant]), bundle, on_round)


def run_ensemble_eval(cfg: ExperimentConfig, bundle: DataBundle,
                      strategy: str | None = None, on_round=None) -> RunState:
    cfg = replace(cfg, method="ensemble_eval",
                  ensemble_strategy=strategy or cfg.ensemble_strategy)
    return run_experiment(cfg, bundle, on_round)


def _engine(cfg: ExperimentConfig, policy: _Policy, bundle: DataBundle,
            on_round: Callable | None) -> RunState:
    spec = NetworkSpec((bundle.train.dim, *cfg.hidden_sizes, bundle.train.class_count),
                       cfg.activation)
    partition = dirichlet_partition(bundle.train, cfg.total_clients, cfg.alpha,
                                    derive_seed(cfg.seed, "partition"))
    clients = {
        cid: ClientState(cid, bundle.train.subset(partition.client_indices[cid]))
        for cid in range(cfg.total_clients)
    }
    global_weights = [
        init_weights(spec, derive_seed(cfg.seed, "init", 0 if cfg.shared_init else k))
        for k in range(cfg.num_models)
    ]
    buffer = CheckpointBuffer(cfg.num_models, cfg.ensemble_rounds)
    scaffold = cfg.local.trainer_kind == "scaffold"
    server_control = np.zeros(spec.param_count) if scaffold else None

    probe_rng = spawn_rng(cfg.seed, "probe")
    probe_idx = probe_rng.integers(0, len(bundle.pool), size=cfg.distill.batch_size)
    probe = Batch(bundle.pool.inputs[probe_idx])
    tau = cfg.distill.temperature

    state = RunState(config=cfg, spec=spec, global_weights=global_weights,
                     buffer=buffer, clients=clients, server_control=server_control)

    for t in range(1, cfg.rounds + 1):
        timings: dict[str, float] = {}
        tick = time.perf_counter()

        phase = "plan"
        try:
            participants = sample_participants(cfg.total_clients, cfg.participation,
                                               t, cfg.seed)
            plan = assign_groups(participants, cfg.num_models, t, cfg.seed)
            if scaffold:
                for cid in plan.participants():
                    if clients[cid].control_variate is None:
                        clients[cid].control_variate = np.zeros(spec.param_count)
            timings["plan"] = time.perf_counter() - tick
            tick = time.perf_counter()

            phase = "train"
            client_results = None
            if policy.needs_client_models:
                aggregates, client_results, delta = run_group_training_open(
                    plan, state.global_weights, clients, cfg.local,
                    state.server_control, cfg.seed, cfg.max_workers)
            else:
                aggregates, delta = run_group_training(
                    plan, state.global_weights, clients, cfg.local,
                    state.server_control, cfg.seed, cfg.max_workers)
            if scaffold and delta is not None:
                state.server_control = state.server_control + delta / cfg.total_clients
            for k, agg in enumerate(aggregates):
                push_checkpoint(buffer, k, agg.weights)
            timings["train"] = time.perf_counter() - tick
            tick = time.perf_counter()

            phase = "distill"
            teacher = _build_teacher(cfg, policy, spec, buffer, client_results, bundle)
            teacher_probe_probs = ensemble_forward(teacher, spec, probe, tau)
            probe_before = kl_loss_grad(spec, aggregates[0].weights, probe,
                                        teacher_probe_probs, tau).loss
            new_weights = [agg.weights for agg in aggregates]
            counter = CostCounter()
            if cfg.distill.steps > 0 and t > policy.warmup and \
                    (policy.distill_main or policy.distill_all):
                slots = range(cfg.num_models) if policy.distill_all else (0,)
                for k in slots:
                    new_weights[k] = _distill_slot(cfg, policy, spec, bundle, teacher,
                                                   new_weights[k], t, k, counter)
            if new_weights[0] is aggregates[0].weights:
                probe_after = probe_before
            else:
                probe_after = kl_loss_grad(spec, new_weights[0], probe,
                                           teacher_probe_probs, tau).loss
            timings["distill"] = time.perf_counter() - tick
            tick = time.perf_counter()

            phase = "evaluate"
            slot_acc = [evaluate(spec, w, bundle.test) for w in new_weights]
            ens_acc = evaluate(spec, teacher, bundle.test)
            extras = _sweep_extras(cfg, policy, spec, buffer, client_results, bundle)
            timings["evaluate"] = time.perf_counter() - tick
        except Exception as err:
            raise RoundError(f"round {t}, phase {phase}: {err}",
                             round=t, phase=phase) from err

        if cfg.deterministic:
            timings = {k: 0.0 for k in timings}
        record = MetricsRecord(
            round=t,
            slot_accuracy=slot_acc,
            ensemble_accuracy=ens_acc,
            ensemble_size=len(teacher.members),
            probe_kl_before=probe_before,
            probe_kl_after=probe_after,
            teacher_cost_per_batch=len(teacher.members),
            teacher_forwards=counter.count,
            phase_seconds=timings,
        )
        record.extras = extras
        state.global_weights = new_weights
        state.metrics.append(record)
        state.plans.append(plan)
        if on_round is not None:
            on_round(state, record, aggregates, teacher)
    return state


def _build_teacher(cfg: ExperimentConfig, policy: _Policy, spec: NetworkSpec,
                   buffer: CheckpointBuffer, client_results,
                   bundle: DataBundle) -> EnsembleSpec:
    if not policy.client_teacher:
        return build_ensemble(buffer)
    models = [(r.client_id, r.weights) for r in _flat_results(client_results)]
    if cfg.drop_worst and len(models) > 1:
        val_acc = [evaluate(spec, w, bundle.server_val) for _, w in models]
        worst = int(np.argmin(val_acc))
        models = models[:worst] + models[worst + 1:]
    return ensemble_from_weights([w for _, w in models])


def _distill_slot(cfg: ExperimentConfig, policy: _Policy, spec: NetworkSpec,
                  bundle: DataBundle, teacher: EnsembleSpec,
                  student: ParameterVector, t: int, k: int,
                  counter: CostCounter) -> ParameterVector:
    stop_check = None
    best: dict = {"acc": -1.0, "w": None, "bad": 0}
    if policy.client_teacher and cfg.early_stop:
        val = bundle.server_val

        def stop_check(step: int, w: ParameterVector) -> bool:
            acc = evaluate(spec, w, val)
            if acc > best["acc"]:
                best.update(acc=acc, w=w, bad=0)
            else:
                best["bad"] += 1
            return best["bad"] >= _EARLY_STOP_PATIENCE

    out = distill(student, teacher, bundle.pool, cfg.distill,
                  derive_seed(cfg.seed, "distill", t, k), counter,
                  stop_check=stop_check, check_every=_EARLY_STOP_INTERVAL)
    if best["w"] is not None:
        final_acc = evaluate(spec, out, bundle.server_val)
        if best["acc"] >= final_acc:
            out = best["w"]
    return out


def _sweep_extras(cfg: ExperimentConfig, policy: _Policy, spec: NetworkSpec,
                  buffer: CheckpointBuffer, client_results,
                  bundle: DataBundle) -> dict[str, float]:
    if policy.sweep is None:
        return {}
    extras: dict[str, float] = {}
    if policy.sweep in ("aggregated", "all"):
        for depth in (1, 2, 4):
            if depth <= cfg.ensemble_rounds:
                ens = build_ensemble(buffer, depth=depth)
                extras[f"agg_ensemble_acc_r{depth}"] = evaluate(spec, ens, bundle.test)
    if policy.sweep in ("clients", "all"):
        weights = [r.weights for r in _flat_results(client_results)]
        extras["client_ensemble_acc"] = evaluate(
            spec, ensemble_from_weights(weights), bundle.test)
    return extras
