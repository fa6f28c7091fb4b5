"""Round planning and within-group weighted averaging.

Participants are sampled per round, reshuffled into groups, and each group's
client updates are averaged by data size.  :func:`run_group_training` is the
secure-aggregation boundary: it trains a round's clients internally and hands
the caller only per-group aggregates, never individual client weights.  The
boundary is a visibility contract here, not cryptography; orchestrators that
inherently need client models (FedDF, client-ensemble evaluation) must use
the explicit :func:`run_group_training_open` escape hatch.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .local_training import ClientState, LocalConfig, LocalResult, local_train
from .nn import ParameterVector, pairwise_sum
from .seeding import derive_seed


@dataclass(frozen=True)
class RoundPlan:
    """One round's sampled participants split into groups.

    ``groups[k]`` lists the client ids training global model k; groups are
    disjoint and their sizes differ by at most one.
    """

    round: int
    groups: tuple[tuple[int, ...], ...]

    def participants(self) -> list[int]:
        return [cid for group in self.groups for cid in group]

    def to_json(self) -> dict:
        return {"round": self.round, "groups": [list(g) for g in self.groups]}


@dataclass(frozen=True)
class GroupAggregate:
    """Data-size weighted average of one group's client weights."""

    weights: ParameterVector
    total_samples: int


def sample_participants(total_clients: int, participation_fraction: float,
                        round: int, seed: int) -> list[int]:
    """Uniform without-replacement draw of this round's participants.

    Deterministic per (round, seed); the same derivation is shared by every
    method so that runs with equal seeds see identical participation.
    """
    if not 0.0 < participation_fraction <= 1.0:
        raise ValueError("participation fraction must lie in (0, 1]")
    if total_clients < 1:
        raise ValueError("total_clients must be >= 1")
    count = max(1, int(round_half(participation_fraction * total_clients)))
    rng = np.random.default_rng(derive_seed(seed, "participants", round))
    chosen = rng.choice(total_clients, size=count, replace=False)
    return sorted(int(c) for c in chosen)


def round_half(x: float) -> int:
    """round-half-away-from-zero, stable across Python's banker's rounding."""
    return int(np.floor(x + 0.5))


def assign_groups(participants: Sequence[int], num_models: int, round: int,
                  seed: int) -> RoundPlan:
    """Shuffle participants and split them into ``num_models`` groups.

    When the count does not divide evenly the leading groups (main group
    first) receive one extra member.
    """
    if num_models <= 0:
        raise ValueError("number of groups must be positive")
    if len(participants) < num_models:
        raise ValueError(
            f"cannot populate {num_models} groups from {len(participants)} participants")
    rng = np.random.default_rng(derive_seed(seed, "groups", round))
    order = [participants[i] for i in rng.permutation(len(participants))]
    base, extra = divmod(len(order), num_models)
    groups = []
    off = 0
    for k in range(num_models):
        size = base + (1 if k < extra else 0)
        groups.append(tuple(order[off:off + size]))
        off += size
    return RoundPlan(round=round, groups=tuple(groups))


def group_average(results: Sequence[LocalResult]) -> GroupAggregate:
    """Average client weights with coefficients |X_i| / sum_j |X_j|.

    Inputs are summed in ascending client_id with pairwise summation, so the
    result is invariant under permutation of the argument list.  The average
    is formed around the first member as a reference point, which keeps the
    output exactly equal to the inputs when they all coincide.
    """
    if not results:
        raise ValueError("group_average of an empty result list")
    ordered = sorted(results, key=lambda r: r.client_id)
    spec = ordered[0].weights.spec
    length = len(ordered[0].weights)
    for r in ordered:
        if len(r.weights) != length:
            raise ValueError("client weight vectors have differing lengths")
    total = sum(r.sample_count for r in ordered)
    if total <= 0:
        raise ValueError("total sample count must be positive")
    ref = ordered[0].weights.values
    deltas = [(r.sample_count / total) * (r.weights.values - ref) for r in ordered]
    avg = ref + pairwise_sum(deltas)
    return GroupAggregate(ParameterVector(avg, spec), total)


def _train_round(plan: RoundPlan, group_weights: Sequence[ParameterVector],
                 clients: Mapping[int, ClientState], cfg: LocalConfig,
                 server_control: np.ndarray | None, seed: int,
                 max_workers: int = 0) -> list[list[LocalResult]]:
    """Run every participant's local training, grouped by the plan.

    Clients are independent; with ``max_workers > 1`` they run on a thread
    pool.  Results are identical either way because each client draws from
    its own derived seed and aggregation sorts by client id.
    """
    if len(group_weights) != len(plan.groups):
        raise ValueError("one broadcast weight vector per group is required")
    jobs = [(k, cid) for k, group in enumerate(plan.groups) for cid in group]

    def run_one(job: tuple[int, int]) -> tuple[int, LocalResult]:
        k, cid = job
        result = local_train(group_weights[k], clients[cid], cfg, server_control,
                             derive_seed(seed, "train", plan.round, cid))
        return k, result

    by_group: list[list[LocalResult]] = [[] for _ in plan.groups]
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(run_one, jobs))
    else:
        outcomes = [run_one(job) for job in jobs]
    for k, result in outcomes:
        by_group[k].append(result)
    return by_group


def _sum_control_deltas(results: list[list[LocalResult]]) -> np.ndarray | None:
    deltas = sorted(
        ((r.client_id, r.delta_control) for group in results for r in group
         if r.delta_control is not None),
        key=lambda t: t[0])
    if not deltas:
        return None
    return pairwise_sum([d for _, d in deltas])


def run_group_training(plan: RoundPlan, group_weights: Sequence[ParameterVector],
                       clients: Mapping[int, ClientState], cfg: LocalConfig,
                       server_control: np.ndarray | None = None, seed: int = 0,
                       max_workers: int = 0) -> tuple[list[GroupAggregate], np.ndarray | None]:
    """Secure boundary: train a round and return only per-group aggregates.

    The second return value is the summed SCAFFOLD control delta over all
    participants (None for other trainers); like the weight average it is an
    aggregate, so individual client updates never cross this boundary.
    """
    results = _train_round(plan, group_weights, clients, cfg, server_control,
                           seed, max_workers)
    aggregates = [group_average(group) for group in results]
    return aggregates, _sum_control_deltas(results)


def run_group_training_open(plan: RoundPlan, group_weights: Sequence[ParameterVector],
                            clients: Mapping[int, ClientState], cfg: LocalConfig,
                            server_control: np.ndarray | None = None, seed: int = 0,
                            max_workers: int = 0,
                            ) -> tuple[list[GroupAggregate], list[list[LocalResult]], np.ndarray | None]:
    """Like :func:`run_group_training` but also exposes the client results.

    Only for methods whose definition requires individual client models; it
    forfeits the privacy boundary.
    """
    results = _train_round(plan, group_weights, clients, cfg, server_control,
                           seed, max_workers)
    aggregates = [group_average(group) for group in results]
    return aggregates, results, _sum_control_deltas(results)
