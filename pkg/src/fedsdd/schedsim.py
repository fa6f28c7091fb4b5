"""Discrete-event round scheduler under limited client availability.

Models the timing of a federated round, not its numerics.  Two disciplines
are compared:

* sequential: every client training of round t finishes, then the server
  runs distillation, then round t+1 may begin (the pattern of existing
  distillation-based methods);
* parallel: group k's round-(t+1) training starts as soon as its own
  round-t aggregate exists; only the main group additionally waits for the
  round-t distillation, which runs on the server concurrently with client
  work.

Clients are constrained by an :class:`AvailabilityTrace`: either explicit
availability windows per client, or a "rotation" where at most one client
can train at any instant and ties go to lower rounds, then lower groups
(the main group first), then lower client ids.  Time is integer-valued and
everything is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence


class InfeasibleTraceError(RuntimeError):
    """A required client training can never be placed in the trace."""

    def __init__(self, message: str, *, client: int, round: int):
        super().__init__(message)
        self.client = client
        self.round = round


@dataclass(frozen=True)
class CostModel:
    """Logical time units per task.

    ``train_cost`` is either one int for all clients or a per-client mapping;
    ``kd_cost`` is the duration of one server distillation phase.
    """

    train_cost: int | Mapping[int, int] = 1
    kd_cost: int = 1

    def __post_init__(self):
        if isinstance(self.train_cost, int):
            if self.train_cost < 0:
                raise ValueError("train_cost must be >= 0")
        else:
            if any(c < 0 for c in self.train_cost.values()):
                raise ValueError("per-client costs must be >= 0")
        if self.kd_cost < 0:
            raise ValueError("kd_cost must be >= 0")

    def client_cost(self, client: int) -> int:
        if isinstance(self.train_cost, int):
            return self.train_cost
        return int(self.train_cost[client])


@dataclass(frozen=True)
class Interval:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ValueError(f"bad interval [{self.start}, {self.end})")


@dataclass(frozen=True)
class AvailabilityTrace:
    """Client availability: per-client windows, or a one-at-a-time rotation.

    ``windows is None`` selects rotation mode: at most one client trains at
    any time, arbitration by (round, group, client id).  Window lists must be
    sorted and non-overlapping per client.
    """

    n_clients: int
    windows: tuple[tuple[Interval, ...], ...] | None = None

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("trace needs at least one client")
        if self.windows is not None:
            if len(self.windows) != self.n_clients:
                raise ValueError("one window list per client required")
            for c, wins in enumerate(self.windows):
                for a, b in zip(wins, wins[1:]):
                    if b.start < a.end:
                        raise ValueError(f"client {c} windows overlap or are unsorted")

    @classmethod
    def rotation(cls, n_clients: int) -> "AvailabilityTrace":
        return cls(n_clients=n_clients, windows=None)

    @classmethod
    def from_windows(cls, windows: Sequence[Sequence[tuple[int, int]]]) -> "AvailabilityTrace":
        packed = tuple(tuple(Interval(int(s), int(e)) for s, e in wins) for wins in windows)
        return cls(n_clients=len(packed), windows=packed)


@dataclass(frozen=True)
class ScheduledEvent:
    actor: str
    task: str
    start: int
    end: int
    kind: str = "train"   # "train" or "kd"
    round: int = 0
    client: int | None = None


@dataclass
class Schedule:
    """A feasible assignment of all tasks to actors and times."""

    events: list[ScheduledEvent]
    round_makespans: list[int]
    makespan: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["actor", "task", "start", "end"])
            for ev in sorted(self.events, key=lambda e: (e.start, e.actor)):
                writer.writerow([ev.actor, ev.task, ev.start, ev.end])


def static_groups(n_clients: int, num_models: int) -> list[list[int]]:
    """Contiguous split of client ids into groups; extras go to lower groups.

    Client 0 always lands in group 0, so the main model trains on the first
    client as in the reference rotation scenario.
    """
    if not 1 <= num_models <= n_clients:
        raise ValueError("need 1 <= num_models <= n_clients")
    base, extra = divmod(n_clients, num_models)
    groups = []
    off = 0
    for k in range(num_models):
        size = base + (1 if k < extra else 0)
        groups.append(list(range(off, off + size)))
        off += size
    return groups


def _group_of(groups: Sequence[Sequence[int]]) -> dict[int, int]:
    return {c: k for k, grp in enumerate(groups) for c in grp}


def _train_ready(r: int, k: int, parallel: bool, agg_end: dict, kd_end: dict) -> int | None:
    """Earliest time a round-r training of group k may start, or None if unknown."""
    if r == 1:
        return 0
    if not parallel:
        return kd_end.get(r - 1)
    prev_agg = agg_end.get((r - 1, k))
    if prev_agg is None:
        return None
    if k == 0:
        prev_kd = kd_end.get(r - 1)
        if prev_kd is None:
            return None
        return max(prev_agg, prev_kd)
    return prev_agg


def _fit_in_windows(wins: Sequence[Interval], ready: int, dur: int,
                    client: int, rnd: int) -> int:
    if dur == 0:
        return ready
    for win in wins:
        start = max(win.start, ready)
        if start + dur <= win.end:
            return start
    raise InfeasibleTraceError(
        f"client {client} has no window of length {dur} at or after t={ready} "
        f"(round {rnd})", client=client, round=rnd)


def _simulate(rounds: int, groups: Sequence[Sequence[int]],
              trace: AvailabilityTrace, cost: CostModel, parallel: bool) -> Schedule:
    group_of = _group_of(groups)
    n = trace.n_clients
    if sorted(group_of) != list(range(n)):
        raise ValueError("groups must cover exactly the trace's clients")
    events: list[ScheduledEvent] = []
    train_end: dict[tuple[int, int], int] = {}
    agg_end: dict[tuple[int, int], int] = {}
    kd_end: dict[int, int] = {}

    def place(r: int, c: int, start: int) -> None:
        dur = cost.client_cost(c)
        end = start + dur
        events.append(ScheduledEvent(actor=f"client_{c}", task=f"train_r{r}_c{c}",
                                     start=start, end=end, kind="train",
                                     round=r, client=c))
        train_end[(r, c)] = end
        k = group_of[c]
        if all((r, m) in train_end for m in groups[k]):
            agg_end[(r, k)] = max(train_end[(r, m)] for m in groups[k])

    def resolve_kds() -> None:
        for r in range(1, rounds + 1):
            if r in kd_end:
                continue
            if all((r, k) in agg_end for k in range(len(groups))):
                start = max(agg_end[(r, k)] for k in range(len(groups)))
                kd_end[r] = start + cost.kd_cost
                events.append(ScheduledEvent(actor="server", task=f"kd_r{r}",
                                             start=start, end=kd_end[r],
                                             kind="kd", round=r))
            else:
                break

    pending = [(r, c) for r in range(1, rounds + 1) for c in range(n)]
    if trace.windows is None:
        channel_free = 0
        while pending:
            resolve_kds()
            candidates = []
            for r, c in pending:
                ready = _train_ready(r, group_of[c], parallel, agg_end, kd_end)
                if ready is not None:
                    start = max(ready, channel_free)
                    candidates.append((start, r, group_of[c], c))
            if not candidates:
                raise AssertionError("scheduling deadlock; precedence graph is acyclic")
            start, r, _, c = min(candidates)
            place(r, c, start)
            channel_free = start + cost.client_cost(c)
            pending.remove((r, c))
        resolve_kds()
    else:
        for r in range(1, rounds + 1):
            for c in range(n):
                ready = _train_ready(r, group_of[c], parallel, agg_end, kd_end)
                assert ready is not None
                last = train_end.get((r - 1, c))
                if last is not None:
                    ready = max(ready, last)
                start = _fit_in_windows(trace.windows[c], ready,
                                        cost.client_cost(c), c, r)
                place(r, c, start)
            resolve_kds()

    completions = [kd_end[r] for r in range(1, rounds + 1)]
    makespans = [completions[0]] + [b - a for a, b in zip(completions, completions[1:])]
    return Schedule(events=events, round_makespans=makespans, makespan=completions[-1])


def simulate_sequential(rounds: int, clients_per_round: int,
                        trace: AvailabilityTrace, cost: CostModel) -> Schedule:
    """Existing-method timing: train everyone, then distill, then next round."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if clients_per_round != trace.n_clients:
        raise ValueError("clients_per_round must match the trace's client count")
    groups = [list(range(trace.n_clients))]
    return _simulate(rounds, groups, trace, cost, parallel=False)


def simulate_fedsdd_parallel(rounds: int, num_models: int,
                             trace: AvailabilityTrace, cost: CostModel) -> Schedule:
    """Overlapped timing: server KD runs concurrently with non-main groups."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    groups = static_groups(trace.n_clients, num_models)
    return _simulate(rounds, groups, trace, cost, parallel=True)


def teacher_cost(method: str, participants: int, num_models: int,
                 ensemble_depth: int, per_model_cost: float) -> float:
    """Teacher forward cost of one distillation batch.

    feddf scales with the participant count; fedsdd with the (fixed) number
    of global models times the checkpoint depth.
    """
    if per_model_cost < 0:
        raise ValueError("per_model_cost must be >= 0")
    if method == "feddf":
        if participants < 1:
            raise ValueError("participants must be >= 1")
        return participants * per_model_cost
    if method == "fedsdd":
        if num_models < 1 or ensemble_depth < 1:
            raise ValueError("num_models and ensemble_depth must be >= 1")
        return num_models * ensemble_depth * per_model_cost
    raise ValueError(f"unknown method {method!r}")


def check_schedule(schedule: Schedule, rounds: int, trace: AvailabilityTrace,
                   cost: CostModel, num_models: int, parallel: bool) -> list[str]:
    """Independent feasibility checker; replays the event list.

    Recomputes precedence, availability and duration constraints straight
    from the events, without reusing the simulator's loop.  Returns a list
    of violation descriptions (empty when the schedule is feasible).
    """
    problems: list[str] = []
    groups = (static_groups(trace.n_clients, num_models) if parallel
              else [list(range(trace.n_clients))])
    group_of = _group_of(groups)
    trains = {(e.round, e.client): e for e in schedule.events if e.kind == "train"}
    kds = {e.round: e for e in schedule.events if e.kind == "kd"}

    for r in range(1, rounds + 1):
        if r not in kds:
            problems.append(f"missing kd event for round {r}")
        for c in range(trace.n_clients):
            if (r, c) not in trains:
                problems.append(f"missing training of client {c} round {r}")
    if problems:
        return problems

    for (r, c), ev in trains.items():
        if ev.end - ev.start != cost.client_cost(c):
            problems.append(f"train r{r} c{c} has wrong duration")
    for r, ev in kds.items():
        if ev.end - ev.start != cost.kd_cost:
            problems.append(f"kd r{r} has wrong duration")

    agg = {(r, k): max(trains[(r, c)].end for c in grp)
           for r in range(1, rounds + 1) for k, grp in enumerate(groups)}
    for r, ev in kds.items():
        need = max(agg[(r, k)] for k in range(len(groups)))
        if ev.start < need:
            problems.append(f"kd r{r} starts at {ev.start} before aggregates at {need}")
    for (r, c), ev in trains.items():
        if r == 1:
            continue
        k = group_of[c]
        if parallel:
            need = agg[(r - 1, k)]
            if k == 0:
                need = max(need, kds[r - 1].end)
        else:
            need = kds[r - 1].end
        if ev.start < need:
            problems.append(f"train r{r} c{c} starts at {ev.start} before its precedence at {need}")

    # Resource constraints.
    busy = sorted((e for e in trains.values() if e.end > e.start),
                  key=lambda e: e.start)
    if trace.windows is None:
        for a, b in zip(busy, busy[1:]):
            if b.start < a.end:
                problems.append(f"rotation violated: {a.task} overlaps {b.task}")
    else:
        for ev in busy:
            wins = trace.windows[ev.client]
            if not any(w.start <= ev.start and ev.end <= w.end for w in wins):
                problems.append(f"{ev.task} lies outside client {ev.client}'s windows")
        for c in range(trace.n_clients):
            mine = sorted((e for e in busy if e.client == c), key=lambda e: e.start)
            for a, b in zip(mine, mine[1:]):
                if b.start < a.end:
                    problems.append(f"client {c} runs {a.task} and {b.task} simultaneously")
    server = sorted((e for e in kds.values() if e.end > e.start), key=lambda e: e.start)
    for a, b in zip(server, server[1:]):
        if b.start < a.end:
            problems.append(f"server overlaps {a.task} and {b.task}")
    return problems
