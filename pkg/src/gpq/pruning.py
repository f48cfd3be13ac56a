"""Gradual query pruning.

Every ``interval`` iterations the queries with the worst recorded score
since the previous prune event are deleted, together with their reference
points and optimizer moments, until ``final_queries`` remain.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gpq.detector import DetectorModel, Prediction, QueryBank, Scene
from gpq.matching import LossConfig
from gpq.training import AdamW, OptimizerConfig, TrainLog, fit

REF_POINTS = "bank.ref_points"


class Criterion(str, enum.Enum):
    LOWEST_SCORE = "lowest"     # default
    HIGHEST_SCORE = "highest"   # ablation: drop the most confident
    ASSIGNER_COST = "cost"      # ablation: drop by matching cost


@dataclass(frozen=True)
class PruneSchedule:
    total_iterations: int
    initial_queries: int
    final_queries: int
    interval: int
    per_event_k: int = 1
    criterion: Criterion = Criterion.LOWEST_SCORE
    one_shot: bool = False

    @property
    def num_events(self) -> int:
        if self.one_shot:
            return 1
        return math.ceil((self.initial_queries - self.final_queries) / self.per_event_k)

    @property
    def last_event(self) -> int:
        return self.num_events * self.interval

    def validate(self) -> None:
        if not 1 <= self.final_queries < self.initial_queries:
            raise ValueError(f"need 1 <= final_queries < initial_queries, got "
                             f"{self.final_queries} and {self.initial_queries}")
        if self.interval < 1:
            raise ValueError("interval must be at least 1")
        if self.per_event_k < 1:
            raise ValueError("per_event_k must be at least 1")
        if self.last_event > self.total_iterations:
            raise ValueError(f"{self.num_events} prune events every {self.interval} iterations "
                             f"do not fit in {self.total_iterations} iterations")

    @classmethod
    def default(cls, total_iterations: int, initial_queries: int, final_queries: int, per_event_k: int = 1,
                criterion: Criterion = Criterion.LOWEST_SCORE, one_shot: bool = False,
                budget: float = 0.25) -> "PruneSchedule":
        """Interval chosen so pruning finishes within the first ``budget`` of training."""
        events = 1 if one_shot else math.ceil((initial_queries - final_queries) / per_event_k)
        interval = max(1, int(budget * total_iterations) // events)
        return cls(total_iterations, initial_queries, final_queries, interval, per_event_k, criterion, one_shot)


@dataclass
class ScoreLedger:
    """Per-query sums of per-iteration aggregates since the last prune event."""

    keys: list[int]
    sums: np.ndarray = None
    count: int = 0

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros(len(self.keys))

    def add(self, values: np.ndarray) -> None:
        self.sums += values
        self.count += 1

    def means(self) -> np.ndarray:
        if not self.count:
            raise ValueError("no scores recorded since the last prune event")
        return self.sums / self.count

    def reset(self, keys: Sequence[int]) -> None:
        self.keys = list(keys)
        self.sums = np.zeros(len(self.keys))
        self.count = 0


def _check_rows(ledger: ScoreLedger, nq: int, query_ids) -> None:
    if nq != len(ledger.keys) or (query_ids is not None and list(query_ids) != ledger.keys):
        raise ValueError("prediction rows do not match the ledger's alive queries")


def record_scores(ledger: ScoreLedger, pred: Prediction) -> ScoreLedger:
    """Add this iteration's score per query: max over classes, mean over the batch."""
    s = pred.scores.data.astype(np.float64)
    _check_rows(ledger, s.shape[-2], pred.query_ids)
    per_query = s.max(axis=-1)
    if per_query.ndim == 2:
        per_query = per_query.mean(axis=0)
    ledger.add(per_query)
    return ledger


def record_costs(ledger: ScoreLedger, matches) -> ScoreLedger:
    """Add this iteration's assigner cost per query.

    A matched query contributes its matching cost; an unmatched one the
    worst matched cost in the batch.  Values are averaged over the batch.
    """
    nq = matches[0][1].shape[0]
    _check_rows(ledger, nq, None)
    matched = [c[q, g] for a, c in matches for q, g in a.pairs]
    penalty = max(matched) if matched else 0.0
    acc = np.zeros(nq)
    for assignment, cost in matches:
        row = np.full(nq, penalty)
        for q, g in assignment.pairs:
            row[q] = cost[q, g]
        acc += row
    ledger.add(acc / len(matches))
    return ledger


@dataclass(frozen=True)
class PruneEvent:
    iteration: int
    removed: tuple[int, ...]
    scores: tuple[float, ...]


@dataclass
class PruneReport:
    initial: list[int]
    events: list[PruneEvent] = field(default_factory=list)
    final_alive: list[int] = field(default_factory=list)

    @property
    def removed(self) -> list[int]:
        return [i for e in self.events for i in e.removed]

    def to_csv(self) -> str:
        lines = ["iteration,removed_index,ledger_score"]
        for e in self.events:
            lines += [f"{e.iteration},{i},{s!r}" for i, s in zip(e.removed, e.scores)]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @staticmethod
    def read_events(path) -> list[PruneEvent]:
        rows = Path(path).read_text().splitlines()[1:]
        grouped: dict[int, list[tuple[int, float]]] = {}
        for row in rows:
            if row.strip():
                t, i, s = row.split(",")
                grouped.setdefault(int(t), []).append((int(i), float(s)))
        return [PruneEvent(t, tuple(i for i, _ in g), tuple(s for _, s in g)) for t, g in grouped.items()]


def prune_step(bank: QueryBank, ledger: ScoreLedger, sched: PruneSchedule, t: int,
               optimizer: AdamW | None = None) -> PruneEvent | None:
    """Fire a prune event when ``t`` is a multiple of the interval and queries remain above target."""
    if t > sched.total_iterations:
        raise ValueError(f"iteration {t} beyond schedule length {sched.total_iterations}")
    if t % sched.interval or bank.size <= sched.final_queries:
        return None
    if ledger.keys != bank.alive:
        raise ValueError("ledger keys out of sync with the alive set")
    means = ledger.means()
    excess = bank.size - sched.final_queries
    k = excess if sched.one_shot else min(sched.per_event_k, excess)
    if sched.criterion is Criterion.LOWEST_SCORE:
        order = np.argsort(means, kind="stable")
    else:
        # highest score, or highest (worst) assigner cost; ties to the lower index
        order = np.argsort(-means, kind="stable")
    pick = sorted(int(i) for i in order[:k])
    removed = tuple(ledger.keys[i] for i in pick)
    scores = tuple(float(means[i]) for i in pick)
    bank.remove(removed)
    if optimizer is not None:
        optimizer.forget_rows(REF_POINTS, removed)
    ledger.reset(bank.alive)
    return PruneEvent(t, removed, scores)


class GradualPruner:
    """Training-loop hook that records scores and fires prune events."""

    def __init__(self, bank: QueryBank, sched: PruneSchedule):
        self.bank = bank
        self.sched = sched
        self.ledger = ScoreLedger(list(bank.alive))
        self.report = PruneReport(list(bank.alive))

    def __call__(self, t: int, preds, matches, optimizer) -> None:
        if self.bank.size > self.sched.final_queries:
            if self.sched.criterion is Criterion.ASSIGNER_COST:
                record_costs(self.ledger, matches[-1])
            else:
                record_scores(self.ledger, preds[-1])
        event = prune_step(self.bank, self.ledger, self.sched, t, optimizer)
        if event is not None:
            self.report.events.append(event)
        self.report.final_alive = list(self.bank.alive)


def finetune(model: DetectorModel, scenes: Sequence[Scene], sched: PruneSchedule, opt: OptimizerConfig,
             seed: int, loss_cfg: LossConfig = LossConfig(), progress=None) -> tuple[DetectorModel, PruneReport, TrainLog]:
    """Prune ``model`` in place while training it for ``sched.total_iterations`` iterations."""
    sched.validate()
    if model.bank.size != sched.initial_queries:
        raise ValueError(f"model has {model.bank.size} queries, schedule expects {sched.initial_queries}")
    pruner = GradualPruner(model.bank, sched)
    log = fit(model, scenes, sched.total_iterations, opt, seed, loss_cfg, hooks=[pruner], progress=progress)
    return model, pruner.report, log
