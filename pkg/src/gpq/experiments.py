"""Paired training runs comparing pruned, original and from-scratch models."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

from gpq.bench import eval_map
from gpq.detector import DetectorModel, ModelConfig, SceneConfig, generate_scenes
from gpq.pruning import Criterion, PruneReport, PruneSchedule, finetune
from gpq.seeding import stream
from gpq.training import OptimizerConfig, fit

# Smaller than the library default so a three-seed study fits a CPU budget.
TOY_MODEL = ModelConfig(num_queries=64, embed_dim=32, value_dim=32, hidden_dim=64, heads=4, num_layers=2)


@dataclass(frozen=True)
class StudySetup:
    model: ModelConfig = TOY_MODEL
    scene: SceneConfig = SceneConfig()
    train_scenes: int = 4000
    eval_scenes: int = 500
    base_iterations: int = 1500
    prune_iterations: int = 500
    final_queries: int = 16
    lr: float = 4e-3
    batch_size: int = 8

    @property
    def base_opt(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, batch_size=self.batch_size)

    @property
    def finetune_opt(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr / 2, batch_size=self.batch_size)


@dataclass
class StudyData:
    train: list
    eval: list


def study_data(seed: int, setup: StudySetup) -> StudyData:
    return StudyData(generate_scenes(stream(seed, "data"), setup.train_scenes, setup.scene),
                     generate_scenes(stream(seed, "eval"), setup.eval_scenes, setup.scene))


def train_from_scratch(seed: int, setup: StudySetup, data: StudyData, num_queries: int, iterations: int) -> DetectorModel:
    model = DetectorModel.init(replace(setup.model, num_queries=num_queries), stream(seed, "init"))
    fit(model, data.train, iterations, setup.base_opt, seed)
    return model


def prune_copy(base: DetectorModel, seed: int, setup: StudySetup, data: StudyData,
               criterion: Criterion = Criterion.LOWEST_SCORE, one_shot: bool = False) -> tuple[DetectorModel, PruneReport]:
    model = copy.deepcopy(base)
    sched = PruneSchedule.default(setup.prune_iterations, model.bank.size, setup.final_queries,
                                  criterion=criterion, one_shot=one_shot)
    # a distinct shuffle stream from the base run
    _, report, _ = finetune(model, data.train, sched, setup.finetune_opt, seed + 10_000)
    return model, report


@dataclass
class StudyResult:
    seed: int
    base_map: float
    pruned_map: dict = field(default_factory=dict)   # criterion value -> mAP
    scratch_map: float = float("nan")
    base: DetectorModel | None = None
    pruned: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)


def pruning_study(seed: int, setup: StudySetup = StudySetup(),
                  criteria=(Criterion.LOWEST_SCORE, Criterion.HIGHEST_SCORE), scratch: bool = True) -> StudyResult:
    """Train an Nq-query base, prune copies of it per criterion, and train a small model from scratch
    for the same total number of iterations."""
    data = study_data(seed, setup)
    base = train_from_scratch(seed, setup, data, setup.model.num_queries, setup.base_iterations)
    result = StudyResult(seed, eval_map(base, data.eval).mean_ap, base=base)
    for crit in criteria:
        model, report = prune_copy(base, seed, setup, data, crit)
        result.pruned_map[crit.value] = eval_map(model, data.eval).mean_ap
        result.pruned[crit.value] = model
        result.reports[crit.value] = report
    if scratch:
        small = train_from_scratch(seed, setup, data, setup.final_queries,
                                   setup.base_iterations + setup.prune_iterations)
        result.scratch_map = eval_map(small, data.eval).mean_ap
    return result
