"""Gradual query pruning for a toy query-based set-prediction detector."""

from gpq.checkpoint import load_checkpoint, save_checkpoint
from gpq.detector import DetectorModel, ModelConfig, Scene, SceneConfig, generate_scenes, select_topk
from gpq.matching import LossConfig, hungarian, match, set_loss
from gpq.pruning import Criterion, PruneReport, PruneSchedule, finetune, prune_step

__all__ = [
    "Criterion",
    "DetectorModel",
    "LossConfig",
    "ModelConfig",
    "PruneReport",
    "PruneSchedule",
    "Scene",
    "SceneConfig",
    "finetune",
    "generate_scenes",
    "hungarian",
    "load_checkpoint",
    "match",
    "prune_step",
    "save_checkpoint",
    "select_topk",
    "set_loss",
]

__version__ = "0.1.0"
