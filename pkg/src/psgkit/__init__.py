"""Relation prediction over panoptic scenes, with a from-scratch numpy autodiff.

The package bundles a synthetic corpus generator, a transformer relation
model with a pairwise-only foil, two-phase self-distillation training and
triplet-recall / panoptic-quality evaluation.
"""

from .metrics import MetricsReport, evaluate, mask_iou, match_triplets, panoptic_quality
from .model import ModelConfig, RelationModel, predict_triplets
from .scene import CorpusConfig, Scene, SceneGraph, generate_corpus, generate_scene
from .training import TrainSchedule, train

__version__ = "0.1.0"

__all__ = [
    "CorpusConfig", "MetricsReport", "ModelConfig", "RelationModel", "Scene", "SceneGraph",
    "TrainSchedule", "evaluate", "generate_corpus", "generate_scene", "mask_iou",
    "match_triplets", "panoptic_quality", "predict_triplets", "train",
]
