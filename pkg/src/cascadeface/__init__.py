"""cascadeface: a three-stage cascaded CNN face detector with landmark
localization, trained with multi-task losses and online hard-example mining,
plus a Viola-Jones-style Haar/AdaBoost baseline and detection metrics."""

from .boxes import Detection
from .estimators import HaarDetector, MtcnnDetector
from .metrics import ConfusionMatrix, MetricsReport, compute_metrics
from .nets import build_onet, build_pnet, build_rnet, load_weights, save_weights
from .pipeline import CascadeConfig, PipelineResult, PyramidConfig, detect
from .train import LossWeights, TrainConfig, TrainingSample, train_stage
from .synth import render_scene, synth_dataset, synth_scene_set

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig",
    "ConfusionMatrix",
    "Detection",
    "HaarDetector",
    "LossWeights",
    "MetricsReport",
    "MtcnnDetector",
    "PipelineResult",
    "PyramidConfig",
    "TrainConfig",
    "TrainingSample",
    "build_onet",
    "build_pnet",
    "build_rnet",
    "compute_metrics",
    "detect",
    "load_weights",
    "render_scene",
    "save_weights",
    "synth_dataset",
    "synth_scene_set",
    "train_stage",
]
