"""Video classification by graph attention over frame-level detections."""
from .detections import (
    BoundingBox, Dataset, FrameDetections, GroundTruthBox, VideoRecord, iou, load_dataset, save_dataset,
)
from .estimators import FrameAverageBaseline, GADAClassifier, SpatiotemporalGraphBuilder
from .exceptions import CheckpointError, ConfigError, DatasetFormatError, GadaError, ShapeMismatchError
from .experiments import (
    ablate_features, baseline_detector_frame_avg, export_visualization, robustness_eval, score_dataset, sweep,
)
from .graph import GraphConfig, VideoGraph, build_graph
from .metrics import MetricsReport, ScoredVideo, auc, confusion_metrics, mcnemar_exact, select_threshold
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .synthetic import GeneratorConfig, PerturbConfig, generate_dataset, perturb_dataset
from .training import TrainConfig, backward, grad_check, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Dataset",
    "FrameDetections",
    "GroundTruthBox",
    "VideoRecord",
    "iou",
    "load_dataset",
    "save_dataset",
    "FrameAverageBaseline",
    "GADAClassifier",
    "SpatiotemporalGraphBuilder",
    "CheckpointError",
    "ConfigError",
    "DatasetFormatError",
    "GadaError",
    "ShapeMismatchError",
    "ablate_features",
    "baseline_detector_frame_avg",
    "export_visualization",
    "robustness_eval",
    "score_dataset",
    "sweep",
    "GraphConfig",
    "VideoGraph",
    "build_graph",
    "MetricsReport",
    "ScoredVideo",
    "auc",
    "confusion_metrics",
    "mcnemar_exact",
    "select_threshold",
    "ModelConfig",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "GeneratorConfig",
    "PerturbConfig",
    "generate_dataset",
    "perturb_dataset",
    "TrainConfig",
    "backward",
    "grad_check",
    "total_loss",
    "train",
]
