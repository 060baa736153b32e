"""scikit-learn style wrappers: graph builder transformer, GADA classifier and the frame-average baseline.

``X`` is always a sequence of :class:`~gada.detections.VideoRecord` (or a
:class:`~gada.detections.Dataset`); labels live on the records, so ``y`` is
optional and, when given, must agree with them.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .detections import Dataset, VideoRecord
from .experiments import baseline_detector_frame_avg
from .graph import GraphConfig, VideoGraph, build_graph
from .metrics import select_threshold_scores
from .model import ModelConfig, graph_logits, sigmoid
from .training import TrainConfig, train


def check_records(X) -> tuple[VideoRecord, ...]:
    """Coerce ``X`` to a tuple of records, rejecting anything else."""
    if isinstance(X, Dataset):
        return X.records
    if isinstance(X, VideoRecord):
        raise TypeError("expected a sequence of VideoRecord, got a single record")
    records = tuple(X)
    bad = [type(r).__name__ for r in records if not isinstance(r, VideoRecord)]
    if bad:
        raise TypeError(f"expected VideoRecord items, got {bad[0]}")
    return records


def check_labels(records: Sequence[VideoRecord], y=None) -> np.ndarray:
    labels = np.array([r.label for r in records], dtype=int)
    if y is not None:
        y = np.asarray(y).astype(int).ravel()
        if y.shape != labels.shape:
            raise ValueError(f"y has {len(y)} entries for {len(labels)} videos")
        if np.any(y != labels):
            raise ValueError("y disagrees with the labels stored on the records")
    return labels


class SpatiotemporalGraphBuilder(TransformerMixin, BaseEstimator):
    """Turn detection streams into :class:`~gada.graph.VideoGraph` objects."""

    def __init__(self, frame_window=5, iou_threshold=0.0, conf_threshold=0.01,
                 feature_mask=("size", "confidence"), use_edge_features=True):
        self.frame_window = frame_window
        self.iou_threshold = iou_threshold
        self.conf_threshold = conf_threshold
        self.feature_mask = feature_mask
        self.use_edge_features = use_edge_features

    def graph_config(self) -> GraphConfig:
        return GraphConfig(self.frame_window, self.iou_threshold, self.conf_threshold,
                           tuple(self.feature_mask), self.use_edge_features)

    def fit(self, X=None, y=None):
        # nothing is learned; fitting only validates the settings
        self.config_ = self.graph_config()
        return self

    def transform(self, X) -> list[VideoGraph]:
        check_is_fitted(self, "config_")
        return [build_graph(r, self.config_) for r in check_records(X)]


class GADAClassifier(ClassifierMixin, BaseEstimator):
    """Video classifier: graph construction, edge-aware attention and trained readout.

    ``fit`` trains with class-balanced batches and keeps the parameters with the
    best validation AUC. The decision threshold ``threshold_`` maximizes
    balanced accuracy on the validation videos (training videos if none).
    """

    def __init__(self, frame_window=5, iou_threshold=0.0, conf_threshold=0.01,
                 feature_mask=("size", "confidence"), use_edge_features=True,
                 num_layers=3, num_heads=4, hidden_dim=64, phi_hidden=32, normalize_beta=True,
                 learning_rate=1e-4, epochs=2000, batch_size=100, regen_interval=50, eval_interval=50,
                 random_state=0):
        self.frame_window = frame_window
        self.iou_threshold = iou_threshold
        self.conf_threshold = conf_threshold
        self.feature_mask = feature_mask
        self.use_edge_features = use_edge_features
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.hidden_dim = hidden_dim
        self.phi_hidden = phi_hidden
        self.normalize_beta = normalize_beta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.regen_interval = regen_interval
        self.eval_interval = eval_interval
        self.random_state = random_state

    def _configs(self) -> tuple[GraphConfig, ModelConfig, TrainConfig]:
        gcfg = GraphConfig(self.frame_window, self.iou_threshold, self.conf_threshold,
                           tuple(self.feature_mask), self.use_edge_features)
        mcfg = ModelConfig(num_layers=self.num_layers, num_heads=self.num_heads, hidden_dim=self.hidden_dim,
                           node_in_dim=gcfg.node_in_dim, phi_hidden=self.phi_hidden,
                           normalize_beta=self.normalize_beta)
        tcfg = TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                           regen_interval=self.regen_interval, eval_interval=self.eval_interval,
                           seed=self.random_state)
        return gcfg, mcfg, tcfg

    def fit(self, X, y=None, X_val=None):
        records = check_records(X)
        check_labels(records, y)
        val = check_records(X_val) if X_val is not None else None
        gcfg, mcfg, tcfg = self._configs()
        self.params_, self.history_ = train(Dataset(records), Dataset(val) if val else None, gcfg, mcfg, tcfg)
        self.graph_config_, self.model_config_ = gcfg, mcfg
        self.classes_ = np.array([0, 1])
        ref = val if val else records
        self.threshold_ = select_threshold_scores(check_labels(ref), self._proba(ref))
        return self

    def _proba(self, records) -> np.ndarray:
        return sigmoid(self._logits(records))

    def _logits(self, records) -> np.ndarray:
        graphs = [build_graph(r, self.graph_config_) for r in records]
        return graph_logits(graphs, self.params_, self.model_config_)

    def decision_function(self, X) -> np.ndarray:
        """Graph logits (``-1`` for videos without detections above the gate)."""
        check_is_fitted(self, "params_")
        return self._logits(check_records(X))

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold_).astype(int)


class FrameAverageBaseline(ClassifierMixin, BaseEstimator):
    """Mean of per-frame maximum detection confidence, thresholded for balanced accuracy."""

    def fit(self, X, y=None):
        records = check_records(X)
        labels = check_labels(records, y)
        self.classes_ = np.array([0, 1])
        self.threshold_ = select_threshold_scores(labels, self.decision_function(records))
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.array([baseline_detector_frame_avg(r) for r in check_records(X)])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "threshold_")
        return (self.decision_function(X) >= self.threshold_).astype(int)
