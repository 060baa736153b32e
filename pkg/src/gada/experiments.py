"""Evaluation drivers: baseline, scoring, sweeps, ablations, robustness and visualization export."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ._config import require
from .detections import Dataset, VideoRecord
from .graph import FEATURE_GROUPS, GraphConfig, VideoGraph, build_graph, canonical_mask
from .metrics import MetricsReport, ScoredVideo, auc, confusion_metrics, select_threshold
from .model import GraphOutput, ModelConfig, Parameters, graph_logits, sigmoid
from .synthetic import PerturbConfig, perturb_dataset
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


Trainer = Callable[[Splits, GraphConfig, ModelConfig], Parameters]


def make_trainer(tcfg: TrainConfig, noise_schedule: Sequence[PerturbConfig] = ()) -> Trainer:
    """Trainer closure running :func:`train` with fixed training settings."""
    def run(splits: Splits, gcfg: GraphConfig, mcfg: ModelConfig) -> Parameters:
        params, _ = train(splits.train, splits.val, gcfg, mcfg, tcfg, noise_schedule)
        return params
    return run


def model_config_for(gcfg: GraphConfig, mcfg: ModelConfig) -> ModelConfig:
    """``mcfg`` with its input width matched to the graph features."""
    return replace(mcfg, node_in_dim=gcfg.node_in_dim)


# --- scoring --------------------------------------------------------------

def baseline_detector_frame_avg(record: VideoRecord) -> float:
    """Mean over frames of the frame's highest detection confidence (0 for empty frames)."""
    if not record.frames:
        return 0.0
    return float(np.mean([f.boxes[:, 4].max() if len(f.boxes) else 0.0 for f in record.frames]))


def baseline_scores(dataset: Dataset) -> list[ScoredVideo]:
    return [ScoredVideo(r.video_id, r.label, baseline_detector_frame_avg(r)) for r in dataset.records]


def score_graphs(graphs: Sequence[VideoGraph], params: Parameters, mcfg: ModelConfig) -> list[ScoredVideo]:
    probs = sigmoid(graph_logits(list(graphs), params, mcfg))
    return [ScoredVideo(g.video_id, g.label, float(p)) for g, p in zip(graphs, probs)]


def score_dataset(dataset: Dataset, params: Parameters, gcfg: GraphConfig,
                  mcfg: ModelConfig) -> list[ScoredVideo]:
    """Video probabilities; a video without nodes gets sigmoid(-1)."""
    return score_graphs([build_graph(r, gcfg) for r in dataset.records], params, mcfg)


def report(val_scored: Sequence[ScoredVideo], test_scored: Sequence[ScoredVideo]) -> MetricsReport:
    """Test metrics at the threshold chosen on the validation scores."""
    return confusion_metrics(test_scored, select_threshold(val_scored))


def evaluate(splits: Splits, params: Parameters, gcfg: GraphConfig, mcfg: ModelConfig) -> MetricsReport:
    return report(score_dataset(splits.val, params, gcfg, mcfg), score_dataset(splits.test, params, gcfg, mcfg))


def evaluate_baseline(splits: Splits) -> MetricsReport:
    return report(baseline_scores(splits.val), baseline_scores(splits.test))


# --- result tables ----------------------------------------------------------

@dataclass
class ResultTable:
    title: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]

    def to_tsv(self) -> str:
        def cell(v):
            if isinstance(v, float):
                return f"{v:.4f}"
            return str(v)
        lines = ["\t".join(self.columns)] + ["\t".join(cell(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": list(self.columns),
                "rows": [dict(zip(self.columns, row)) for row in self.rows]}

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.tsv`` and ``<stem>.json``."""
        stem = Path(stem)
        tsv, js = stem.with_suffix(".tsv"), stem.with_suffix(".json")
        tsv.write_text(self.to_tsv(), encoding="utf-8")
        js.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return tsv, js


# --- sweeps and ablations ---------------------------------------------------

SWEEP_AXES = {"epsilon": "frame_window", "delta": "iou_threshold"}
EPSILON_VALUES = (3, 5, 10, 60)
DELTA_VALUES = (0.0, 0.1, 0.3, 0.5)


def sweep(splits: Splits, trainer: Trainer | None, axis: str, values: Sequence, gcfg: GraphConfig,
          mcfg: ModelConfig, retrain: bool = True, params: Parameters | None = None,
          trained: dict | None = None) -> ResultTable:
    """Test AUC with one graph-construction setting varied.

    With ``retrain`` every value gets its own model; otherwise ``params`` stay
    frozen and only the graphs change. ``trained`` may map already-trained
    values to their parameters to skip those runs.
    """
    require(axis in SWEEP_AXES, f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    require(len(values) > 0, "sweep needs at least one value")
    require(retrain or params is not None, "frozen sweep needs params")
    require(not retrain or trainer is not None, "retraining sweep needs a trainer")
    trained = trained or {}
    table = ResultTable(f"{axis} sweep", (axis, "test_auc"))
    for value in values:
        g = replace(gcfg, **{SWEEP_AXES[axis]: value})
        if retrain:
            p = trained[value] if value in trained else trainer(splits, g, mcfg)
        else:
            p = params
        value_auc = auc(score_dataset(splits.test, p, g, mcfg))
        log.info("%s=%s test AUC %.4f", axis, value, value_auc)
        table.rows.append((value, value_auc))
    return table


@dataclass(frozen=True)
class FeatureMask:
    """Node feature groups plus whether edge features reach the model."""

    groups: tuple[str, ...]
    edges: bool = True

    def __post_init__(self):
        object.__setattr__(self, "groups", canonical_mask(self.groups))

    def apply(self, gcfg: GraphConfig) -> GraphConfig:
        return replace(gcfg, feature_mask=self.groups, use_edge_features=self.edges)

    @property
    def label(self) -> str:
        return "+".join(self.groups + (("edges",) if self.edges else ()))

    @classmethod
    def parse(cls, text: str) -> "FeatureMask":
        """``"size+confidence+edges"`` style label back to a mask."""
        parts = [p.strip() for p in text.split("+") if p.strip()]
        unknown = set(parts) - set(FEATURE_GROUPS) - {"edges"}
        require(not unknown, f"unknown mask component(s): {sorted(unknown)}")
        return cls(tuple(p for p in parts if p != "edges"), "edges" in parts)


DEFAULT_MASK = FeatureMask(("size", "confidence"))
ABLATION_MASKS = (
    FeatureMask(("position", "size", "confidence")),
    DEFAULT_MASK,
    FeatureMask(("position", "size", "confidence"), edges=False),
    FeatureMask(("position", "size")),
    FeatureMask(("position", "confidence")),
    FeatureMask(("size", "confidence"), edges=False),
    FeatureMask(("size",)),
    FeatureMask(("confidence",)),
)
# each removes one component from the default mask
SINGLE_REMOVALS = {
    "size": FeatureMask(("confidence",)),
    "confidence": FeatureMask(("size",)),
    "edges": FeatureMask(("size", "confidence"), edges=False),
}


def ablate_features(splits: Splits, trainer: Trainer, masks: Iterable[FeatureMask], gcfg: GraphConfig,
                    mcfg: ModelConfig, trained: dict | None = None) -> ResultTable:
    """One full train and test evaluation per mask."""
    trained = trained or {}
    table = ResultTable("feature ablation", ("position", "size", "confidence", "edges", "mask", "test_auc"))
    for mask in masks:
        g = mask.apply(gcfg)
        m = model_config_for(g, mcfg)
        p = trained[mask] if mask in trained else trainer(splits, g, m)
        mask_auc = auc(score_dataset(splits.test, p, g, m))
        log.info("mask %s test AUC %.4f", mask.label, mask_auc)
        table.rows.append((*(int(name in mask.groups) for name in FEATURE_GROUPS), int(mask.edges),
                           mask.label, mask_auc))
    return table


# --- robustness ---------------------------------------------------------------

MAX_PERTURBATION = PerturbConfig(conf_noise_sigma=0.05, box_jitter_sigma=0.01, drop_prob=0.05)


def perturbation_levels(top: PerturbConfig = MAX_PERTURBATION, n_levels: int = 5) -> list[PerturbConfig]:
    """``n_levels`` evenly spaced levels from no noise up to ``top``."""
    require(n_levels >= 1, "need at least one level")
    fracs = np.linspace(0.0, 1.0, n_levels) if n_levels > 1 else np.array([1.0])
    return [PerturbConfig(conf_noise_sigma=f * top.conf_noise_sigma, box_jitter_sigma=f * top.box_jitter_sigma,
                          drop_prob=f * top.drop_prob, spurious_rate=f * top.spurious_rate)
            for f in fracs.tolist()]


def robustness_eval(test: Dataset, params: Parameters, gcfg: GraphConfig, mcfg: ModelConfig,
                    schedule: Sequence[PerturbConfig], seed: int = 0) -> ResultTable:
    """Frozen-weight test AUC under each detector degradation level."""
    clean = auc(score_dataset(test, params, gcfg, mcfg))
    table = ResultTable("detector robustness", (
        "level", "conf_noise_sigma", "box_jitter_sigma", "drop_prob", "spurious_rate", "auc", "delta_auc"))
    for i, level in enumerate(schedule):
        noisy = perturb_dataset(test, level, seed + i)
        level_auc = auc(score_dataset(noisy, params, gcfg, mcfg))
        table.rows.append((i, level.conf_noise_sigma, level.box_jitter_sigma, level.drop_prob,
                           level.spurious_rate, level_auc, level_auc - clean))
    return table


# --- visualization export -------------------------------------------------------

def visualization_dict(graph: VideoGraph, output: GraphOutput) -> dict:
    """Plot-ready node and edge attributes; ``alpha`` is the final-layer head mean."""
    centers = graph.boxes[:, :2] + graph.boxes[:, 2:4] / 2
    alpha = output.attention[-1].mean(axis=0) if graph.n_edges else np.zeros(0)
    nodes = [
        {"id": i, "t": int(t), "cx": float(cx), "cy": float(cy), "conf": float(c), "score": float(s),
         "beta": float(b), "label": int(lab)}
        for i, (t, cx, cy, c, s, b, lab) in enumerate(zip(
            graph.frame_index.tolist(), centers[:, 0].tolist(), centers[:, 1].tolist(),
            graph.boxes[:, 4].tolist(), np.asarray(output.node_scores).tolist(),
            np.asarray(output.node_weights).tolist(), graph.node_labels.tolist()))
    ]
    edges = [{"src": s, "dst": d, "alpha": float(a)}
             for s, d, a in zip(graph.src.tolist(), graph.dst.tolist(), alpha.tolist())]
    return {"video_id": graph.video_id, "label": graph.label, "graph_logit": output.graph_logit,
            "probability": output.probability, "nodes": nodes, "edges": edges}


def export_visualization(graph: VideoGraph, output: GraphOutput, path: str | Path) -> None:
    Path(path).write_text(json.dumps(visualization_dict(graph, output), indent=1), encoding="utf-8")
