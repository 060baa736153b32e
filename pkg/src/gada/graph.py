"""Spatiotemporal detection graphs.

Nodes are detections that pass the confidence gate; two nodes on different
frames at most ``frame_window`` apart are linked, in both directions, when their
boxes overlap by more than ``iou_threshold``. Each edge carries
``[iou, center_distance, frame_gap]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ._config import require
from .detections import BoundingBox, VideoRecord, iou, pairwise_iou

FEATURE_GROUPS = {"position": (0, 1), "size": (2, 3), "confidence": (4,)}
EDGE_DIM = 3


def canonical_mask(mask: Iterable[str]) -> tuple[str, ...]:
    mask = set(mask)
    unknown = mask - set(FEATURE_GROUPS)
    require(not unknown, f"unknown feature group(s): {sorted(unknown)}")
    require(bool(mask), "feature_mask must be nonempty")
    return tuple(g for g in FEATURE_GROUPS if g in mask)


def feature_columns(mask: Sequence[str]) -> list[int]:
    return [col for g in canonical_mask(mask) for col in FEATURE_GROUPS[g]]


@dataclass(frozen=True)
class GraphConfig:
    frame_window: int = 5
    iou_threshold: float = 0.0
    conf_threshold: float = 0.01
    feature_mask: tuple[str, ...] = ("size", "confidence")
    use_edge_features: bool = True

    def __post_init__(self):
        require(isinstance(self.frame_window, (int, np.integer)) and self.frame_window >= 1,
                "frame_window must be an integer >= 1")
        require(0.0 <= self.iou_threshold <= 1.0, "iou_threshold must lie in [0, 1]")
        require(0.0 <= self.conf_threshold <= 1.0, "conf_threshold must lie in [0, 1]")
        if isinstance(self.feature_mask, str):
            object.__setattr__(self, "feature_mask", (self.feature_mask,))
        object.__setattr__(self, "feature_mask", canonical_mask(self.feature_mask))
        object.__setattr__(self, "frame_window", int(self.frame_window))

    @property
    def node_in_dim(self) -> int:
        return len(feature_columns(self.feature_mask))


class Node(NamedTuple):
    node_id: int
    frame_index: int
    box: BoundingBox
    features: tuple[float, ...]
    label: int


class Edge(NamedTuple):
    src: int
    dst: int
    features: tuple[float, float, float]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VideoGraph:
    """Array-backed graph of one video.

    Node ``i`` is row ``i`` of ``frame_index``, ``boxes``, ``features`` and
    ``node_labels``; edge ``k`` runs ``src[k] -> dst[k]`` with
    ``edge_features[k]``. ``nodes`` and ``edges`` give tuple views.
    """

    video_id: str
    label: int
    frame_index: np.ndarray
    boxes: np.ndarray
    features: np.ndarray
    node_labels: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_features: np.ndarray
    use_edge_features: bool = True
    feature_mask: tuple[str, ...] = field(default=("size", "confidence"))

    def __post_init__(self):
        for name in ("frame_index", "boxes", "features", "node_labels", "src", "dst", "edge_features"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name))))

    @property
    def n_nodes(self) -> int:
        return len(self.node_labels)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def edge_inputs(self) -> np.ndarray:
        """Edge features as seen by the model; zeros when edge features are ablated."""
        if self.use_edge_features:
            return self.edge_features
        return np.zeros_like(self.edge_features)

    @property
    def nodes(self) -> list[Node]:
        return [
            Node(i, int(t), BoundingBox(*box), tuple(feat), int(lab))
            for i, (t, box, feat, lab) in enumerate(zip(
                self.frame_index.tolist(), self.boxes.tolist(), self.features.tolist(), self.node_labels.tolist()))
        ]

    @property
    def edges(self) -> list[Edge]:
        return [Edge(s, d, tuple(f)) for s, d, f in zip(
            self.src.tolist(), self.dst.tolist(), self.edge_features.tolist())]

    def permuted(self, perm: Sequence[int], edge_perm: Sequence[int] | None = None) -> "VideoGraph":
        """Relabel nodes so that old node ``perm[i]`` becomes node ``i``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        edge_perm = np.arange(self.n_edges) if edge_perm is None else np.asarray(edge_perm)
        return VideoGraph(
            self.video_id, self.label, self.frame_index[perm], self.boxes[perm], self.features[perm],
            self.node_labels[perm], inverse[self.src[edge_perm]], inverse[self.dst[edge_perm]],
            self.edge_features[edge_perm], self.use_edge_features, self.feature_mask)


def label_node(box: Sequence[float], gt_boxes: Sequence[Sequence[float]]) -> int:
    """+1 if the box overlaps any ground-truth box with IoU > 0, else -1."""
    return 1 if any(iou(box, g) > 0 for g in gt_boxes) else -1


def build_graph(record: VideoRecord, cfg: GraphConfig = GraphConfig()) -> VideoGraph:
    t_all, boxes_all = record.detection_table
    keep = boxes_all[:, 4] > cfg.conf_threshold
    t, boxes = t_all[keep], boxes_all[keep]
    n = len(t)

    labels = -np.ones(n, dtype=np.int64)
    gt_t = np.concatenate([np.full(len(f.gt), f.frame_index) for f in record.frames])
    if n and len(gt_t):
        gt = np.concatenate([f.gt for f in record.frames], axis=0)
        overlap = (pairwise_iou(boxes, gt) > 0) & (t[:, None] == gt_t[None, :])
        labels[overlap.any(axis=1)] = 1

    if n > 1:
        gap = np.abs(t[:, None] - t[None, :])
        ious = pairwise_iou(boxes, boxes)
        src, dst = np.nonzero((gap >= 1) & (gap <= cfg.frame_window) & (ious > cfg.iou_threshold))
        edge_iou = ious[src, dst]
    else:
        src = dst = np.zeros(0, dtype=np.int64)
        edge_iou = np.zeros(0)
    centers = boxes[:, :2] + boxes[:, 2:4] / 2
    edge_features = np.column_stack([
        edge_iou,
        np.linalg.norm(centers[src] - centers[dst], axis=1),
        np.abs(t[src] - t[dst]).astype(float),
    ]).reshape(-1, EDGE_DIM)

    return VideoGraph(
        video_id=record.video_id,
        label=record.label,
        frame_index=t.astype(np.int64),
        boxes=boxes.copy(),
        features=boxes[:, feature_columns(cfg.feature_mask)].copy(),
        node_labels=labels,
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        edge_features=edge_features,
        use_edge_features=cfg.use_edge_features,
        feature_mask=cfg.feature_mask,
    )


def graph_to_dict(graph: VideoGraph) -> dict:
    return {
        "video_id": graph.video_id,
        "label": graph.label,
        "nodes": [
            {"id": nd.node_id, "t": nd.frame_index, "box": list(nd.box), "features": list(nd.features),
             "label": nd.label}
            for nd in graph.nodes
        ],
        "edges": [{"src": e.src, "dst": e.dst, "features": list(e.features)} for e in graph.edges],
    }


def save_graphs(graphs: Iterable[VideoGraph], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_dict(g), separators=(",", ":")))
            fh.write("\n")
