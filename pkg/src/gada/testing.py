"""Small random inputs for gradient checks and property tests."""
from __future__ import annotations

import numpy as np

from .detections import FrameDetections, VideoRecord
from .graph import GraphConfig, VideoGraph, build_graph


def random_record(rng: np.random.Generator, n_boxes: int, n_frames: int = 8, label: int | None = None,
                  spread: float = 0.15, video_id: str = "rand") -> VideoRecord:
    """Boxes scattered around a common point so that many pairs overlap."""
    label = int(rng.integers(2)) if label is None else label
    frame_of = np.sort(rng.integers(0, n_frames, size=n_boxes))
    centre = rng.uniform(0.3, 0.7, size=2)
    frames = []
    for t in range(n_frames):
        k = int(np.sum(frame_of == t))
        wh = rng.uniform(0.08, 0.25, size=(k, 2))
        c = np.clip(centre + rng.normal(0, spread, size=(k, 2)), wh / 2, 1 - wh / 2)
        boxes = np.column_stack([c - wh / 2, wh, rng.uniform(0.02, 1.0, size=k)])
        gt = []
        if label == 1 and rng.random() < 0.5:
            gw = rng.uniform(0.1, 0.2, size=2)
            gt = [[centre[0] - gw[0] / 2, centre[1] - gw[1] / 2, gw[0], gw[1]]]
        frames.append(FrameDetections(t, boxes, gt))
    return VideoRecord(video_id, label, tuple(frames))


def random_graph(rng: np.random.Generator, n_nodes: int, gcfg: GraphConfig = GraphConfig(),
                 **kwargs) -> VideoGraph:
    return build_graph(random_record(rng, n_nodes, **kwargs), gcfg)


def random_grad_checks(seed: int, n_graphs: int = 10, cfg=None, node_range: tuple[int, int] = (3, 12),
                       fd_step: float = 1e-5, tolerance: float = 1e-4, n_coords: int = 200) -> list:
    """Gradient checks on ``n_graphs`` random graphs with fresh random parameters each."""
    from .model import ModelConfig, init_params
    from .training import grad_check

    cfg = cfg or ModelConfig()
    results = []
    for i in range(n_graphs):
        rng = np.random.default_rng([seed, i])
        graph = random_graph(rng, int(rng.integers(node_range[0], node_range[1] + 1)))
        params = init_params(cfg, int(rng.integers(2 ** 31)))
        results.append(grad_check(graph, params, cfg, fd_step, tolerance, n_coords, seed=int(rng.integers(2 ** 31))))
    return results
