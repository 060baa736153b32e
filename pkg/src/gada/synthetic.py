"""Seeded synthetic detection streams standing in for a frame-level detector.

Every video draws from its own ``PCG64`` stream seeded by
``SeedSequence(seed, spawn_key=(index,))``, so video ``i`` is identical no matter
how many videos are generated or in which order. The class-label shuffle uses
``PCG64(SeedSequence(seed))``.

Positive videos carry one or more planted pathology tracks: a box of fixed size
whose center follows a reflecting Gaussian random walk. Every track frame
contributes a ground-truth box and, unless dropped, a jittered detection with
confidence drawn from ``Beta(track_conf_alpha, track_conf_beta)``. Both classes
carry per-frame clutter, at a per-video rate scaled by a mean-one Gamma factor
with variance ``clutter_dispersion``, and "decoy" tracks (persistent low-confidence structures
with no ground truth). Negative videos may also contain a short burst of
high-confidence, spatially incoherent false positives, and a recurring
artifact: a high-confidence box that flashes at one location for single frames
separated by ``artifact_gap`` frames, so it only looks like a track to graphs
whose frame window bridges those gaps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._config import check_probability, check_range, require
from .detections import Dataset, FrameDetections, VideoRecord

MIN_BOX_SIZE = 1e-3


@dataclass(frozen=True)
class GeneratorConfig:
    n_videos: int = 100
    positive_fraction: float = 0.5
    frames_min: int = 60
    frames_max: int = 180
    tracks_per_positive: tuple[int, int] = (1, 2)
    track_length: tuple[int, int] = (4, 16)
    box_size: tuple[float, float] = (0.06, 0.2)
    drift_sigma: float = 0.004
    track_jitter_sigma: float = 0.005
    track_conf_alpha: float = 5.0
    track_conf_beta: float = 2.0
    clutter_rate: float = 0.2
    clutter_dispersion: float = 1.0
    clutter_conf_alpha: float = 2.0
    clutter_conf_beta: float = 5.0
    decoy_rate: float = 0.5
    decoy_conf_alpha: float = 2.0
    decoy_conf_beta: float = 5.0
    detect_drop_prob: float = 0.4
    spurious_burst_prob: float = 0.5
    burst_length: tuple[int, int] = (3, 12)
    artifact_prob: float = 0.5
    artifact_flashes: tuple[int, int] = (3, 6)
    artifact_gap: tuple[int, int] = (8, 25)

    def __post_init__(self):
        require(isinstance(self.n_videos, int) and self.n_videos >= 0, "n_videos must be a nonnegative integer")
        require(0.0 <= self.positive_fraction <= 1.0, "positive_fraction must lie in [0, 1]")
        require(1 <= self.frames_min <= self.frames_max, "need 1 <= frames_min <= frames_max")
        check_range("tracks_per_positive", self.tracks_per_positive, lower=1)
        check_range("track_length", self.track_length, lower=1)
        check_range("burst_length", self.burst_length, lower=1)
        check_range("artifact_flashes", self.artifact_flashes, lower=1)
        check_range("artifact_gap", self.artifact_gap, lower=1)
        check_range("box_size", self.box_size, lower=MIN_BOX_SIZE)
        require(self.box_size[1] <= 1.0, "box_size upper bound must be <= 1")
        for name in ("drift_sigma", "track_jitter_sigma", "clutter_rate", "clutter_dispersion", "decoy_rate"):
            require(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("track_conf", "clutter_conf", "decoy_conf"):
            require(getattr(self, f"{name}_alpha") > 0 and getattr(self, f"{name}_beta") > 0,
                    f"{name} Beta parameters must be positive")
        check_probability("detect_drop_prob", self.detect_drop_prob)
        check_probability("spurious_burst_prob", self.spurious_burst_prob)
        check_probability("artifact_prob", self.artifact_prob)


@dataclass(frozen=True)
class PerturbConfig:
    """Detector-quality degradation applied to an existing dataset."""

    conf_noise_sigma: float = 0.0
    box_jitter_sigma: float = 0.0
    drop_prob: float = 0.0
    spurious_rate: float = 0.0

    def __post_init__(self):
        for name in ("conf_noise_sigma", "box_jitter_sigma", "spurious_rate"):
            require(getattr(self, name) >= 0, f"{name} must be >= 0")
        check_probability("drop_prob", self.drop_prob)

    @property
    def is_identity(self) -> bool:
        return not (self.conf_noise_sigma or self.box_jitter_sigma or self.drop_prob or self.spurious_rate)


def video_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def clip_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clamp ``[x, y, w, h, ...]`` rows in place to valid normalized geometry."""
    np.clip(boxes[:, 2:4], MIN_BOX_SIZE, 1.0, out=boxes[:, 2:4])
    np.clip(boxes[:, 0], 0.0, 1.0 - boxes[:, 2], out=boxes[:, 0])
    np.clip(boxes[:, 1], 0.0, 1.0 - boxes[:, 3], out=boxes[:, 1])
    return boxes


def _random_boxes(rng: np.random.Generator, n: int, size_range) -> np.ndarray:
    wh = rng.uniform(size_range[0], size_range[1], size=(n, 2))
    xy = rng.uniform(0.0, 1.0, size=(n, 2)) * (1.0 - wh)
    return np.hstack([xy, wh])


def _reflect(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.full_like(p, lo)
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def _track(rng: np.random.Generator, length: int, cfg: GeneratorConfig) -> np.ndarray:
    """Ground-truth boxes ``(length, 4)`` of one drifting fixed-size object."""
    w, h = rng.uniform(cfg.box_size[0], cfg.box_size[1], size=2)
    start = rng.uniform([w / 2, h / 2], [1 - w / 2, 1 - h / 2])
    steps = rng.normal(0.0, cfg.drift_sigma, size=(length, 2))
    steps[0] = 0.0
    centers = start + np.cumsum(steps, axis=0)
    cx = _reflect(centers[:, 0], w / 2, 1 - w / 2)
    cy = _reflect(centers[:, 1], h / 2, 1 - h / 2)
    boxes = np.column_stack([cx - w / 2, cy - h / 2, np.full(length, w), np.full(length, h)])
    return clip_boxes(boxes)


def _place(rng, n_frames: int, length_range) -> tuple[int, int]:
    length = min(int(rng.integers(length_range[0], length_range[1] + 1)), n_frames)
    start = int(rng.integers(0, n_frames - length + 1))
    return start, length


def generate_video(cfg: GeneratorConfig, label: int, rng: np.random.Generator, video_id: str) -> VideoRecord:
    n_frames = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    det: list[list[np.ndarray]] = [[] for _ in range(n_frames)]
    gt: list[list[np.ndarray]] = [[] for _ in range(n_frames)]

    def emit_track(truth: np.ndarray, start: int, conf_ab, with_gt: bool):
        n = len(truth)
        kept = rng.random(n) >= cfg.detect_drop_prob
        boxes = np.hstack([truth + rng.normal(0.0, cfg.track_jitter_sigma, size=(n, 4)),
                           rng.beta(conf_ab[0], conf_ab[1], size=(n, 1))])
        clip_boxes(boxes)
        for k in range(n):
            if with_gt:
                gt[start + k].append(truth[k])
            if kept[k]:
                det[start + k].append(boxes[k])

    if label == 1:
        n_tracks = int(rng.integers(cfg.tracks_per_positive[0], cfg.tracks_per_positive[1] + 1))
        for _ in range(n_tracks):
            start, length = _place(rng, n_frames, cfg.track_length)
            emit_track(_track(rng, length, cfg), start, (cfg.track_conf_alpha, cfg.track_conf_beta), True)

    for _ in range(int(rng.poisson(cfg.decoy_rate))):
        start, length = _place(rng, n_frames, cfg.track_length)
        emit_track(_track(rng, length, cfg), start, (cfg.decoy_conf_alpha, cfg.decoy_conf_beta), False)

    rate = cfg.clutter_rate
    if cfg.clutter_dispersion > 0:
        # per-video detector noise level, mean clutter_rate and variance dispersion * clutter_rate**2
        rate *= rng.gamma(1.0 / cfg.clutter_dispersion, cfg.clutter_dispersion)
    counts = rng.poisson(rate, size=n_frames)
    clutter = np.hstack([_random_boxes(rng, int(counts.sum()), cfg.box_size),
                         rng.beta(cfg.clutter_conf_alpha, cfg.clutter_conf_beta, size=(int(counts.sum()), 1))])
    for t, row in zip(np.repeat(np.arange(n_frames), counts), clutter):
        det[t].append(row)

    if label == 0 and rng.random() < cfg.spurious_burst_prob:
        start, length = _place(rng, n_frames, cfg.burst_length)
        burst = np.hstack([_random_boxes(rng, length, cfg.box_size),
                           rng.beta(cfg.track_conf_alpha, cfg.track_conf_beta, size=(length, 1))])
        for k in range(length):
            det[start + k].append(burst[k])

    if label == 0 and rng.random() < cfg.artifact_prob:
        n_flash = int(rng.integers(cfg.artifact_flashes[0], cfg.artifact_flashes[1] + 1))
        gaps = rng.integers(cfg.artifact_gap[0], cfg.artifact_gap[1] + 1, size=n_flash - 1)
        times = int(rng.integers(0, n_frames)) + np.concatenate([[0], np.cumsum(gaps)])
        times = times[times < n_frames]
        spot = _random_boxes(rng, 1, cfg.box_size)
        flashes = np.hstack([spot + rng.normal(0.0, cfg.track_jitter_sigma, size=(len(times), 4)),
                             rng.beta(cfg.track_conf_alpha, cfg.track_conf_beta, size=(len(times), 1))])
        clip_boxes(flashes)
        for t, row in zip(times.tolist(), flashes):
            det[t].append(row)

    frames = tuple(
        FrameDetections(t, np.array(det[t]).reshape(-1, 5), np.array(gt[t]).reshape(-1, 4))
        for t in range(n_frames)
    )
    return VideoRecord(video_id, label, frames)


def generate_dataset(config: GeneratorConfig, seed: int, id_prefix: str = "v",
                     split: str | None = None) -> Dataset:
    """Generate ``config.n_videos`` videos with exactly ``round(n * positive_fraction)`` positives."""
    require(isinstance(seed, (int, np.integer)) and seed >= 0, f"seed must be a nonnegative integer, got {seed!r}")
    n = config.n_videos
    n_pos = int(round(n * config.positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed))).shuffle(labels)
    records = tuple(
        generate_video(config, int(labels[i]), video_rng(seed, i), f"{id_prefix}{i:05d}")
        for i in range(n)
    )
    return Dataset(records, split)


def perturb_record(record: VideoRecord, pcfg: PerturbConfig, rng: np.random.Generator) -> VideoRecord:
    if pcfg.is_identity:
        return record
    t, boxes = record.detection_table
    boxes = boxes.copy()
    if pcfg.drop_prob > 0:
        keep = rng.random(len(boxes)) >= pcfg.drop_prob
        t, boxes = t[keep], boxes[keep]
    if pcfg.conf_noise_sigma > 0:
        boxes[:, 4] = np.clip(boxes[:, 4] + rng.normal(0.0, pcfg.conf_noise_sigma, len(boxes)), 0.0, 1.0)
    if pcfg.box_jitter_sigma > 0:
        boxes[:, :4] += rng.normal(0.0, pcfg.box_jitter_sigma, size=(len(boxes), 4))
        clip_boxes(boxes)
    frame_ids = np.array([f.frame_index for f in record.frames])
    if pcfg.spurious_rate > 0:
        counts = rng.poisson(pcfg.spurious_rate, size=len(frame_ids))
        extra = np.hstack([_random_boxes(rng, int(counts.sum()), (0.05, 0.2)),
                           rng.uniform(0.0, 1.0, size=(int(counts.sum()), 1))])
        t = np.concatenate([t, np.repeat(frame_ids, counts)])
        boxes = np.vstack([boxes, extra])
        order = np.argsort(t, kind="stable")
        t, boxes = t[order], boxes[order]
    bounds = np.searchsorted(t, frame_ids, side="left"), np.searchsorted(t, frame_ids, side="right")
    frames = tuple(
        FrameDetections(f.frame_index, boxes[lo:hi], f.gt)
        for f, lo, hi in zip(record.frames, *bounds)
    )
    return VideoRecord(record.video_id, record.label, frames)


def perturb_dataset(dataset: Dataset, pcfg: PerturbConfig, seed: int) -> Dataset:
    """Degrade detections only; labels and ground truth pass through untouched."""
    records = tuple(perturb_record(rec, pcfg, video_rng(seed, i)) for i, rec in enumerate(dataset.records))
    return Dataset(records, dataset.split)
