"""Detection-stream data types, box geometry and the line-delimited JSON format.

A detection stream file holds one video per line::

    {"video_id": "v0001", "label": 1,
     "frames": [{"t": 0, "boxes": [[x, y, w, h, c], ...], "gt": [[x, y, w, h], ...]}, ...]}

Boxes are normalized to the frame, with ``(x, y)`` the top-left corner.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .exceptions import DatasetFormatError

GEOMETRY_TOL = 1e-9
SPLITS = ("train", "val", "test")


class BoundingBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float
    c: float


class GroundTruthBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float


def geometry_problem(x: float, y: float, w: float, h: float) -> str | None:
    """Return a description of the first violated geometric invariant, or None."""
    values = (x, y, w, h)
    if not all(math.isfinite(v) for v in values):
        return "non-finite coordinate"
    if x < 0 or y < 0:
        return "negative corner offset"
    if w <= 0 or h <= 0:
        return "non-positive width/height"
    if x + w > 1 + GEOMETRY_TOL or y + h > 1 + GEOMETRY_TOL:
        return "box extends past the frame"
    return None


def validate_box(box: Sequence[float], with_confidence: bool = True) -> None:
    problem = geometry_problem(*box[:4])
    if problem is None and with_confidence:
        c = box[4]
        if not (math.isfinite(c) and 0.0 <= c <= 1.0):
            problem = "confidence outside [0, 1]"
    if problem is not None:
        raise DatasetFormatError(f"invalid box {tuple(box)}: {problem}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x, y, w, h, ...)`` boxes."""
    ax, ay, aw, ah = a[:4]
    bx, by, bw, bh = b[:4]
    # (x + w) - x can differ from w by an ulp; clamping keeps iou(a, a) == 1 exactly
    iw = min(min(ax + aw, bx + bw) - max(ax, bx), aw, bw)
    ih = min(min(ay + ah, by + bh) - max(ay, by), ah, bh)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (aw * ah + bw * bh - inter))


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between the rows of ``a`` (n, >=4) and ``b`` (m, >=4)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax0, ay0 = a[:, 0:1], a[:, 1:2]
    ax1, ay1 = ax0 + a[:, 2:3], ay0 + a[:, 3:4]
    bx0, by0 = b[None, :, 0], b[None, :, 1]
    bx1, by1 = bx0 + b[None, :, 2], by0 + b[None, :, 3]
    iw = np.minimum(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), np.minimum(a[:, 2:3], b[None, :, 2]))
    ih = np.minimum(np.minimum(ay1, by1) - np.maximum(ay0, by0), np.minimum(a[:, 3:4], b[None, :, 3]))
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = (a[:, 2:3] * a[:, 3:4]) + (b[None, :, 2] * b[None, :, 3]) - inter
    return np.minimum(1.0, inter / union)


def box_center(b: Sequence[float]) -> tuple[float, float]:
    return (b[0] + b[2] / 2, b[1] + b[3] / 2)


def _as_table(rows, width: int) -> np.ndarray:
    arr = np.array(rows, dtype=float) if len(rows) else np.zeros((0, width))
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"expected rows of {width} numbers, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FrameDetections:
    """Detections and ground-truth boxes for one frame.

    ``boxes`` is an ``(N_t, 5)`` array of ``[x, y, w, h, c]`` rows and ``gt`` a
    ``(G_t, 4)`` array of ``[x, y, w, h]`` rows. Both are read-only.
    """

    frame_index: int
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    gt: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        if isinstance(self.frame_index, bool) or int(self.frame_index) != self.frame_index \
                or self.frame_index < 0:
            raise DatasetFormatError(f"frame index must be a nonnegative integer, got {self.frame_index!r}")
        object.__setattr__(self, "frame_index", int(self.frame_index))
        try:
            boxes = _as_table(self.boxes, 5)
            gt = _as_table(self.gt, 4)
        except ValueError as exc:
            raise DatasetFormatError(f"frame {self.frame_index}: {exc}") from None
        for name, table, with_c in (("boxes", boxes, True), ("gt", gt, False)):
            for row in table.tolist():
                try:
                    validate_box(row, with_confidence=with_c)
                except DatasetFormatError as exc:
                    raise DatasetFormatError(f"frame {self.frame_index}, field '{name}': {exc}") from None
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "gt", gt)

    @property
    def bounding_boxes(self) -> list[BoundingBox]:
        return [BoundingBox(*map(float, row)) for row in self.boxes]

    @property
    def gt_boxes(self) -> list[GroundTruthBox]:
        return [GroundTruthBox(*map(float, row)) for row in self.gt]

    def __eq__(self, other):
        if not isinstance(other, FrameDetections):
            return NotImplemented
        return (self.frame_index == other.frame_index
                and np.array_equal(self.boxes, other.boxes)
                and np.array_equal(self.gt, other.gt))

    __hash__ = None


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    label: int
    frames: tuple[FrameDetections, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.label not in (0, 1) or isinstance(self.label, bool):
            raise DatasetFormatError(f"video {self.video_id}: label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))
        if not self.frames:
            raise DatasetFormatError(f"video {self.video_id}: no frames")
        prev = -1
        for frame in self.frames:
            if frame.frame_index <= prev:
                raise DatasetFormatError(
                    f"video {self.video_id}, frame {frame.frame_index}: frame indices must be strictly increasing")
            prev = frame.frame_index
            if self.label == 0 and len(frame.gt):
                raise DatasetFormatError(
                    f"video {self.video_id}, frame {frame.frame_index}, field 'gt': "
                    "negative video carries ground-truth boxes")

    @cached_property
    def detection_table(self) -> tuple[np.ndarray, np.ndarray]:
        """All detections flattened in frame order: ``(frame_index[n], boxes[n, 5])``."""
        t = np.concatenate([np.full(len(f.boxes), f.frame_index, dtype=np.int64) for f in self.frames])
        boxes = np.concatenate([f.boxes for f in self.frames], axis=0)
        return t, boxes

    @property
    def n_detections(self) -> int:
        return sum(len(f.boxes) for f in self.frames)


@dataclass(frozen=True)
class Dataset:
    records: tuple[VideoRecord, ...]
    split: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.split is not None and self.split not in SPLITS:
            raise DatasetFormatError(f"unknown split tag {self.split!r}")
        seen = set()
        for rec in self.records:
            if rec.video_id in seen:
                raise DatasetFormatError(f"duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)


def record_to_dict(record: VideoRecord) -> dict:
    return {
        "video_id": record.video_id,
        "label": record.label,
        "frames": [
            {"t": f.frame_index, "boxes": f.boxes.tolist(), "gt": f.gt.tolist()}
            for f in record.frames
        ],
    }


def record_from_dict(obj: dict) -> VideoRecord:
    if not isinstance(obj, dict):
        raise DatasetFormatError("video entry is not an object")
    video_id = obj.get("video_id")
    if not isinstance(video_id, str):
        raise DatasetFormatError(f"missing or non-string 'video_id': {video_id!r}")
    for key in ("label", "frames"):
        if key not in obj:
            raise DatasetFormatError(f"video {video_id}: missing field '{key}'")
    if not isinstance(obj["frames"], list):
        raise DatasetFormatError(f"video {video_id}, field 'frames': expected an array")
    frames = []
    for i, fobj in enumerate(obj["frames"]):
        t = fobj.get("t", "?") if isinstance(fobj, dict) else "?"
        where = f"video {video_id}, frame {t}"
        if not isinstance(fobj, dict):
            raise DatasetFormatError(f"{where}: frame entry {i} is not an object")
        for key, width in (("t", None), ("boxes", 5), ("gt", 4)):
            if key not in fobj:
                raise DatasetFormatError(f"{where}: missing field '{key}'")
            if width is not None:
                rows = fobj[key]
                if not isinstance(rows, list) or any(
                        not isinstance(r, list) or len(r) != width
                        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in r)
                        for r in rows):
                    raise DatasetFormatError(f"{where}, field '{key}': expected rows of {width} numbers")
        if not isinstance(fobj["t"], int) or isinstance(fobj["t"], bool):
            raise DatasetFormatError(f"{where}, field 't': expected an integer")
        try:
            frames.append(FrameDetections(fobj["t"], fobj["boxes"], fobj["gt"]))
        except DatasetFormatError as exc:
            raise DatasetFormatError(f"video {video_id}, {exc}") from None
    return VideoRecord(video_id, obj["label"], tuple(frames))


def iter_records(lines: Iterable[str]) -> Iterable[VideoRecord]:
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from None
        yield record_from_dict(obj)


def load_dataset(path: str | Path, split: str | None = None) -> Dataset:
    """Read and validate a detection-stream file.

    Raises ``OSError`` if the file cannot be read and ``DatasetFormatError`` for
    malformed content or invariant violations.
    """
    with open(path, encoding="utf-8") as fh:
        records = list(iter_records(fh))
    return Dataset(tuple(records), split)


def dumps_record(record: VideoRecord) -> str:
    return json.dumps(record_to_dict(record), separators=(",", ":"))


def save_dataset(dataset: Dataset | Iterable[VideoRecord], path: str | Path) -> None:
    records = dataset.records if isinstance(dataset, Dataset) else tuple(dataset)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")
