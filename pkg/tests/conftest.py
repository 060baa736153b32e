import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gada.detections import FrameDetections, VideoRecord

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_record(frames, label=0, video_id="vid"):
    """Record from ``{t: (boxes, gt)}`` or ``{t: boxes}``."""
    out = []
    for t in sorted(frames):
        entry = frames[t]
        boxes, gt = entry if isinstance(entry, tuple) else (entry, [])
        out.append(FrameDetections(t, boxes, gt))
    return VideoRecord(video_id, label, tuple(out))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
