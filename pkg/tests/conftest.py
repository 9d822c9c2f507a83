from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stenosis.core import CameraIntrinsics, PipelineConfig

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def cfg() -> PipelineConfig:
    return PipelineConfig()


@pytest.fixture
def small_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=40.0, fy=40.0, cx=31.5, cy=23.5, width=64, height=48)


def blob_frame(shape, center, radius, inside=30, outside=200):
    """Dark disk on a bright background."""
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]]
    disk = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius**2
    return np.where(disk, inside, outside).astype(np.uint8)
