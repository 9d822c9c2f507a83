"""Up-to-scale depth providers for the keyframe.

Two providers share the :class:`DepthMap` contract: photometric inversion of
the co-located light fall-off (optionally corrected for the incidence angle),
and a loader for depth rasters computed by an external model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import DEFAULT_GAMMA, CameraIntrinsics, Frame, PipelineError, ShapeError
from .shading import shading_range

DEPTH_MAGIC = b"SGSDEPTH"
_HEADER = struct.Struct("<8sII")


class DepthError(PipelineError):
    module = "depth"
    exit_code = 5


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.shape != valid.shape or depth.ndim != 2:
            raise ShapeError(f"depth {depth.shape} and validity {valid.shape} must be matching 2-D arrays")
        if np.any(~np.isfinite(depth[valid])) or np.any(depth[valid] <= 0):
            raise DepthError("valid depth must be finite and positive")
        depth = np.where(valid, depth, 0.0)
        depth.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def scaled(self, s: float) -> "DepthMap":
        if not s > 0:
            raise ValueError("scale must be positive")
        return DepthMap(self.depth * s, self.valid)

    def normalized(self) -> "DepthMap":
        """Rescale so the median valid depth is 1."""
        med = float(np.median(self.depth[self.valid]))
        return DepthMap(self.depth / med, self.valid)


@dataclass(frozen=True)
class PhotometricModel:
    """Co-located light model I = (albedo * cos(theta) / d**2) ** (1 / gamma).

    ``incidence_correction`` only takes effect when :func:`photometric_depth`
    is given camera intrinsics; ``denoise_size`` is the median window applied
    to the intensities before the corrected solve (1 disables it).
    """

    gamma: float = DEFAULT_GAMMA
    albedo: float = 1.0
    low_intensity_cutoff: int = 5
    saturation_cutoff: int = 250
    incidence_correction: bool = True
    denoise_size: int = 3

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.albedo <= 1:
            raise ValueError(f"albedo must lie in (0, 1], got {self.albedo}")
        if not 0 <= self.low_intensity_cutoff < self.saturation_cutoff <= 255:
            raise ValueError("intensity cutoffs must satisfy 0 <= low < saturation <= 255")
        if self.denoise_size < 1:
            raise ValueError("denoise_size must be >= 1")

    def provider_id(self, corrected: bool) -> str:
        name = "photometric-shading" if corrected else "photometric"
        extra = f",median={self.denoise_size}" if corrected else ""
        return f"{name}(gamma={self.gamma:g},albedo={self.albedo:g}{extra})"


def linear_radiance(intensity: np.ndarray, model: PhotometricModel) -> np.ndarray:
    """Undo the display gamma: (I / 255) ** gamma / albedo."""
    return np.power(np.asarray(intensity, dtype=float) / 255.0, model.gamma) / model.albedo


def invert_intensity(intensity: np.ndarray, model: PhotometricModel) -> np.ndarray:
    """Distance from brightness, d = radiance ** -1/2, without normalization.

    Zero intensity maps to ``inf``.
    """
    with np.errstate(divide="ignore"):
        return 1.0 / np.sqrt(linear_radiance(intensity, model))


def valid_intensity(intensity: np.ndarray, model: PhotometricModel) -> np.ndarray:
    intensity = np.asarray(intensity)
    return (intensity > model.low_intensity_cutoff) & (intensity < model.saturation_cutoff)


def photometric_depth(
    frame: Frame,
    model: PhotometricModel,
    intrinsics: CameraIntrinsics | None = None,
) -> DepthMap:
    """Invert the light fall-off of ``frame`` into a median-normalized depth map.

    Without intrinsics (or with ``model.incidence_correction`` off) every
    pixel is treated as facing the light and d = radiance ** -1/2 is the
    depth. With intrinsics the cos(theta) term is kept: the range is solved
    from the shading equation (see :mod:`stenosis.shading`) and converted to
    z-depth along each ray.
    """
    intensity = np.asarray(frame.pixels)
    valid = valid_intensity(intensity, model)
    if valid.mean() < 0.01:
        raise DepthError(
            f"only {100 * valid.mean():.2f}% of pixels are usable for photometric depth",
            frame_index=frame.index,
        )
    if intrinsics is None or not model.incidence_correction:
        return DepthMap(np.where(valid, invert_intensity(intensity, model), 0.0), valid).normalized()
    if intrinsics.shape != intensity.shape:
        raise ShapeError("intrinsics do not match the frame resolution", frame_index=frame.index)
    smooth = intensity
    if model.denoise_size > 1:
        filtered = ndimage.median_filter(intensity, size=model.denoise_size, mode="nearest")
        smooth = np.where(valid_intensity(filtered, model), filtered, intensity)
    rng, _ = shading_range(linear_radiance(smooth, model), valid, intrinsics)
    return DepthMap(np.where(valid, rng / ray_norms(intrinsics), 0.0), valid).normalized()


def ray_norms(K: CameraIntrinsics) -> np.ndarray:
    """Length of the ray (x, y, 1) through every pixel."""
    sx, sy = K.pixel_rays()
    return np.sqrt(sx**2 + sy**2 + 1.0)


def load_depth(path: Path, expected: tuple[int, int] | None = None) -> DepthMap:
    """Read a depth raster; ``expected`` is (height, width)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DepthError(f"{path}: truncated depth header")
    magic, width, height = _HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise DepthError(f"{path}: not a depth raster (bad magic {magic!r})")
    n = width * height
    if len(data) != _HEADER.size + 4 * n:
        raise DepthError(f"{path}: expected {n} samples for {width}x{height}")
    if expected is not None and (height, width) != tuple(expected):
        raise ShapeError(f"{path}: depth is {width}x{height}, keyframe is {expected[1]}x{expected[0]}")
    depth = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(height, width).astype(float)
    finite = np.isfinite(depth)
    if finite.mean() < 0.5:
        raise DepthError(f"{path}: majority of depth samples are not finite")
    valid = finite & (depth > 0)
    return DepthMap(np.where(valid, depth, 0.0), valid)


def save_depth(depth: np.ndarray, path: Path) -> None:
    depth = np.asarray(depth)
    height, width = depth.shape
    header = _HEADER.pack(DEPTH_MAGIC, width, height)
    Path(path).write_bytes(header + depth.astype("<f4").tobytes())
