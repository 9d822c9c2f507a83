"""Shared domain types, calibration and frame ingestion."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_GAMMA = 2.2
IMAGE_SUFFIXES = (".png",)


class PipelineError(Exception):
    """Base class for every error raised by the pipeline.

    ``module`` names the stage that failed and ``frame_index`` the frame it
    was processing, when known. The CLI maps subclasses to exit codes.
    """

    module = "core"
    exit_code = 1

    def __init__(self, message: str, *, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index

    def describe(self) -> str:
        where = f" (frame {self.frame_index})" if self.frame_index is not None else ""
        return f"[{self.module}] {type(self).__name__}{where}: {self}"


class IngestError(PipelineError):
    exit_code = 2


class CalibrationError(PipelineError):
    exit_code = 2


class ShapeError(PipelineError):
    exit_code = 2


@dataclass(frozen=True)
class Frame:
    index: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise IngestError(f"frame pixels must be 2-D, got shape {px.shape}", frame_index=self.index)
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise IngestError("intensities outside [0, 255]", frame_index=self.index)
            px = px.astype(np.uint8)
        if self.index < 0:
            raise IngestError(f"negative frame index {self.index}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise CalibrationError(f"{name} must be finite, got {value}")
        if self.fx <= 0 or self.fy <= 0:
            raise CalibrationError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if self.width <= 0 or self.height <= 0:
            raise CalibrationError(f"invalid resolution {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CalibrationError(f"principal point ({self.cx}, {self.cy}) outside the image")
        if self.gamma <= 0:
            raise CalibrationError(f"gamma must be positive, got {self.gamma}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized ray slopes ((u - cx) / fx, (v - cy) / fy) for every pixel."""
        u = (np.arange(self.width, dtype=float) - self.cx) / self.fx
        v = (np.arange(self.height, dtype=float) - self.cy) / self.fy
        return np.meshgrid(u, v)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))


@dataclass(frozen=True)
class PipelineConfig:
    intensity_threshold: int = 50
    min_iou: float = 0.5
    max_missed_frames: int = 25
    slab_half_thickness: float = 0.01
    plane_sweep_steps: int = 64
    min_segment_pixels: int = 25

    def __post_init__(self):
        if not 0 <= self.intensity_threshold <= 255:
            raise ValueError(f"intensity_threshold out of range: {self.intensity_threshold}")
        if not 0 < self.min_iou <= 1:
            raise ValueError(f"min_iou must lie in (0, 1]: {self.min_iou}")
        if self.max_missed_frames < 0:
            raise ValueError(f"max_missed_frames must be >= 0: {self.max_missed_frames}")
        if not self.slab_half_thickness > 0:
            raise ValueError(f"slab_half_thickness must be positive: {self.slab_half_thickness}")
        if self.plane_sweep_steps < 2:
            raise ValueError(f"plane_sweep_steps must be >= 2: {self.plane_sweep_steps}")
        if self.min_segment_pixels < 1:
            raise ValueError(f"min_segment_pixels must be >= 1: {self.min_segment_pixels}")

    def with_overrides(self, overrides: dict[str, str]) -> "PipelineConfig":
        """Copy with ``key=value`` string overrides parsed to each field's type."""
        types = {f.name: type(getattr(self, f.name)) for f in fields(self)}
        changes = {}
        for key, raw in overrides.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r} (known: {', '.join(types)})")
            try:
                changes[key] = types[key](raw)
            except ValueError:
                raise ValueError(f"config {key} expects {types[key].__name__}, got {raw!r}") from None
        return replace(self, **changes)


@dataclass(frozen=True)
class StenosisReport:
    keyframe_index: int
    area_stenosis: float
    area_reference: float
    diameter_stenosis: float
    diameter_reference: float
    psa: float
    psd: float
    provenance: dict[str, Any] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not (self.area_stenosis > 0 and self.area_reference > 0):
            raise ValueError("report areas must be positive")
        if self.psa != percent_reduction(self.area_stenosis, self.area_reference):
            raise ValueError("psa is inconsistent with the stored areas")
        if self.psd != percent_reduction(self.diameter_stenosis, self.diameter_reference):
            raise ValueError("psd is inconsistent with the stored diameters")
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @classmethod
    def from_measurements(
        cls,
        keyframe_index: int,
        area_stenosis: float,
        area_reference: float,
        diameter_stenosis: float,
        diameter_reference: float,
        provenance: dict[str, Any] | None = None,
        warnings: tuple[str, ...] = (),
    ) -> "StenosisReport":
        return cls(
            keyframe_index=int(keyframe_index),
            area_stenosis=float(area_stenosis),
            area_reference=float(area_reference),
            diameter_stenosis=float(diameter_stenosis),
            diameter_reference=float(diameter_reference),
            psa=percent_reduction(area_stenosis, area_reference),
            psd=percent_reduction(diameter_stenosis, diameter_reference),
            provenance=dict(provenance or {}),
            warnings=tuple(warnings),
        )

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["provenance"] = _sorted_keys(self.provenance)
        out["warnings"] = list(self.warnings)
        return out

    def to_json(self) -> str:
        # Field order follows the dataclass; provenance keys are sorted.
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, default=_json_default) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StenosisReport":
        data = json.loads(text)
        data["warnings"] = tuple(data.get("warnings", ()))
        return cls(**data)


def _sorted_keys(obj):
    if isinstance(obj, dict):
        return {k: _sorted_keys(obj[k]) for k in sorted(obj)}
    return obj


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def percent_reduction(value: float, reference: float) -> float:
    """(1 - value / reference) * 100."""
    return (1.0 - float(value) / float(reference)) * 100.0


def to_grayscale(rgb: np.ndarray, index: int = 0) -> Frame:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise IngestError(f"expected an HxWx3 image, got shape {rgb.shape}", frame_index=index)
    w = np.asarray(LUMA_WEIGHTS)
    luma = rgb.astype(float) @ w
    # np.round is half-to-even; +0.5 floor gives the usual half-up rounding.
    gray = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return Frame(index=index, pixels=gray)


def read_frame(path: Path, index: int) -> Frame:
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "P", "1"):
            arr = np.asarray(im.convert("L"))
            return Frame(index=index, pixels=arr)
        return to_grayscale(np.asarray(im.convert("RGB")), index=index)


def write_frame(frame: Frame, path: Path) -> None:
    Image.fromarray(np.asarray(frame.pixels, dtype=np.uint8), mode="L").save(path)


_INDEX_RE = re.compile(r"(\d+)(?!.*\d)")


def frame_index_from_name(name: str) -> int:
    m = _INDEX_RE.search(Path(name).stem)
    if m is None:
        raise IngestError(f"no frame index in file name {name!r}")
    return int(m.group(1))


def list_frame_files(directory: Path) -> list[tuple[int, Path]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestError(f"not a directory: {directory}")
    files = [p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
    if not files:
        raise IngestError(f"no frame images in {directory}")
    indexed = sorted((frame_index_from_name(p.name), p) for p in files)
    idx = [i for i, _ in indexed]
    if len(set(idx)) != len(idx):
        raise IngestError(f"duplicate frame indices in {directory}")
    missing = sorted(set(range(idx[0], idx[-1] + 1)) - set(idx))
    if missing:
        raise IngestError(f"missing frames {missing[:5]}{'...' if len(missing) > 5 else ''} in {directory}")
    return indexed


_CALIB_KEYS = {"fx": float, "fy": float, "cx": float, "cy": float, "width": int, "height": int, "gamma": float}


def parse_calibration(text: str) -> CameraIntrinsics:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        elif ":" in line:
            key, value = line.split(":", 1)
        else:
            raise CalibrationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip().lower()
        if key not in _CALIB_KEYS:
            raise CalibrationError(f"line {lineno}: unknown calibration key {key!r}")
        if key in values:
            raise CalibrationError(f"line {lineno}: duplicate key {key!r}")
        try:
            conv = _CALIB_KEYS[key]
            values[key] = conv(float(value)) if conv is int else conv(value)
        except ValueError as exc:
            raise CalibrationError(f"line {lineno}: bad value for {key}: {value.strip()!r}") from exc
    missing = [k for k in _CALIB_KEYS if k != "gamma" and k not in values]
    if missing:
        raise CalibrationError(f"calibration is missing keys: {', '.join(missing)}")
    return CameraIntrinsics(**values)


def load_calibration(path: Path) -> CameraIntrinsics:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CalibrationError(f"cannot read calibration {path}: {exc}") from exc
    return parse_calibration(text)


def load_sequence(directory: Path, calib: Path) -> tuple[list[Frame], CameraIntrinsics]:
    intrinsics = load_calibration(calib)
    frames = [read_frame(p, i) for i, p in list_frame_files(Path(directory))]
    for fr in frames:
        if fr.shape != intrinsics.shape:
            raise CalibrationError(
                f"frame is {fr.width}x{fr.height} but calibration is {intrinsics.width}x{intrinsics.height}",
                frame_index=fr.index,
            )
    return frames, intrinsics
