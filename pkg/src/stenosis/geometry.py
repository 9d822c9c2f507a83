"""Keyframe 3D reconstruction and stenosis cross-sections."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CameraIntrinsics, PipelineConfig, PipelineError, ShapeError, percent_reduction
from .depth import DepthMap
from .segmentation import SegmentMask, contour_ring

MIN_CLOUD_POINTS = 100
MIN_CONTOUR_POINTS = 20
MIN_SECTION_POINTS = 20
SWEEP_FLOOR_PERCENTILE = 5.0


class GeometryError(PipelineError):
    module = "geometry"
    exit_code = 4


class DegenerateContour(GeometryError):
    pass


class EmptySection(GeometryError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) camera coordinates, z forward
    pixels: np.ndarray  # (N, 2) source (row, col)
    shape: tuple[int, int]

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def index_map(self) -> np.ndarray:
        idx = np.full(self.shape, -1, dtype=np.int64)
        idx[self.pixels[:, 0], self.pixels[:, 1]] = np.arange(len(self))
        return idx

    def transformed(self, rotation: np.ndarray, scale: float = 1.0) -> "PointCloud":
        pts = scale * self.points @ np.asarray(rotation).T
        return PointCloud(pts, self.pixels, self.shape)


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise GeometryError("plane normal must be non-zero")
        if abs(norm - 1.0) > 1e-9:
            raise GeometryError(f"plane normal must be unit length, |n| = {norm}")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_normal(cls, normal: Sequence[float], offset: float) -> "Plane":
        n = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(n)
        return cls(n / norm, offset / norm)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset

    def axis_intercept(self) -> float:
        """z where the optical axis crosses the plane."""
        if abs(self.normal[2]) < 1e-12:
            raise GeometryError("plane is parallel to the optical axis")
        return self.offset / self.normal[2]

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal in-plane axes (e1, e2) with e1 x e2 = normal."""
        n = self.normal
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = helper - (helper @ n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius


@dataclass(frozen=True)
class CrossSection:
    plane: Plane
    boundary2d: np.ndarray  # (M, 2) hull vertices, counter-clockwise
    area: float
    circle: Circle
    n_points: int

    def boundary3d(self) -> np.ndarray:
        e1, e2 = self.plane.basis()
        origin = self.plane.normal * self.plane.offset
        return origin + self.boundary2d[:, :1] * e1 + self.boundary2d[:, 1:] * e2


def backproject(depth: DepthMap, K: CameraIntrinsics) -> PointCloud:
    """Pinhole back-projection X = d * ((u - cx) / fx, (v - cy) / fy, 1) of valid pixels."""
    if depth.shape != K.shape:
        raise ShapeError(f"depth map {depth.shape} does not match intrinsics {K.shape}")
    rows, cols = np.nonzero(depth.valid)
    if rows.size < MIN_CLOUD_POINTS:
        raise GeometryError(f"only {rows.size} valid depth pixels (need {MIN_CLOUD_POINTS})")
    d = depth.depth[rows, cols]
    pts = np.column_stack([d * (cols - K.cx) / K.fx, d * (rows - K.cy) / K.fy, d])
    return PointCloud(pts, np.column_stack([rows, cols]), depth.shape)


def fit_plane(points: np.ndarray) -> tuple[Plane, float]:
    """Total-least-squares plane and its RMS orthogonal residual.

    The normal is the right singular vector of the centered scatter with the
    smallest singular value, oriented towards +z.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 3:
        raise DegenerateContour(f"need at least 3 points for a plane, got {pts.shape[0]}")
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    scale = max(s[0], np.finfo(float).tiny)
    if s[1] / scale < 1e-9:
        raise DegenerateContour("contour points are collinear")
    n = vt[2]
    if n[2] < 0 or (n[2] == 0 and (n[1] < 0 or (n[1] == 0 and n[0] < 0))):
        n = -n
    n = n / np.linalg.norm(n)
    plane = Plane(n, float(n @ centroid))
    residual = float(np.sqrt(np.mean(plane.signed_distance(pts) ** 2)))
    return plane, residual


def contour_points(cloud: PointCloud, mask: SegmentMask | np.ndarray) -> np.ndarray:
    m = mask.mask if isinstance(mask, SegmentMask) else np.asarray(mask, dtype=bool)
    if m.shape != cloud.shape:
        raise ShapeError(f"mask {m.shape} does not match the point cloud {cloud.shape}")
    idx = cloud.index_map()[contour_ring(m)]
    return cloud.points[idx[idx >= 0]]


def stenosis_plane(cloud: PointCloud, stenosis_mask: SegmentMask | np.ndarray) -> Plane:
    pts = contour_points(cloud, stenosis_mask)
    if pts.shape[0] < MIN_CONTOUR_POINTS:
        raise GeometryError(f"stenosis contour has {pts.shape[0]} reconstructed points (need {MIN_CONTOUR_POINTS})")
    plane, _ = fit_plane(pts)
    return plane


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise vertices without collinear points."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if pts.shape[0] < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(vertices: np.ndarray) -> float:
    """Shoelace formula; positive for counter-clockwise order."""
    v = np.asarray(vertices, dtype=float)
    if v.shape[0] < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def fit_circle(points: np.ndarray) -> Circle:
    """Kasa algebraic fit: least squares on x^2 + y^2 + D x + E y + F = 0."""
    p = np.asarray(points, dtype=float)
    if p.shape[0] < 3:
        raise GeometryError("need at least 3 points for a circle fit")
    # Centering keeps the normal equations well conditioned.
    mu = p.mean(axis=0)
    q = p - mu
    A = np.column_stack([q[:, 0], q[:, 1], np.ones(len(q))])
    b = -(q[:, 0] ** 2 + q[:, 1] ** 2)
    (D, E, F), *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy = -D / 2.0, -E / 2.0
    r2 = cx * cx + cy * cy - F
    if not r2 > 0:
        raise GeometryError("circle fit is degenerate")
    return Circle((float(cx + mu[0]), float(cy + mu[1])), float(np.sqrt(r2)))


def slab_width(cloud: PointCloud, cfg: PipelineConfig) -> float:
    return cfg.slab_half_thickness * float(np.median(cloud.points[:, 2]))


def section_from_points(plane: Plane, points: np.ndarray) -> CrossSection:
    """Cross-section of points already selected as lying on ``plane``."""
    if points.shape[0] < MIN_SECTION_POINTS:
        raise EmptySection(f"{points.shape[0]} points near the plane (need {MIN_SECTION_POINTS})")
    e1, e2 = plane.basis()
    uv = np.column_stack([points @ e1, points @ e2])
    hull = convex_hull(uv)
    area = polygon_area(hull)
    if not area > 0:
        raise EmptySection("section points are collinear")
    return CrossSection(plane, hull, area, fit_circle(hull), int(points.shape[0]))


def cross_section(cloud: PointCloud, plane: Plane, cfg: PipelineConfig, half_width: float | None = None) -> CrossSection:
    """Intersect the reconstruction with ``plane`` using a thin slab."""
    if half_width is None:
        half_width = slab_width(cloud, cfg)
    near = np.abs(plane.signed_distance(cloud.points)) <= half_width
    return section_from_points(plane, cloud.points[near])


def sweep_depths(cloud: PointCloud, stenosis: Plane, cfg: PipelineConfig) -> np.ndarray:
    z = cloud.points[:, 2]
    z_top = stenosis.axis_intercept()
    if not z_top > z.min():
        raise GeometryError(f"stenosis plane (z = {z_top:.4g}) lies in front of the reconstruction")
    z_floor = float(np.percentile(z, SWEEP_FLOOR_PERCENTILE))
    if z_floor >= z_top:
        z_floor = float(z.min())
    return np.linspace(z_floor, z_top, cfg.plane_sweep_steps)


def reference_sweep(cloud: PointCloud, stenosis: Plane, cfg: PipelineConfig) -> CrossSection:
    """Largest cross-section among planes facing the camera, up to the stenosis.

    Ties keep the plane closest to the camera.
    """
    half = slab_width(cloud, cfg)
    best: CrossSection | None = None
    for z in sweep_depths(cloud, stenosis, cfg):
        try:
            sec = cross_section(cloud, Plane(np.array([0.0, 0.0, 1.0]), z), cfg, half)
        except EmptySection:
            continue
        if best is None or sec.area > best.area:
            best = sec
    if best is None:
        raise GeometryError("every reference plane intersects fewer than the minimum number of points")
    return best


@dataclass(frozen=True)
class Severity:
    area_stenosis: float
    area_reference: float
    diameter_stenosis: float
    diameter_reference: float
    psa: float
    psd: float
    warnings: tuple[str, ...] = ()


def compute_psa_psd(sten: CrossSection, ref: CrossSection) -> Severity:
    if not ref.area > 0 or not ref.circle.radius > 0:
        raise GeometryError("reference section has zero area")
    d_s, d_r = sten.circle.diameter, ref.circle.diameter
    psa = percent_reduction(sten.area, ref.area)
    psd = percent_reduction(d_s, d_r)
    warnings = []
    if psa < 0:
        warnings.append("negative_psa")
    if psd < 0:
        warnings.append("negative_psd")
    return Severity(sten.area, ref.area, d_s, d_r, psa, psd, tuple(warnings))


def export_obj(path: Path, cloud: PointCloud, sections: Sequence[CrossSection], stride: int = 1) -> None:
    """Write the point cloud as OBJ vertices and each section as a closed polyline."""
    lines = ["# keyframe reconstruction"]
    pts = cloud.points[::stride]
    lines += [f"v {x:.6g} {y:.6g} {z:.6g}" for x, y, z in pts]
    base = len(pts)
    for k, sec in enumerate(sections):
        poly = sec.boundary3d()
        lines.append(f"o section_{k}")
        lines += [f"v {x:.6g} {y:.6g} {z:.6g}" for x, y, z in poly]
        ids = [str(base + i + 1) for i in range(len(poly))]
        lines.append("l " + " ".join(ids + ids[:1]))
        base += len(poly)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
