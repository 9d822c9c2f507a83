"""Synthetic airway phantom with exact ground truth.

The airway is a tube of radius R along the camera's optical axis (+z). A
thin annular diaphragm at ``vocal_cord_z`` stands in for the vocal cords and
a smooth cosine taper ending in a sharp lip at ``stenosis_z`` forms the
stenosis. The camera sits on the axis and a point light is co-located with
it, so a surface point at range d with incidence cosine c is rendered with
linear radiance albedo * c / d**2, gamma encoded and gain normalized.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, Frame, PipelineError

# Surface ids stored in RenderResult.surface.
MISS, WALL, TAPER, VOCAL_CORDS, PLANE = 0, 1, 2, 3, 4


class PhantomError(PipelineError):
    module = "phantom"
    exit_code = 2


@dataclass(frozen=True)
class PhantomSpec:
    tube_radius: float = 1.0
    stenosis_radius: float = 0.5
    stenosis_z: float = 7.5
    taper_length: float = 1.0
    vocal_cord_z: float = 3.0
    vocal_cord_radius: float = 0.45
    vocal_cord_offset: float = 0.0
    tube_end_z: float = 30.0
    camera_z: tuple[float, ...] = ()
    albedo: float = 1.0
    gamma: float = 2.2
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "camera_z", tuple(float(z) for z in self.camera_z))
        R = self.tube_radius
        if not 0 < self.stenosis_radius <= R:
            raise PhantomError(f"stenosis radius must lie in (0, R], got {self.stenosis_radius}")
        if not self.vocal_cord_z < self.stenosis_z - self.taper_length:
            raise PhantomError("vocal cords must lie before the stenosis taper")
        if not (0 < self.vocal_cord_radius and self.vocal_cord_radius + abs(self.vocal_cord_offset) < R):
            raise PhantomError("vocal cord opening must fit inside the tube")
        if self.taper_length <= 0:
            raise PhantomError("taper_length must be positive")
        if self.tube_end_z <= self.stenosis_z:
            raise PhantomError("tube must extend past the stenosis")
        if not 0 < self.albedo <= 1:
            raise PhantomError(f"albedo must lie in (0, 1], got {self.albedo}")
        if self.gamma <= 0 or self.noise_sigma < 0:
            raise PhantomError("gamma must be positive and noise_sigma non-negative")
        cz = np.asarray(self.camera_z)
        if cz.size and np.any(np.diff(cz) <= 0):
            raise PhantomError("camera poses must strictly advance along the axis")
        if cz.size and cz[-1] >= self.stenosis_z - self.taper_length:
            raise PhantomError("camera path must stop before the stenosis taper")

    def radius_at(self, z: np.ndarray) -> np.ndarray:
        """Tube radius r(z): R outside the taper, cosine taper down to the lip."""
        z = np.asarray(z, dtype=float)
        R, r0, L, zs = self.tube_radius, self.stenosis_radius, self.taper_length, self.stenosis_z
        s = np.clip((z - (zs - L)) / L, 0.0, 1.0)
        r = r0 + (R - r0) * np.cos(0.5 * np.pi * s)
        return np.where((z >= zs - L) & (z <= zs), r, R)

    def radius_slope(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        R, r0, L, zs = self.tube_radius, self.stenosis_radius, self.taper_length, self.stenosis_z
        s = np.clip((z - (zs - L)) / L, 0.0, 1.0)
        slope = -(R - r0) * 0.5 * np.pi / L * np.sin(0.5 * np.pi * s)
        return np.where((z >= zs - L) & (z <= zs), slope, 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera_z"] = list(self.camera_z)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise PhantomError(f"unknown phantom fields: {sorted(unknown)}")
        return cls(**data)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class PhantomTruth:
    psa_true: float
    psd_true: float
    keyframe_interval: tuple[int, int] | None
    depth: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "psa_true": self.psa_true,
            "psd_true": self.psd_true,
            "keyframe_interval": list(self.keyframe_interval) if self.keyframe_interval else None,
        }


@dataclass
class RenderResult:
    """Per-pixel output of one ray-cast frame.

    ``depth`` is z-depth along the optical axis (0 where the ray escapes),
    ``cos_incidence`` the cosine between surface normal and light direction.
    """

    intensity: np.ndarray
    depth: np.ndarray
    range: np.ndarray
    cos_incidence: np.ndarray
    surface: np.ndarray
    radiance: np.ndarray
    gain: float


def default_camera(width: int = 320, height: int = 320, fov_deg: float = 120.0, gamma: float = 2.2) -> CameraIntrinsics:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height, gamma=gamma)


def make_phantom(
    ratio: float,
    noise_sigma: float = 0.0,
    n_frames: int = 200,
    frames_before_cords: int = 100,
    approach_step: float = 0.0024,
    advance_step: float = 0.016,
    stenosis_distance: float = 3.0,
    seed: int = 0,
    **overrides,
) -> PhantomSpec:
    """Standard test sequence with stenosis radius ``ratio * R``.

    The scope creeps up to the (almost closed) vocal cords in small steps,
    pushes through them in one move and then advances towards the stenosis.
    The last pose before the cords keeps the cord diaphragm filling about a
    fifth of the view so that the lumen only changes once they are passed.
    """
    R = float(overrides.pop("tube_radius", 1.0))
    vc_radius = float(overrides.pop("vocal_cord_radius", 0.012 * R))
    vc_z = 1.0
    n_post = n_frames - frames_before_cords
    last_gap = 0.7 * vc_radius
    pre = [vc_z - last_gap - (frames_before_cords - 1 - k) * approach_step for k in range(frames_before_cords)]
    post = [vc_z + (j + 1) * advance_step for j in range(n_post)]
    stenosis_z = vc_z + stenosis_distance
    base = dict(
        tube_radius=R,
        stenosis_radius=ratio * R,
        vocal_cord_z=vc_z,
        vocal_cord_radius=vc_radius,
        stenosis_z=stenosis_z,
        taper_length=0.5 * R,
        tube_end_z=stenosis_z + 10.0 * R,
        camera_z=tuple(pre + post),
        noise_sigma=noise_sigma,
        seed=seed,
    )
    base.update(overrides)
    return PhantomSpec(**base)


def ground_truth_report(spec: PhantomSpec) -> PhantomTruth:
    ratio = spec.stenosis_radius / spec.tube_radius
    cz = np.asarray(spec.camera_z)
    interval = None
    inside = np.flatnonzero((cz > spec.vocal_cord_z) & (cz < spec.stenosis_z - spec.taper_length))
    if inside.size:
        interval = (int(inside[0]), int(inside[-1]))
    return PhantomTruth(
        psa_true=(1.0 - ratio**2) * 100.0,
        psd_true=(1.0 - ratio) * 100.0,
        keyframe_interval=interval,
    )


def _cast_tube(spec: PhantomSpec, camera_z: float, sx: np.ndarray, sy: np.ndarray):
    """Ray-cast the airway from an on-axis camera.

    Rays are X(t) = t * (sx, sy, 1) + (0, 0, camera_z) with t the z-depth.
    Returns (t, surface_id, normal) with t = inf where the ray escapes.
    """
    R = spec.tube_radius
    rho = np.hypot(sx, sy)
    with np.errstate(divide="ignore"):
        t_wall = np.where(rho > 0, R / rho, np.inf)
    t = t_wall.copy()
    surf = np.full(sx.shape, WALL, dtype=np.uint8)

    # Cosine taper: r(z) decreases monotonically on [zs - L, zs], so the
    # radial gap g(t) = rho * t - r(camera_z + t) is increasing there.
    z0 = spec.stenosis_z - spec.taper_length - camera_z
    z1 = spec.stenosis_z - camera_z
    enters = t_wall > z0
    gap_end = rho * z1 - spec.stenosis_radius
    hit_taper = enters & (gap_end >= 0)
    if np.any(hit_taper):
        lo = np.full(np.count_nonzero(hit_taper), z0)
        hi = np.minimum(t_wall[hit_taper], z1)
        r_slope = rho[hit_taper]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            g = r_slope * mid - spec.radius_at(camera_z + mid)
            below = g < 0
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        t[hit_taper] = 0.5 * (lo + hi)
        surf[hit_taper] = TAPER

    if camera_z < spec.vocal_cord_z:
        tv = spec.vocal_cord_z - camera_z
        hx, hy = sx * tv, sy * tv
        outside_hole = np.hypot(hx - spec.vocal_cord_offset, hy) > spec.vocal_cord_radius
        hit_vc = outside_hole & (tv < t)
        t[hit_vc] = tv
        surf[hit_vc] = VOCAL_CORDS

    escapes = camera_z + t > spec.tube_end_z
    t[escapes] = np.inf
    surf[escapes] = MISS

    nx = np.zeros(sx.shape)
    ny = np.zeros(sx.shape)
    nz = np.zeros(sx.shape)
    side = (surf == WALL) | (surf == TAPER)
    px, py = sx[side] * t[side], sy[side] * t[side]
    pr = np.hypot(px, py)
    slope = spec.radius_slope(camera_z + t[side])
    norm = np.sqrt(1.0 + slope**2)
    nx[side], ny[side], nz[side] = -px / pr / norm, -py / pr / norm, slope / norm
    nz[surf == VOCAL_CORDS] = -1.0
    return t, surf, np.stack([nx, ny, nz])


def _shade(t, normal, sx, sy, albedo):
    ray_len = np.sqrt(sx**2 + sy**2 + 1.0)
    hit = np.isfinite(t)
    rng = np.where(hit, t * ray_len, np.inf)
    # direction from the surface point back to the light, unit length
    lx, ly, lz = -sx / ray_len, -sy / ray_len, -1.0 / ray_len
    cos = normal[0] * lx + normal[1] * ly + normal[2] * lz
    cos = np.where(hit, cos, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        radiance = np.where(hit, albedo * np.maximum(cos, 0.0) / rng**2, 0.0)
    return rng, cos, radiance


def encode_intensity(
    radiance: np.ndarray,
    gamma: float,
    gain: float | None = None,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, float]:
    """Gamma encode linear radiance into 8-bit intensities.

    With ``gain=None`` the gain maps the 95th-percentile encoded value to 0.95.
    """
    encoded = np.power(radiance, 1.0 / gamma)
    if gain is None:
        p95 = float(np.percentile(encoded, 95))
        gain = 0.95 / p95 if p95 > 0 else 1.0
    value = 255.0 * np.clip(encoded * gain, 0.0, 1.0)
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        value = value + rng.normal(0.0, noise_sigma, size=value.shape)
    return np.clip(np.floor(value + 0.5), 0, 255).astype(np.uint8), float(gain)


def render_frame(
    spec: PhantomSpec,
    camera_z: float,
    K: CameraIntrinsics,
    gain: float | None = None,
    rng: np.random.Generator | None = None,
) -> RenderResult:
    sx, sy = K.pixel_rays()
    t, surf, normal = _cast_tube(spec, camera_z, sx, sy)
    rng_d, cos, radiance = _shade(t, normal, sx, sy, spec.albedo)
    intensity, gain = encode_intensity(radiance, spec.gamma, gain, spec.noise_sigma, rng)
    depth = np.where(np.isfinite(t), t, 0.0)
    return RenderResult(intensity, depth, np.where(np.isfinite(rng_d), rng_d, 0.0), cos, surf, radiance, gain)


def render_plane(
    distance: float,
    K: CameraIntrinsics,
    gamma: float,
    albedo: float = 1.0,
    gain: float | None = None,
) -> RenderResult:
    """Frontal plane z = ``distance`` under the same co-located light."""
    sx, sy = K.pixel_rays()
    t = np.full(sx.shape, float(distance))
    normal = np.stack([np.zeros_like(sx), np.zeros_like(sx), -np.ones_like(sx)])
    rng_d, cos, radiance = _shade(t, normal, sx, sy, albedo)
    intensity, gain = encode_intensity(radiance, gamma, gain)
    surf = np.full(sx.shape, PLANE, dtype=np.uint8)
    return RenderResult(intensity, t, rng_d, cos, surf, radiance, gain)


def render_sequence(spec: PhantomSpec, K: CameraIntrinsics) -> tuple[list[Frame], PhantomTruth]:
    if not spec.camera_z:
        raise PhantomError("phantom has no camera poses")
    rng = np.random.default_rng(spec.seed)
    truth = ground_truth_report(spec)
    frames = []
    for i, cz in enumerate(spec.camera_z):
        res = render_frame(spec, cz, K, rng=rng)
        frames.append(Frame(index=i, pixels=res.intensity))
        truth.depth.append(res.depth.astype(np.float32))
    return frames, truth
