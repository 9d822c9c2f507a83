from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stenosis.core import CameraIntrinsics, Frame, ShapeError
from stenosis.depth import (
    DEPTH_MAGIC,
    DepthError,
    DepthMap,
    PhotometricModel,
    invert_intensity,
    load_depth,
    photometric_depth,
    ray_norms,
    save_depth,
)
from stenosis.phantom import default_camera, make_phantom, render_frame, render_plane
from stenosis.shading import shading_range

PLAIN = PhotometricModel(incidence_correction=False)


def test_analytic_inversion_examples():
    # normalized intensity I means pixel value 255 * I
    assert invert_intensity(np.array([0.25 * 255]), PhotometricModel(gamma=2.0))[0] == pytest.approx(4.0)
    assert invert_intensity(np.array([0.0625 * 255]), PhotometricModel(gamma=1.0))[0] == pytest.approx(4.0)
    assert invert_intensity(np.array([255.0]), PhotometricModel(gamma=1.0, albedo=0.25))[0] == pytest.approx(0.5)


def test_model_validation():
    for bad in (dict(gamma=0), dict(albedo=0), dict(albedo=1.5), dict(low_intensity_cutoff=250), dict(denoise_size=0)):
        with pytest.raises(ValueError):
            PhotometricModel(**bad)


def test_uniform_frame_gives_constant_depth(small_camera):
    frame = Frame(0, np.full((48, 64), 120, np.uint8))
    plain = photometric_depth(frame, PLAIN)
    assert plain.valid.all() and np.allclose(plain.depth, 1.0)
    # Without intrinsics the corrected model falls back to the plain inversion.
    assert np.array_equal(photometric_depth(frame, PhotometricModel()).depth, plain.depth)


def test_cutoffs_mark_invalid_pixels():
    px = np.full((10, 10), 100, np.uint8)
    px[0, 0], px[0, 1], px[0, 2], px[0, 3] = 5, 6, 249, 250
    d = photometric_depth(Frame(0, px), PLAIN)
    assert not d.valid[0, 0] and d.valid[0, 1] and d.valid[0, 2] and not d.valid[0, 3]
    assert d.depth[0, 0] == 0.0
    assert np.median(d.depth[d.valid]) == pytest.approx(1.0)


def test_too_few_valid_pixels():
    px = np.zeros((20, 20), np.uint8)
    px[0, 0] = 100  # 0.25% valid
    with pytest.raises(DepthError) as info:
        photometric_depth(Frame(3, px), PLAIN)
    assert info.value.exit_code == 5 and info.value.frame_index == 3


@given(st.integers(6, 248), st.integers(6, 248), st.sampled_from([1.0, 2.2, 3.0]))
def test_inversion_is_monotone(a, b, gamma):
    lo, hi = sorted((a, b))
    d = invert_intensity(np.array([lo, hi], float), PhotometricModel(gamma=gamma))
    if lo < hi:
        assert d[1] < d[0]


@given(arrays(np.float64, (5, 6), elements=st.floats(0.1, 100.0)), st.floats(0.01, 100.0))
def test_median_normalization_removes_scale(depth, s):
    dm = DepthMap(depth, np.ones(depth.shape, bool))
    assert np.allclose(dm.scaled(s).normalized().depth, dm.normalized().depth, rtol=1e-12)


def test_depth_map_invariants():
    with pytest.raises(DepthError):
        DepthMap(np.array([[1.0, -1.0]]), np.array([[True, True]]))
    with pytest.raises(ShapeError):
        DepthMap(np.ones((2, 2)), np.ones((2, 3), bool))
    dm = DepthMap(np.array([[1.0, np.nan]]), np.array([[True, False]]))
    assert dm.depth[0, 1] == 0.0 and (dm.width, dm.height) == (2, 1)


@pytest.mark.parametrize("gamma", [1.0, 2.2])
def test_plain_inversion_recovers_axial_patch_distances(gamma):
    # Narrow field: every pixel faces the light to within 4 degrees.
    K = default_camera(32, 32, fov_deg=8.0, gamma=gamma)
    gain = render_plane(1.0, K, gamma).gain
    model = PhotometricModel(gamma=gamma, incidence_correction=False)
    d = [invert_intensity(render_plane(z, K, gamma, gain=gain).intensity, model) for z in (1.0, 1.5, 2.0)]
    scale = np.median(d[0])
    for z, est in zip((1.0, 1.5, 2.0), d):
        assert np.max(np.abs(est / scale / z - 1)) < 0.01


@pytest.mark.parametrize("gamma", [1.0, 2.2])
@pytest.mark.parametrize("distance", [0.5, 3.0])
def test_corrected_inversion_recovers_frontal_plane(gamma, distance):
    K = default_camera(64, 64, fov_deg=60.0, gamma=gamma)
    res = render_plane(distance, K, gamma)
    d = photometric_depth(Frame(0, res.intensity), PhotometricModel(gamma=gamma), K)
    assert d.valid.mean() > 0.99
    rel = d.depth[d.valid] / np.median(d.depth[d.valid]) - 1
    assert np.max(np.abs(rel)) < 0.01


def test_shading_solver_converges_on_plane():
    errors = []
    for n in (48, 96):
        K = default_camera(n, n, fov_deg=90.0)
        res = render_plane(2.0, K, 2.2)
        rng, rounds = shading_range(res.radiance, np.ones(K.shape, bool), K)
        assert rounds < 100
        errors.append(np.max(np.abs(rng / res.range - 1)))
    assert errors[0] < 0.01
    # first-order scheme: doubling the resolution halves the error
    assert errors[1] < 0.6 * errors[0]


def test_shading_solver_rejects_shape_mismatch():
    K = default_camera(8, 8)
    with pytest.raises(ValueError):
        shading_range(np.ones((8, 9)), np.ones((8, 9), bool), K)


def test_corrected_inversion_on_phantom_beats_plain():
    spec = make_phantom(0.5)
    K = default_camera(96, 96)
    res = render_frame(spec, spec.camera_z[150], K)
    frame = Frame(0, res.intensity)
    corrected = photometric_depth(frame, PhotometricModel(), K)
    plain = photometric_depth(frame, PLAIN)
    v = corrected.valid & (res.depth > 0)

    def spread(est):
        ratio = est.depth[v] / res.depth[v]
        return np.percentile(np.abs(ratio / np.median(ratio) - 1), 90)

    assert spread(corrected) < 0.1
    assert spread(corrected) < 0.5 * spread(plain)


def test_corrected_requires_matching_intrinsics():
    K = default_camera(16, 16)
    with pytest.raises(ShapeError):
        photometric_depth(Frame(0, np.full((8, 8), 100, np.uint8)), PhotometricModel(), K)


def test_ray_norms(small_camera):
    n = ray_norms(small_camera)
    sx, sy = small_camera.pixel_rays()
    assert np.allclose(n**2, 1 + sx**2 + sy**2) and n.min() >= 1.0


def test_depth_file_roundtrip(tmp_path):
    save_depth(np.ones((4, 4)), tmp_path / "d.depth")
    d = load_depth(tmp_path / "d.depth", (4, 4))
    assert d.valid.all() and np.all(d.depth == 1.0)
    raw = (tmp_path / "d.depth").read_bytes()
    assert raw[:8] == DEPTH_MAGIC and len(raw) == 16 + 64


def test_depth_file_zero_pixel_invalid(tmp_path):
    arr = np.full((4, 4), 2.5)
    arr[1, 2] = 0.0
    save_depth(arr, tmp_path / "d.depth")
    d = load_depth(tmp_path / "d.depth")
    assert not d.valid[1, 2] and d.valid.sum() == 15


def test_depth_file_errors(tmp_path):
    save_depth(np.ones((3, 3)), tmp_path / "small.depth")
    with pytest.raises(ShapeError):
        load_depth(tmp_path / "small.depth", (4, 4))
    arr = np.full((4, 4), np.nan)
    arr[0, :3] = 1.0
    save_depth(arr, tmp_path / "nan.depth")
    with pytest.raises(DepthError):
        load_depth(tmp_path / "nan.depth")
    (tmp_path / "junk.depth").write_bytes(b"NOTDEPTH" + bytes(8))
    with pytest.raises(DepthError):
        load_depth(tmp_path / "junk.depth")
    (tmp_path / "short.depth").write_bytes((tmp_path / "small.depth").read_bytes()[:-4])
    with pytest.raises(DepthError):
        load_depth(tmp_path / "short.depth")


def test_nonpositive_calibration_rejected():
    with pytest.raises(Exception):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0, 1, 1)
