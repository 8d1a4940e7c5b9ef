import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.geometry import (
    BevGridSpec,
    CameraCalibration,
    DegeneratePoseError,
    apply_homography,
    coverage_mask,
    dims_to_grid,
    feature_map_size,
    fit_grid_to_coverage,
    grid_to_world,
    ground_footprint,
    ground_homography,
    intrinsics_from_fov,
    project_world_point,
    sample_features_to_bev,
    world_to_grid,
)

from conftest import random_calibration, roadside_camera
from gradcheck import check_gradients


# ---------------------------------------------------------------- world <-> grid


def test_world_to_grid_substitution():
    spec = BevGridSpec(0.0, 0.0, 0.31, 0.31, 480, 480)
    gx, gy = world_to_grid(3.1, 6.2, spec)
    assert gx == pytest.approx(10.0, abs=1e-12)
    assert gy == pytest.approx(20.0, abs=1e-12)
    gl, gw = dims_to_grid(4.65, 1.86, spec)
    assert gl == pytest.approx(15.0, abs=1e-12)
    assert gw == pytest.approx(6.0, abs=1e-12)


def test_origin_maps_to_zero():
    spec = BevGridSpec(-12.5, 40.25, 0.5, 0.25, 10, 20)
    assert world_to_grid(-12.5, 40.25, spec) == (0.0, 0.0)
    assert grid_to_world(0, 0, spec) == (-12.5, 40.25)


def test_grid_to_world_substitution():
    spec = BevGridSpec(3.0, -7.0, 0.5, 0.5, 8, 8)
    x, y = grid_to_world(10, 4, spec)
    assert (x, y) == (3.0 + 5.0, -7.0 + 2.0)


def test_round_trip_1000_points(rng):
    spec = BevGridSpec(-74.25, 12.5, 0.31, 0.29, 480, 480)
    p = rng.uniform(-200, 200, size=(1000, 2))
    x, y = grid_to_world(*world_to_grid(p[:, 0], p[:, 1], spec), spec)
    assert np.max(np.abs(x - p[:, 0])) < 1e-9
    assert np.max(np.abs(y - p[:, 1])) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1e3, 1e3), st.floats(-1e3, 1e3),
    st.floats(-100, 100), st.floats(-100, 100),
    st.floats(0.05, 2.0), st.floats(0.05, 2.0),
)
def test_round_trip_property(x, y, x0, y0, dx, dy):
    spec = BevGridSpec(x0, y0, dx, dy, 4, 4)
    xr, yr = grid_to_world(*world_to_grid(x, y, spec), spec)
    assert abs(xr - x) < 1e-9 and abs(yr - y) < 1e-9


def test_non_finite_rejected():
    spec = BevGridSpec(0, 0, 1, 1, 2, 2)
    with pytest.raises(ValueError):
        world_to_grid(float("nan"), 0.0, spec)
    with pytest.raises(ValueError):
        dims_to_grid(float("inf"), 1.0, spec)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        BevGridSpec(0, 0, 0.0, 1, 2, 2)
    with pytest.raises(ValueError):
        BevGridSpec(0, 0, 1, 1, 0, 2)
    assert BevGridSpec(0, 0, 0.31, 0.31, 480, 480).extent == pytest.approx((148.8, 148.8))


# ---------------------------------------------------------------- calibration


def test_focal_from_fov():
    K = intrinsics_from_fov(320, 180, 90.0)
    assert K[0, 0] == pytest.approx(160.0)
    assert K[1, 1] == pytest.approx(160.0)


def test_calibration_validation(rng):
    K = intrinsics_from_fov(100, 50)
    with pytest.raises(ValueError):
        CameraCalibration(K, np.diag([1.0, 1.0, 2.0]), [0, 0, 1], (100, 50))
    bad = K.copy()
    bad[1, 0] = 1.0
    with pytest.raises(ValueError):
        CameraCalibration(bad, np.eye(3), [0, 0, 1], (100, 50))


def test_calibration_dict_round_trip(rng):
    cal = random_calibration(rng)
    back = CameraCalibration.from_dict(cal.to_dict())
    assert np.array_equal(back.K, cal.K) and np.array_equal(back.R, cal.R) and np.array_equal(back.t, cal.t)
    assert back.image_size == cal.image_size


def test_from_pose_center_and_axis():
    cam = CameraCalibration.from_pose((3.0, -2.0, 6.0), 0.3, -0.4, (320, 180))
    assert np.allclose(cam.center, [3.0, -2.0, 6.0])
    # a point straight along the optical axis lands on the principal point
    fwd = np.array([math.cos(-0.4) * math.cos(0.3), math.cos(-0.4) * math.sin(0.3), math.sin(-0.4)])
    uv, depth = project_world_point(cam, cam.center + 10 * fwd)
    assert depth == pytest.approx(10.0)
    assert np.allclose(uv, [160.0, 90.0])


# ---------------------------------------------------------------- homography


def _full_projection(cal, xy):
    X = np.column_stack([xy, np.zeros(len(xy)), np.ones(len(xy))])
    h = X @ cal.projection_matrix.T
    return h[:, :2] / h[:, 2:3], h[:, 2]


def test_homography_matches_full_projection(rng):
    for _ in range(20):
        cal = random_calibration(rng)
        H = ground_homography(cal)
        xy = rng.uniform(-60, 60, size=(100, 2))
        uv_full, depth = _full_projection(cal, xy)
        uv_h, w = apply_homography(H, xy)
        front = depth > 0.5
        assert np.max(np.abs(uv_h[front] - uv_full[front])) < 1e-6
        assert np.allclose(w, depth)


def test_homography_identity_case():
    cal = CameraCalibration(np.eye(3), np.eye(3), [0, 0, 1], (10, 10))
    H = ground_homography(cal)
    assert np.allclose(H, np.eye(3))
    uv, w = apply_homography(H, [[2.5, -1.0]])
    assert np.allclose(uv, [[2.5, -1.0]]) and w[0] == 1.0


def test_points_behind_camera_have_negative_depth():
    cam = CameraCalibration.from_pose((0, 0, 6), 0.0, -0.3, (160, 90))
    _, w = apply_homography(ground_homography(cam), [[-20.0, 0.0], [20.0, 0.0]])
    assert w[0] < 0 < w[1]


def test_degenerate_pose_rejected():
    cam = CameraCalibration.from_pose((0, 0, 0.0), 0.0, 0.0, (160, 90))
    with pytest.raises(DegeneratePoseError):
        ground_homography(cam)


# ---------------------------------------------------------------- sampling


def _oracle_sample(feat: np.ndarray, cal, spec, stride, max_range):
    """Project each cell center on its own with the 3x4 matrix and interpolate."""
    C, h, w = feat.shape
    W, H = cal.image_size
    P = cal.projection_matrix
    c = cal.center
    out = np.zeros((C, spec.gh, spec.gw))
    mask = np.zeros(spec.shape, dtype=bool)
    for i in range(spec.gh):
        for j in range(spec.gw):
            x, y = spec.x0 + j * spec.dx, spec.y0 + i * spec.dy
            hom = P @ np.array([x, y, 0.0, 1.0])
            if hom[2] <= 0:
                continue
            u, v = hom[0] / hom[2], hom[1] / hom[2]
            if not (0 <= u < W and 0 <= v < H) or math.hypot(x - c[0], y - c[1]) > max_range:
                continue
            mask[i, j] = True
            fu, fv = u / stride - 0.5, v / stride - 0.5
            c0, r0 = math.floor(fu), math.floor(fv)
            ax, ay = fu - c0, fv - r0

            def at(r, cc):
                return feat[:, min(max(r, 0), h - 1), min(max(cc, 0), w - 1)]

            out[:, i, j] = ((1 - ax) * (1 - ay) * at(r0, c0) + ax * (1 - ay) * at(r0, c0 + 1)
                            + (1 - ax) * ay * at(r0 + 1, c0) + ax * ay * at(r0 + 1, c0 + 1))
    return out, mask


def test_sampling_matches_per_cell_oracle(rng):
    cam = roadside_camera(rng)
    spec = fit_grid_to_coverage([cam], 1.0, 24, 60.0)
    h, w = feature_map_size(cam.image_size, 4)
    feat = rng.normal(size=(3, h, w))
    bev, mask = sample_features_to_bev(torch.from_numpy(feat), cam, spec, 4, 60.0)
    ref, ref_mask = _oracle_sample(feat, cam, spec, 4, 60.0)
    assert np.array_equal(mask, ref_mask)
    assert mask.sum() > 50
    assert np.max(np.abs(bev.numpy() - ref)) < 1e-5


def test_constant_field_is_exact(rng):
    cam = roadside_camera(rng)
    spec = fit_grid_to_coverage([cam], 2.0, 128, 100.0)
    h, w = feature_map_size(cam.image_size, 4)
    bev, mask = sample_features_to_bev(torch.ones(2, h, w), cam, spec)
    assert mask.any() and not mask.all()
    assert torch.equal(bev[:, torch.from_numpy(mask)], torch.ones(2, int(mask.sum())))
    assert torch.equal(bev[:, torch.from_numpy(~mask)], torch.zeros(2, int((~mask).sum())))


def test_camera_facing_away_covers_nothing():
    cam = CameraCalibration.from_pose((0, 0, 6), math.pi, -0.3, (160, 90))
    spec = BevGridSpec(10.0, -10.0, 0.5, 0.5, 40, 40)
    h, w = feature_map_size(cam.image_size, 4)
    bev, mask = sample_features_to_bev(torch.randn(4, h, w), cam, spec)
    assert not mask.any()
    assert torch.count_nonzero(bev) == 0


def test_stride_mismatch_rejected(rng):
    cam = roadside_camera(rng)
    spec = BevGridSpec(0, 0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        sample_features_to_bev(torch.zeros(1, 10, 10), cam, spec, 4)


def test_sampling_is_linear(rng):
    cam = roadside_camera(rng)
    spec = fit_grid_to_coverage([cam], 1.0, 32, 80.0)
    h, w = feature_map_size(cam.image_size, 4)
    f1 = torch.from_numpy(rng.normal(size=(2, h, w)))
    f2 = torch.from_numpy(rng.normal(size=(2, h, w)))
    a, b = 0.7, -1.3
    lhs, mask = sample_features_to_bev(a * f1 + b * f2, cam, spec)
    s1, _ = sample_features_to_bev(f1, cam, spec)
    s2, _ = sample_features_to_bev(f2, cam, spec)
    assert torch.allclose(lhs, a * s1 + b * s2, atol=1e-12)


def test_sampling_gradient_matches_finite_differences():
    cam = CameraCalibration.from_pose((0, -6, 4), math.pi / 2, -0.6, (16, 16))
    spec = BevGridSpec(-3.0, -2.0, 0.5, 0.5, 10, 12)
    feat = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(2, 10, 12, dtype=torch.float64)

    def fn():
        bev, _ = sample_features_to_bev(feat, cam, spec)
        return (bev * weights).sum()

    assert check_gradients(fn, [feat]) < 1e-4


def test_coverage_monotone_in_range(rng):
    cam = roadside_camera(rng)
    spec = fit_grid_to_coverage([cam], 1.0, 120, 100.0)
    prev = np.zeros(spec.shape, dtype=bool)
    for r in (10, 20, 40, 80, 160):
        cur = coverage_mask(cam, spec, r)
        assert not np.any(prev & ~cur)
        prev = cur


# ---------------------------------------------------------------- grid fitting


def test_downward_camera_grid_centered_below():
    cam = CameraCalibration.from_pose((0.0, 0.0, 6.0), 0.0, -math.pi / 2, (320, 180))
    spec = fit_grid_to_coverage([cam], 0.31, 480, 100.0)
    # footprint is a rectangle centered under the camera
    fp = ground_footprint(cam, 100.0)
    assert np.allclose(fp.mean(axis=0), 0.0, atol=1e-9)
    cx = spec.x0 + (spec.gw - 1) / 2 * spec.dx
    cy = spec.y0 + (spec.gh - 1) / 2 * spec.dy
    assert abs(cx) < 1e-9 and abs(cy) < 1e-9
    assert spec.extent == pytest.approx((148.8, 148.8))


def test_grid_center_matches_sampled_coverage_centroid(rng):
    cams = [roadside_camera(rng) for _ in range(3)]
    spec = fit_grid_to_coverage(cams, 0.5, 96, 60.0)
    # dense lattice oracle of the union centroid
    probe = BevGridSpec(-100.0, -100.0, 0.25, 0.25, 801, 801)
    covered = np.zeros(probe.shape, dtype=bool)
    for c in cams:
        covered |= coverage_mask(c, probe, 60.0)
    X, Y = probe.cell_centers()
    cx = spec.x0 + (spec.gw - 1) / 2 * spec.dx
    cy = spec.y0 + (spec.gh - 1) / 2 * spec.dy
    assert abs(cx - X[covered].mean()) < 0.3
    assert abs(cy - Y[covered].mean()) < 0.3


def test_grid_fit_translation_equivariance(rng):
    cams = [roadside_camera(rng) for _ in range(4)]
    moved = [CameraCalibration.from_pose(c.center + np.array([10.0, 10.0, 0.0]), 0, 0, c.image_size) for c in cams]
    # rebuild with identical rotations: t' = t - R @ shift
    moved = [CameraCalibration(c.K, c.R, c.t - c.R @ np.array([10.0, 10.0, 0.0]), c.image_size) for c in cams]
    a = fit_grid_to_coverage(cams, 0.5, 96, 100.0)
    b = fit_grid_to_coverage(moved, 0.5, 96, 100.0)
    assert b.x0 - a.x0 == pytest.approx(10.0, abs=1e-6)
    assert b.y0 - a.y0 == pytest.approx(10.0, abs=1e-6)
    assert (b.dx, b.dy, b.gh, b.gw) == (a.dx, a.dy, a.gh, a.gw)


def test_fit_requires_coverage():
    with pytest.raises(ValueError):
        fit_grid_to_coverage([], 0.5, 10)
    sky = CameraCalibration.from_pose((0, 0, 6), 0.0, math.pi / 2, (160, 90))
    with pytest.raises(ValueError):
        fit_grid_to_coverage([sky], 0.5, 10)
