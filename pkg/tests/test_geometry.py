import numpy as np
import pytest

from occanykit.geometry import (
    DegenerateGeometryError,
    GeometryError,
    Intrinsics,
    Pose7,
    apply_pose,
    compose,
    estimate_focal,
    fit_trajectory_line,
    inverse,
    register_pointmaps,
)
from helpers import random_unit_quat, rotation_angle_between


class TestPose:
    def test_identity_leaves_points(self, rng):
        pts = rng.standard_normal((17, 3))
        np.testing.assert_array_equal(apply_pose(Pose7.identity(), pts), pts)

    def test_quarter_turn_about_z(self):
        s = np.sin(np.pi / 4)
        pose = Pose7.create((np.cos(np.pi / 4), 0, 0, s), (0, 0, 0))
        out = apply_pose(pose, np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-15)

    def test_pure_translation(self):
        pose = Pose7.create((1, 0, 0, 0), (0, 0, 5))
        out = apply_pose(pose, np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(out, [[1.0, 2.0, 8.0]])

    def test_compose_matches_nested_application(self, rng):
        for _ in range(20):
            a = Pose7.create(random_unit_quat(rng), rng.standard_normal(3))
            b = Pose7.create(random_unit_quat(rng), rng.standard_normal(3))
            p = rng.standard_normal((5, 3))
            np.testing.assert_allclose(
                apply_pose(compose(a, b), p), apply_pose(a, apply_pose(b, p)), atol=1e-12
            )

    def test_inverse_round_trip(self, rng):
        for _ in range(50):
            t = Pose7.create(random_unit_quat(rng), rng.uniform(-10, 10, 3))
            p = rng.uniform(-10, 10, (8, 3))
            np.testing.assert_allclose(
                apply_pose(inverse(t), apply_pose(t, p)), p, atol=1e-12
            )

    def test_canonical_sign_enforced(self):
        with pytest.raises(GeometryError, match="canonical"):
            Pose7(q=(-1.0, 0.0, 0.0, 0.0), t=(0, 0, 0))
        pose = Pose7.create((-1.0, 0.0, 0.0, 0.0), (0, 0, 0))
        assert pose.q[0] == 1.0

    def test_non_finite_points_rejected(self):
        with pytest.raises(GeometryError, match="non-finite"):
            apply_pose(Pose7.identity(), np.array([[np.nan, 0, 0]]))


class TestRegistration:
    def test_identity_when_maps_coincide(self, rng):
        pm = rng.uniform(-5, 5, (8, 8, 3))
        conf = rng.uniform(1.5, 4.0, (8, 8))
        pose = register_pointmaps(pm, pm, conf)
        assert rotation_angle_between(pose, Pose7.identity()) < 1e-9
        assert np.linalg.norm(pose.translation) < 1e-9

    def test_recovers_known_transform(self, rng):
        for _ in range(25):
            t = Pose7.create(random_unit_quat(rng), rng.uniform(-5, 5, 3))
            local = rng.uniform(-10, 10, (10, 10, 3))
            glob = apply_pose(t, local)
            conf = rng.uniform(1.1, 9.0, (10, 10))
            rec = register_pointmaps(local, glob, conf)
            assert rotation_angle_between(rec, t) < 1e-9
            assert np.linalg.norm(rec.translation - t.translation) < 1e-9

    def test_degenerate_identical_points(self):
        local = np.ones((4, 4, 3))
        with pytest.raises(DegenerateGeometryError):
            register_pointmaps(local, local + 1.0, np.full((4, 4), 2.0))

    def test_too_few_valid_pixels(self, rng):
        local = rng.standard_normal((4, 4, 3))
        valid = np.zeros((4, 4), dtype=bool)
        valid[0, 0] = valid[0, 1] = True
        with pytest.raises(DegenerateGeometryError, match="valid pixels"):
            register_pointmaps(local, local, np.full((4, 4), 2.0), valid)

    def test_collinear_points_degenerate(self):
        local = np.zeros((1, 5, 3))
        local[0, :, 2] = np.arange(5)  # points on a line
        with pytest.raises(DegenerateGeometryError, match="rank"):
            register_pointmaps(local, local + (1, 0, 0), np.full((1, 5), 2.0))

    def test_confidence_scaling_invariance(self, rng):
        t = Pose7.create(random_unit_quat(rng), rng.uniform(-2, 2, 3))
        local = rng.uniform(-5, 5, (6, 6, 3))
        glob = apply_pose(t, local) + 0.01 * rng.standard_normal((6, 6, 3))
        conf = rng.uniform(1.5, 4.0, (6, 6))
        a = register_pointmaps(local, glob, conf)
        b = register_pointmaps(local, glob, conf * 37.5)
        assert rotation_angle_between(a, b) < 1e-12
        assert np.linalg.norm(a.translation - b.translation) < 1e-12

    def test_valid_mask_excludes_outliers(self, rng):
        t = Pose7.create(random_unit_quat(rng), rng.uniform(-2, 2, 3))
        local = rng.uniform(-5, 5, (6, 6, 3))
        glob = apply_pose(t, local)
        glob[0, 0] = 1e6  # corrupted pixel, masked out
        valid = np.ones((6, 6), dtype=bool)
        valid[0, 0] = False
        rec = register_pointmaps(local, glob, np.full((6, 6), 2.0), valid)
        assert rotation_angle_between(rec, t) < 1e-9


def _pinhole_pointmap(f, h, w, depth, cx=None, cy=None):
    cx = w / 2 if cx is None else cx
    cy = h / 2 if cy is None else cy
    cc, rr = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return np.stack([(cc - cx) / f * depth, (rr - cy) / f * depth, depth * np.ones((h, w))], -1)


class TestFocal:
    def test_frontoparallel_plane(self):
        pm = _pinhole_pointmap(100.0, 32, 32, np.full((32, 32), 5.0))
        f = estimate_focal(pm, (16.0, 16.0))
        assert abs(f - 100.0) / 100.0 < 1e-6

    def test_exact_on_random_depth(self, rng):
        for _ in range(10):
            f = rng.uniform(50, 500)
            depth = rng.uniform(1, 40, (24, 32))
            pm = _pinhole_pointmap(f, 24, 32, depth)
            assert abs(estimate_focal(pm, (16.0, 12.0)) - f) / f < 1e-6

    def test_axis_only_pixels_error(self):
        pm = np.zeros((8, 8, 3))
        pm[:, :, 2] = 5.0  # all x = y = 0: every pixel sits on the optical axis
        with pytest.raises(DegenerateGeometryError, match="off-axis"):
            estimate_focal(pm, (4.0, 4.0))

    def test_behind_camera_error(self):
        pm = _pinhole_pointmap(100.0, 16, 16, np.full((16, 16), -3.0))
        with pytest.raises(DegenerateGeometryError, match="z > 0"):
            estimate_focal(pm, (8.0, 8.0))

    def test_intrinsics_validation(self):
        with pytest.raises(GeometryError):
            Intrinsics(-1.0, 1.0, 1.0, 1.0)


def _principal_axis_oracle(ts: np.ndarray, iters: int = 400) -> np.ndarray:
    """Power iteration on the centered covariance; independent of eigh."""
    c = ts - ts.mean(axis=0)
    cov = c.T @ c
    v = np.array([1.0, 0.7, 0.3])
    for _ in range(iters):
        v = cov @ v
        v = v / np.linalg.norm(v)
    return v


class TestTrajectory:
    def test_exactly_collinear(self):
        poses = [Pose7.create((1, 0, 0, 0), (0, 0, float(z))) for z in range(3)]
        origin, direction = fit_trajectory_line(poses)
        np.testing.assert_allclose(origin, [0, 0, 2])
        np.testing.assert_allclose(direction, [0, 0, 1], atol=1e-12)

    def test_single_pose_fallback(self):
        origin, direction = fit_trajectory_line([Pose7.identity()])
        np.testing.assert_array_equal(origin, [0, 0, 0])
        np.testing.assert_allclose(direction, [0, 0, 1])

    def test_coincident_translations_fallback(self, rng):
        q = random_unit_quat(rng)
        poses = [Pose7.create(q, (1, 2, 3))] * 3
        origin, direction = fit_trajectory_line(poses)
        np.testing.assert_array_equal(origin, [1, 2, 3])
        np.testing.assert_allclose(direction, poses[-1].rotation @ [0, 0, 1], atol=1e-12)

    def test_noisy_line_matches_power_iteration(self, rng):
        base = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
        ts = np.outer(np.linspace(0, 10, 30), base)
        ts += 0.01 * rng.standard_normal(ts.shape)
        poses = [Pose7.create((1, 0, 0, 0), t) for t in ts]
        _, direction = fit_trajectory_line(poses)
        oracle = _principal_axis_oracle(ts)
        if oracle @ direction < 0:
            oracle = -oracle
        assert np.linalg.norm(direction - oracle) < 1e-6
        assert np.linalg.norm(direction - base) < 0.01

    def test_direction_oriented_with_travel(self):
        poses = [Pose7.create((1, 0, 0, 0), (0, 0, -float(z))) for z in range(4)]
        _, direction = fit_trajectory_line(poses)
        assert direction[2] < 0  # points from first toward last

    def test_empty_list_error(self):
        with pytest.raises(GeometryError, match="empty"):
            fit_trajectory_line([])
