from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose, random_rotation
from toolpose.geometry import (
    BehindCameraError,
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    StereoRig,
    back_project,
    compose,
    project,
    project_points,
    rot_z,
    transform_points,
)

seeds = st.integers(0, 2**32 - 1)


def _close_pose(a: RigidTransform, b: RigidTransform, tol=1e-9):
    return (np.abs(a.rotation - b.rotation).max() <= tol
            and np.abs(a.translation - b.translation).max() <= tol)


class TestTypes:
    def test_intrinsics_invariants(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 10, 10)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 10.0, 1.0, 10, 10)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 0, 10)
        intr = CameraIntrinsics(500.0, 400.0, 320.0, 240.0, 640, 480)
        assert intr.shape == (480, 640)
        assert CameraIntrinsics.from_K(intr.K, 640, 480) == intr

    def test_rig_baseline_positive(self, intr640):
        with pytest.raises(ValueError):
            StereoRig(intr640, 0.0)

    def test_rotation_must_be_orthonormal(self):
        R = np.eye(3)
        R[0, 0] = 1 + 1e-6
        with pytest.raises(ValueError):
            RigidTransform(R, np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_pose_arrays_read_only(self):
        T = RigidTransform.identity()
        with pytest.raises(ValueError):
            T.rotation[0, 0] = 2.0

    def test_point_cloud_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan, 1.0]]))


class TestCompose:
    def test_identity_law(self, rng):
        T = random_pose(rng)
        assert _close_pose(compose(RigidTransform.identity(), T), T)

    def test_inverse_law(self, rng):
        T = random_pose(rng)
        assert _close_pose(compose(T, T.inverse()), RigidTransform.identity())

    def test_rot_z_composition(self):
        a = RigidTransform(rot_z(90), np.zeros(3))
        c = compose(a, a)
        assert np.abs(c.rotation - rot_z(180)).max() < 1e-12

    def test_formula(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        c = compose(a, b)
        np.testing.assert_allclose(c.rotation, a.rotation @ b.rotation, atol=1e-12)
        np.testing.assert_allclose(c.translation, a.rotation @ b.translation + a.translation, atol=1e-12)
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(c.apply(p), a.apply(b.apply(p)), atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_associative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_pose(rng) for _ in range(3))
        assert _close_pose(compose(compose(a, b), c), compose(a, compose(b, c)))

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_double_inverse(self, seed):
        T = random_pose(np.random.default_rng(seed))
        assert _close_pose(T.inverse().inverse(), T)

    def test_drift_reorthonormalized(self, rng):
        T = RigidTransform(random_rotation(rng), np.zeros(3))
        acc = RigidTransform.identity()
        for _ in range(2000):
            acc = compose(acc, T)
        RtR = acc.rotation.T @ acc.rotation
        assert np.abs(RtR - np.eye(3)).max() <= 1e-9


class TestTransformPoints:
    def test_examples(self):
        pc = PointCloud(np.array([[1.0, 2.0, 3.0]]))
        assert np.array_equal(transform_points(RigidTransform.identity(), pc).points, pc.points)
        T = RigidTransform(np.eye(3), np.array([0.0, 0.0, 5.0]))
        out = transform_points(T, PointCloud(np.zeros((1, 3))))
        assert np.array_equal(out.points, [[0.0, 0.0, 5.0]])
        Rz = RigidTransform(rot_z(90), np.zeros(3))
        out = transform_points(Rz, PointCloud(np.array([[1.0, 0.0, 0.0]])))
        assert np.abs(out.points - [[0.0, 1.0, 0.0]]).max() < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_rigidity(self, seed):
        rng = np.random.default_rng(seed)
        T = random_pose(rng)
        p = rng.uniform(-100, 100, (20, 3))
        q = transform_points(T, PointCloud(p)).points
        dp = np.linalg.norm(p[:, None] - p[None], axis=-1)
        dq = np.linalg.norm(q[:, None] - q[None], axis=-1)
        assert np.abs(dp - dq).max() < 1e-9


class TestProjection:
    def test_examples(self, intr640):
        assert project(intr640, (0.0, 0.0, 100.0)) == (320.0, 240.0)
        assert project(intr640, (10.0, 0.0, 100.0)) == (370.0, 240.0)
        with pytest.raises(BehindCameraError):
            project(intr640, (0.0, 0.0, -5.0))
        with pytest.raises(BehindCameraError):
            project(intr640, (0.0, 0.0, 1e-7))

    def test_back_project_examples(self, intr640):
        assert np.array_equal(back_project(intr640, 320.0, 240.0, 100.0), [0.0, 0.0, 100.0])
        assert np.allclose(back_project(intr640, 370.0, 240.0, 100.0), [10.0, 0.0, 100.0], atol=1e-12)
        with pytest.raises(ValueError):
            back_project(intr640, 1.0, 1.0, 0.0)

    def test_round_trip_1000(self, rng, intr640):
        u = rng.uniform(0, 640, 1000)
        v = rng.uniform(0, 480, 1000)
        z = rng.uniform(1, 5000, 1000)
        uv = project_points(intr640, back_project(intr640, u, v, z))
        assert np.abs(uv - np.stack([u, v], axis=1)).max() < 1e-9

    def test_project_points_matches_scalar(self, rng, intr640):
        pts = rng.uniform(-50, 50, (30, 3))
        pts[:, 2] += 200
        uv = project_points(intr640, pts)
        for p, q in zip(pts, uv):
            assert np.allclose(project(intr640, p), q, rtol=0, atol=1e-12)
        pts[3, 2] = -1
        with pytest.raises(BehindCameraError):
            project_points(intr640, pts)
