import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gchoreo.body_model import (
    BodyShape,
    Camera,
    MotionSequence,
    Pose,
    capsule_clearance,
    default_skeleton_path,
    forward_kinematics,
    forward_kinematics_t,
    load_skeleton,
    motion_joints,
    pack_pose,
    project,
    project_t,
    skeleton_file_hash,
    unpack_pose,
)
from gchoreo.errors import BehindCameraError, FormatError, InvalidArgumentError
from gchoreo.numerics import as_tensor, from_torch, grad_check, rodrigues

# pin the shipped asset; regenerating it must be a deliberate, versioned change
SKELETON_V1_SHA256 = "a0f2c0eb5a9d951e734ffb1c0c173c7ac2bab465ef7f58f5bbb6a32af9280a86"


class TestSkeletonAsset:
    def test_default_asset_hash_is_pinned(self):
        assert skeleton_file_hash() == SKELETON_V1_SHA256

    def test_structure(self, skeleton):
        assert skeleton.num_joints == 23
        assert skeleton.parents[0] == -1
        assert all(skeleton.parents[j] < j for j in range(1, 23))
        assert set(skeleton.feet) <= set(range(23))
        assert len(skeleton.feet) == 4
        assert np.all(skeleton.radii[1:] > 0)

    def test_rejects_unknown_version(self, tmp_path):
        data = json.loads(default_skeleton_path().read_text())
        data["version"] = "99"
        bad = tmp_path / "skeleton.json"
        bad.write_text(json.dumps(data))
        with pytest.raises(FormatError):
            load_skeleton(bad)


class TestForwardKinematics:
    def test_identity_pose_translates_rest(self, skeleton):
        rest = forward_kinematics(Pose(theta=np.zeros(69), tau=np.zeros(3)), BodyShape(), skeleton)
        moved = forward_kinematics(
            Pose(theta=np.zeros(69), tau=np.array([1.0, 2.0, 3.0])), BodyShape(), skeleton
        )
        assert np.allclose(moved, rest + np.array([1.0, 2.0, 3.0]), atol=1e-12)

    def test_root_rotation_matches_rigid_transform(self, skeleton):
        rest = forward_kinematics(Pose(theta=np.zeros(69), tau=np.zeros(3)), BodyShape(), skeleton)
        theta = np.zeros(69)
        theta[:3] = [0.0, 0.0, np.pi]
        rotated = forward_kinematics(Pose(theta=theta, tau=np.zeros(3)), BodyShape(), skeleton)
        R = rodrigues(np.array([0.0, 0.0, np.pi])).numpy()
        assert np.abs(rotated - rest @ R.T).max() < 1e-12

    def test_beta_scales_every_bone(self, skeleton):
        beta = np.zeros(10)
        beta[0] = 1.0  # overall-size channel scales all bones by 1.1
        rest = forward_kinematics(Pose(theta=np.zeros(69), tau=np.zeros(3)), BodyShape(), skeleton)
        scaled = forward_kinematics(
            Pose(theta=np.zeros(69), tau=np.zeros(3)), BodyShape(beta=beta), skeleton
        )
        pairs = skeleton.bone_pairs()
        rest_len = np.linalg.norm(rest[pairs[:, 1]] - rest[pairs[:, 0]], axis=1)
        new_len = np.linalg.norm(scaled[pairs[:, 1]] - scaled[pairs[:, 0]], axis=1)
        assert np.abs(new_len / rest_len - 1.1).max() < 1e-9

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_bone_lengths_invariant_under_pose(self, seed):
        skeleton = load_skeleton()
        rng = np.random.default_rng(seed)
        beta = rng.normal(0, 0.5, 10)
        pairs = skeleton.bone_pairs()
        rest = forward_kinematics(Pose(theta=np.zeros(69), tau=np.zeros(3)), BodyShape(beta=beta), skeleton)
        rest_len = np.linalg.norm(rest[pairs[:, 1]] - rest[pairs[:, 0]], axis=1)
        posed = forward_kinematics(
            Pose(theta=rng.normal(0, 0.8, 69), tau=rng.normal(0, 1, 3)),
            BodyShape(beta=beta),
            skeleton,
        )
        posed_len = np.linalg.norm(posed[pairs[:, 1]] - posed[pairs[:, 0]], axis=1)
        assert np.abs(posed_len - rest_len).max() < 1e-9

    def test_gradcheck_theta_tau_beta(self, tiny_skeleton):
        rng = np.random.default_rng(4)
        J = tiny_skeleton.num_joints
        target = rng.normal(0, 1, (J, 3))

        def fn(x):
            thetas = x[: 3 * J]
            taus = x[3 * J : 3 * J + 3]
            beta = x[3 * J + 3 :]
            X = forward_kinematics_t(thetas, taus, beta, tiny_skeleton)
            return ((X - as_tensor(target)) ** 2).sum()

        x0 = rng.normal(0, 0.3, 3 * J + 3 + 10)
        report = grad_check(from_torch(fn, dim=x0.size), x0)
        assert report.max_rel_error < 1e-4

    def test_rejects_non_finite(self, skeleton):
        theta = np.zeros(69)
        theta[0] = np.inf
        with pytest.raises(InvalidArgumentError):
            forward_kinematics(Pose(theta=theta, tau=np.zeros(3)), BodyShape(), skeleton)


class TestProjection:
    def test_optical_axis(self, camera):
        assert np.allclose(project(np.array([[0.0, 0.0, 5.0]]), camera), [[500.0, 500.0]])

    def test_closed_form(self, camera):
        assert np.allclose(project(np.array([[1.0, 0.0, 2.0]]), camera), [[1000.0, 500.0]])

    def test_projective_scaling(self, camera):
        near = project(np.array([[0.4, -0.3, 2.0]]), camera)[0]
        far = project(np.array([[0.4, -0.3, 4.0]]), camera)[0]
        assert np.allclose(far - [camera.cx, camera.cy], (near - [camera.cx, camera.cy]) / 2)

    def test_behind_camera_names_joint(self, camera):
        X = np.zeros((2, 3, 3))
        X[..., 2] = 3.0
        X[1, 2, 2] = -0.5
        with pytest.raises(BehindCameraError) as err:
            project(X, camera)
        assert err.value.frame == 1
        assert err.value.joint == 2

    def test_project_fk_gradcheck(self, tiny_skeleton, camera):
        rng = np.random.default_rng(7)
        J = tiny_skeleton.num_joints
        target = rng.uniform(300, 600, (J, 2))

        def fn(x):
            X = forward_kinematics_t(x[: 3 * J], x[3 * J : 3 * J + 3] + as_tensor([0.0, 0.0, 4.0]), x[3 * J + 3 :], tiny_skeleton)
            pix = project_t(X, camera)
            return ((pix - as_tensor(target)) ** 2).sum()

        x0 = rng.normal(0, 0.2, 3 * J + 3 + 10)
        report = grad_check(from_torch(fn, dim=x0.size), x0)
        assert report.max_rel_error < 1e-4


class TestCapsuleClearance:
    def test_parallel_segments(self):
        c = capsule_clearance([[0, 0, 0], [1, 0, 0]], 0.1, [[0, 1, 0], [1, 1, 0]], 0.1)
        assert abs(c - 0.8) < 1e-9

    def test_identical_segments_fully_overlap(self):
        c = capsule_clearance([[0, 0, 0], [1, 0, 0]], 0.1, [[0, 0, 0], [1, 0, 0]], 0.1)
        assert abs(c - (-0.2)) < 1e-8

    def test_matches_dense_sampling_oracle(self, rng):
        for _ in range(5):
            a = rng.normal(0, 1, (2, 3))
            b = rng.normal(0, 1, (2, 3)) + np.array([2.5, 0, 0])
            ra, rb = rng.uniform(0.02, 0.2, 2)
            ts = np.linspace(0, 1, 100)
            pa = a[0] + ts[:, None] * (a[1] - a[0])
            pb = b[0] + ts[:, None] * (b[1] - b[0])
            brute = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1).min() - (ra + rb)
            assert abs(capsule_clearance(a, ra, b, rb) - brute) < 1e-4

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(0, 1, (2, 3))
        b = rng.normal(0, 1, (2, 3))
        ra, rb = rng.uniform(0.01, 0.3, 2)
        assert abs(capsule_clearance(a, ra, b, rb) - capsule_clearance(b, rb, a, ra)) < 1e-12


class TestPosePacking:
    def test_zero_pose(self):
        y = pack_pose(Pose(theta=np.zeros(69), tau=np.zeros(3)))
        assert y.shape == (72,)
        assert not y.any()

    def test_round_trip_exact(self, rng):
        pose = Pose(theta=rng.normal(size=69), tau=rng.normal(size=3))
        back = unpack_pose(pack_pose(pose))
        assert np.array_equal(back.theta, pose.theta)
        assert np.array_equal(back.tau, pose.tau)

    def test_layout_tau_first(self, rng):
        pose = Pose(theta=rng.normal(size=69), tau=np.array([9.0, 8.0, 7.0]))
        assert np.array_equal(pack_pose(pose)[:3], [9.0, 8.0, 7.0])

    def test_rejects_wrong_length(self):
        with pytest.raises(InvalidArgumentError):
            unpack_pose(np.zeros(71))


class TestMotionSequence:
    def test_packed_round_trip(self, rng):
        motion = MotionSequence(thetas=rng.normal(size=(5, 69)), taus=rng.normal(size=(5, 3)))
        back = MotionSequence.from_packed(motion.packed(), beta=motion.beta)
        assert np.array_equal(back.thetas, motion.thetas)
        assert np.array_equal(back.taus, motion.taus)

    def test_motion_joints_shape(self, skeleton, rng):
        motion = MotionSequence(thetas=rng.normal(0, 0.1, (4, 69)), taus=rng.normal(size=(4, 3)))
        assert motion_joints(motion, skeleton).shape == (4, 23, 3)

    def test_rejects_non_finite(self):
        taus = np.zeros((3, 3))
        taus[1, 2] = np.nan
        with pytest.raises(InvalidArgumentError):
            MotionSequence(thetas=np.zeros((3, 69)), taus=taus)
