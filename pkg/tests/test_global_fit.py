import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gchoreo.body_model import (
    GroundPlane,
    MotionSequence,
    Skeleton,
    motion_joints,
    project,
)
from gchoreo.errors import DegenerateGeometryError, InvalidArgumentError
from gchoreo.global_fit import (
    DepthAnnotation,
    GlobalFitConfig,
    e_dep,
    e_gc,
    e_global_total,
    e_pen,
    e_reg,
    fit_global,
    fit_ground_plane,
    max_penetration,
)
from gchoreo.local_fit import ContactLabels, KeypointTrack, local_energy_terms, LocalFitConfig

LN2 = float(np.log(2.0))


def single_bone_skeleton(radius=0.1):
    """Two joints, one capsule; the minimal body for penetration arithmetic."""
    return Skeleton(
        parents=(-1, 0),
        offsets=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        feet=(),
        radii=np.array([0.0, radius]),
        beta_map=np.zeros((2, 10)),
        names=("root", "tip"),
    )


def static_motion(T, tau, thetas=None):
    taus = np.tile(np.asarray(tau, dtype=float), (T, 1))
    return MotionSequence(thetas=np.zeros((T, 69)) if thetas is None else thetas, taus=taus)


def bone_motion(T, tau):
    taus = np.tile(np.asarray(tau, dtype=float), (T, 1))
    return MotionSequence(thetas=np.zeros((T, 3 * 2)), taus=taus)


class TestPenetration:
    def test_far_apart_is_zero(self, skeleton):
        motions = [static_motion(3, (0, 0, 4.0)), static_motion(3, (5.0, 0, 4.0))]
        assert e_pen(motions, skeleton) == 0.0

    def test_single_bone_closed_form(self):
        # identical unit bones with radius 0.1: clearance -0.2 over 3 frames -> 3 * 0.04
        from gchoreo.global_fit import e_pen_t
        from gchoreo.numerics import as_tensor

        skel = single_bone_skeleton(radius=0.1)
        thetas = as_tensor(np.zeros((3, 6)))
        taus = as_tensor(np.zeros((3, 3)))
        beta = as_tensor(np.zeros(10))
        value = float(e_pen_t([thetas, thetas], [taus, taus], [beta, beta], skel))
        assert abs(value - 3 * 0.2**2) < 1e-7

    def test_partial_overlap_closed_form(self):
        from gchoreo.global_fit import e_pen_t
        from gchoreo.numerics import as_tensor

        skel = single_bone_skeleton(radius=0.1)
        thetas = as_tensor(np.zeros((2, 6)))
        taus_a = as_tensor(np.zeros((2, 3)))
        taus_b = as_tensor(np.tile([0.0, 0.1, 0.0], (2, 1)))  # parallel, 0.1 apart
        beta = as_tensor(np.zeros(10))
        value = float(e_pen_t([thetas, thetas], [taus_a, taus_b], [beta, beta], skel))
        assert abs(value - 2 * 0.1**2) < 1e-10

    def test_matches_bruteforce_pairwise_loop(self, skeleton, rng):
        from gchoreo.body_model import capsule_clearance

        motions = [
            MotionSequence(thetas=rng.normal(0, 0.2, (2, 69)), taus=np.array([[0, 0, 4.0]] * 2)),
            MotionSequence(thetas=rng.normal(0, 0.2, (2, 69)), taus=np.array([[0.3, 0, 4.1]] * 2)),
        ]
        expected = 0.0
        joints = [motion_joints(m, skeleton) for m in motions]
        pairs = skeleton.bone_pairs()
        for t in range(2):
            for bi in pairs:
                for bj in pairs:
                    seg_a = joints[0][t, bi]
                    seg_b = joints[1][t, bj]
                    c = capsule_clearance(seg_a, skeleton.radii[bi[1]], seg_b, skeleton.radii[bj[1]])
                    expected += max(0.0, -c) ** 2
        assert abs(e_pen(motions, skeleton) - expected) < 1e-10

    def test_permutation_invariant(self, skeleton, rng):
        motions = [
            MotionSequence(thetas=rng.normal(0, 0.2, (2, 69)), taus=np.array([[dx, 0, 4.0]] * 2))
            for dx in (0.0, 0.25, 0.55)
        ]
        base = e_pen(motions, skeleton)
        permuted = e_pen([motions[2], motions[0], motions[1]], skeleton)
        assert abs(base - permuted) < 1e-12

    def test_needs_two_dancers(self, skeleton):
        with pytest.raises(InvalidArgumentError):
            e_pen([static_motion(2, (0, 0, 4))], skeleton)


class TestRegularization:
    def test_anchor_equals_motion(self, rng):
        m = MotionSequence(thetas=rng.normal(size=(4, 69)), taus=rng.normal(size=(4, 3)))
        assert e_reg(m, m) == 0.0

    def test_uniform_offset_closed_form(self):
        anchor = static_motion(5, (0, 0, 4))
        moved = MotionSequence(thetas=anchor.thetas.copy(), taus=anchor.taus.copy())
        moved.thetas[:, 0] += 1.0
        assert abs(e_reg(moved, anchor) - 5.0) < 1e-12

    def test_independent_of_tau(self, rng):
        anchor = static_motion(4, (0, 0, 4))
        moved = MotionSequence(thetas=anchor.thetas.copy(), taus=rng.normal(size=(4, 3)))
        assert e_reg(moved, anchor) == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            e_reg(static_motion(3, (0, 0, 4)), static_motion(4, (0, 0, 4)))


class TestDepthEnergy:
    def motions_at_depths(self, za, zb, T=1):
        return [static_motion(T, (0, 0, za)), static_motion(T, (1.5, 0, zb))]

    def test_equal_depths_r0_zero(self):
        ann = DepthAnnotation(items=np.array([[0, 0, 1, 0]]))
        assert e_dep(self.motions_at_depths(4.0, 4.0), ann) == 0.0

    def test_equal_depths_r1_ln2(self):
        ann = DepthAnnotation(items=np.array([[0, 0, 1, 1]]))
        assert abs(e_dep(self.motions_at_depths(4.0, 4.0), ann) - LN2) < 1e-12

    def test_satisfied_ordering_asymptote(self):
        ann = DepthAnnotation(items=np.array([[0, 0, 1, 1]]))
        assert e_dep(self.motions_at_depths(4.0, 24.0), ann) < 1e-8

    def test_antisymmetry_exact(self, rng):
        za, zb = 3.7, 4.4
        forward = DepthAnnotation(items=np.array([[0, 0, 1, 1]]))
        backward = DepthAnnotation(items=np.array([[0, 1, 0, -1]]))
        motions = self.motions_at_depths(za, zb)
        assert e_dep(motions, forward) == e_dep(motions, backward)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=100, deadline=None)
    def test_opposing_labels_lower_bound(self, zp, zq):
        # softplus(x) + softplus(-x) >= 2 ln 2, equality iff x = 0
        motions = [static_motion(1, (0, 0, 10 + zp)), static_motion(1, (2, 0, 10 + zq))]
        closer = DepthAnnotation(items=np.array([[0, 0, 1, 1]]))
        farther = DepthAnnotation(items=np.array([[0, 0, 1, -1]]))
        value = e_dep(motions, closer) + e_dep(motions, farther)
        assert value >= 2 * LN2 - 1e-12
        if abs(zp - zq) > 1e-6:
            assert value > 2 * LN2

    def test_antisymmetry_violation_rejected(self):
        with pytest.raises(InvalidArgumentError):
            DepthAnnotation(items=np.array([[0, 0, 1, 1], [0, 1, 0, 1]])).validate_against(2, 1)
        # same-direction duplicate is fine; the contradiction is caught at build
        with pytest.raises(InvalidArgumentError):
            e_dep([static_motion(1, (0, 0, 4)), static_motion(1, (1, 0, 4))],
                  DepthAnnotation(items=np.array([[0, 0, 1, 2]])))


class TestGroundContact:
    def plane(self):
        return GroundPlane(normal=np.array([0.0, -1.0, 0.0]), point=np.array([0.0, 0.95, 4.0]))

    def test_contact_feet_on_plane_zero(self, skeleton):
        scenario_motion = static_motion(4, (0, 0, 4.0))
        feet_y = motion_joints(scenario_motion, skeleton)[0, list(skeleton.feet), 1].max()
        plane = GroundPlane(normal=np.array([0.0, -1.0, 0.0]), point=np.array([0.0, feet_y, 4.0]))
        contacts = ContactLabels(labels=np.ones((4, 4)))
        assert e_gc(scenario_motion, contacts, plane, skeleton) < 1e-18

    def test_hover_closed_form(self, skeleton):
        motion = static_motion(3, (0, 0, 4.0))
        feet_y = motion_joints(motion, skeleton)[0, list(skeleton.feet), 1].max()
        plane = GroundPlane(
            normal=np.array([0.0, -1.0, 0.0]), point=np.array([0.0, feet_y + 0.1, 4.0])
        )
        labels = np.zeros((3, 4))
        labels[0, 2] = 1.0  # l_toe hovers 0.1 m above plane at two labeled frames
        labels[1, 2] = 1.0
        contacts = ContactLabels(labels=labels)
        assert abs(e_gc(motion, contacts, plane, skeleton) - 2 * 0.01) < 1e-12

    def test_no_contacts_zero(self, skeleton, rng):
        motion = MotionSequence(thetas=rng.normal(0, 0.3, (4, 69)), taus=rng.normal(size=(4, 3)))
        contacts = ContactLabels(labels=np.zeros((4, 4)))
        assert e_gc(motion, contacts, self.plane(), skeleton) == 0.0


class TestPlaneFit:
    def test_exact_plane(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30), np.zeros(30)])
        plane = fit_ground_plane(pts, delta=0.05)
        assert abs(abs(plane.normal[2]) - 1.0) < 1e-6
        assert np.abs((pts - plane.point) @ plane.normal).max() < 1e-9

    def test_noisy_plane_one_degree(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack(
            [rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100), rng.normal(0, 0.01, 100)]
        )
        plane = fit_ground_plane(pts, delta=0.05)
        angle = np.degrees(np.arccos(min(1.0, abs(plane.normal[2]))))
        assert angle < 1.0

    def test_outliers_beat_least_squares(self):
        rng = np.random.default_rng(2)
        inlier = np.column_stack(
            [rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100), rng.normal(0, 0.01, 100)]
        )
        outlier = np.column_stack(
            [rng.uniform(0.7, 1.0, 10), rng.uniform(-1, 1, 10), np.ones(10)]
        )
        pts = np.vstack([inlier, outlier])
        plane = fit_ground_plane(pts, delta=0.05)
        huber_angle = np.degrees(np.arccos(min(1.0, abs(plane.normal[2]))))

        centered = pts - pts.mean(axis=0)
        ls_normal = np.linalg.svd(centered, full_matrices=False)[2][-1]
        ls_angle = np.degrees(np.arccos(min(1.0, abs(ls_normal[2]))))
        assert huber_angle < 2.0
        assert ls_angle > 5.0
        assert huber_angle < ls_angle

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(3)
        inlier = np.column_stack(
            [rng.uniform(-1, 1, 80), rng.uniform(-1, 1, 80), rng.normal(0, 0.01, 80)]
        )
        outlier = np.column_stack([rng.uniform(0.6, 1.0, 8), rng.uniform(-1, 1, 8), np.ones(8)])
        pts = np.vstack([inlier, outlier])
        plane = fit_ground_plane(pts, delta=0.05)
        R = Rotation.from_rotvec([0.4, -0.25, 0.65]).as_matrix()
        rotated = fit_ground_plane(pts @ R.T, delta=0.05)
        target = R @ plane.normal
        err = min(np.abs(rotated.normal - target).max(), np.abs(rotated.normal + target).max())
        assert err < 1e-6

    def test_sign_points_toward_reference(self):
        rng = np.random.default_rng(4)
        pts = np.column_stack([rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30), np.zeros(30)])
        plane = fit_ground_plane(pts, delta=0.05, toward=np.array([0.0, 0.0, 2.0]))
        assert plane.normal[2] > 0

    def test_degenerate_collinear(self):
        pts = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3.0]])
        with pytest.raises(DegenerateGeometryError):
            fit_ground_plane(pts)

    def test_too_few_points(self):
        with pytest.raises(DegenerateGeometryError):
            fit_ground_plane(np.array([[0, 0, 0], [1, 0, 0.0]]))


def build_group_scenario(skeleton, camera, depths=(4.0, 4.35), x=(-0.25, 0.25), T=12, amp=0.5):
    tt = np.arange(T) / 30.0
    motions, tracks, contacts = [], [], []
    for k, (xi, zi) in enumerate(zip(x, depths)):
        thetas = np.zeros((T, 69))
        swing = amp * np.sin(2 * np.pi * tt + 0.7 * k)
        thetas[:, 45 + 2] = swing
        thetas[:, 48 + 2] = -swing
        taus = np.zeros((T, 3))
        taus[:, 0] = xi
        taus[:, 2] = zi
        motion = MotionSequence(thetas=thetas, taus=taus)
        motions.append(motion)
        pix = project(motion_joints(motion, skeleton), camera)
        tracks.append(KeypointTrack(positions=pix, confidences=np.ones(pix.shape[:2])))
        contacts.append(ContactLabels(labels=np.ones((T, 4))))
    return motions, tracks, contacts


class TestGlobalTotal:
    def test_weighted_sum_and_zero_weights(self, skeleton, camera):
        motions, tracks, contacts = build_group_scenario(skeleton, camera, T=4)
        ann = DepthAnnotation(items=np.array([[t, 0, 1, 1] for t in range(4)]))
        plane = GroundPlane(normal=np.array([0.0, -1.0, 0.0]), point=np.array([0.0, 0.95, 4.0]))
        cfg = GlobalFitConfig(lambda_pen=2.0, lambda_reg=0.5, lambda_dep=1.5, lambda_gc=3.0)
        anchors = [
            MotionSequence(thetas=m.thetas + 0.01, taus=m.taus.copy()) for m in motions
        ]
        total = e_global_total(motions, tracks, contacts, camera, ann, plane, anchors, skeleton, cfg)
        ej = sum(
            local_energy_terms(m, t, c, camera, skeleton, LocalFitConfig())["e_j"]
            for m, t, c in zip(motions, tracks, contacts)
        )
        expected = (
            ej
            + 2.0 * e_pen(motions, skeleton)
            + 0.5 * sum(e_reg(m, a) for m, a in zip(motions, anchors))
            + 1.5 * e_dep(motions, ann)
            + 3.0 * sum(e_gc(m, c, plane, skeleton) for m, c in zip(motions, contacts))
        )
        assert abs(total - expected) < 1e-10

        zero_cfg = GlobalFitConfig(lambda_pen=0.0, lambda_reg=0.0, lambda_dep=0.0, lambda_gc=0.0)
        assert abs(
            e_global_total(motions, tracks, contacts, camera, ann, plane, anchors, skeleton, zero_cfg)
            - ej
        ) < 1e-12


class TestFitGlobal:
    def test_resolves_constructed_collision(self, skeleton, camera):
        gt, tracks, contacts = build_group_scenario(skeleton, camera, T=12)
        anchors = []
        for m in gt:
            taus = m.taus.copy()
            taus[:, 2] = 4.175  # both dancers collapsed to one depth: arms interpenetrate
            anchors.append(MotionSequence(thetas=m.thetas.copy(), taus=taus))
        assert max_penetration(anchors, skeleton) > 0.05
        ann = DepthAnnotation(items=np.array([[t, 0, 1, 1] for t in range(12)]))
        cfg = GlobalFitConfig(iterations=400)
        refined, plane, trace = fit_global(anchors, tracks, contacts, camera, ann, skeleton, cfg)
        assert max_penetration(refined, skeleton) < 0.005
        accepted = [r["total"] for r in trace if r["accepted"]]
        assert all(a >= b for a, b in zip(accepted, accepted[1:]))

    def test_corrects_contradicted_depth_order(self, skeleton, camera):
        gt, tracks, contacts = build_group_scenario(
            skeleton, camera, depths=(3.9, 4.1), x=(-0.6, 0.6), T=12
        )
        anchors = []
        for k, m in enumerate(gt):
            taus = m.taus.copy()
            if k == 0:
                taus[:, 2] = 4.4  # annotated closer, initialized 0.3 m farther
            anchors.append(MotionSequence(thetas=m.thetas.copy(), taus=taus))
        ann = DepthAnnotation(items=np.array([[t, 0, 1, 1] for t in range(12)]))
        refined, _, _ = fit_global(
            anchors, tracks, contacts, camera, ann, skeleton, GlobalFitConfig(iterations=400)
        )
        agreement = np.mean(refined[0].taus[:, 2] < refined[1].taus[:, 2])
        assert agreement >= 0.95

    def test_consistent_input_is_fixed_point(self, skeleton, camera):
        gt, tracks, contacts = build_group_scenario(
            skeleton, camera, depths=(4.0, 4.0), x=(-0.9, 0.9), T=6, amp=0.0
        )
        ann = DepthAnnotation(items=np.array([[t, 0, 1, 0] for t in range(6)]))
        cfg = GlobalFitConfig(iterations=40)
        refined, plane, trace = fit_global(gt, tracks, contacts, camera, ann, skeleton, cfg)
        anchors = gt
        assert e_global_total(refined, tracks, contacts, camera, ann, plane, anchors, skeleton, cfg) < 1e-12
        for r, g in zip(refined, gt):
            assert np.abs(r.thetas - g.thetas).max() < 1e-6
            assert np.abs(r.taus - g.taus).max() < 1e-6
