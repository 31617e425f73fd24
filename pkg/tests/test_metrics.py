import json

import numpy as np
import pytest
from scipy.linalg import sqrtm

from gchoreo.body_model import MotionSequence
from gchoreo.errors import InvalidArgumentError, UndefinedMetricError
from gchoreo.features import MusicFeatures, DEFAULT_LAYOUT
from gchoreo.metrics import (
    MetricsReport,
    evaluate_groups,
    fid_kinetic,
    frechet_gaussian,
    gendiv,
    kinematic_beats,
    kinetic_features,
    mmc,
    pairwise_diversity,
    tif,
)


def static_motion(T, tau=(0.0, 0.0, 4.0)):
    return MotionSequence(thetas=np.zeros((T, 69)), taus=np.tile(np.asarray(tau, float), (T, 1)))


def walking_motion(T, xs):
    taus = np.zeros((T, 3))
    taus[:, 0] = xs
    taus[:, 2] = 4.0
    return MotionSequence(thetas=np.zeros((T, 69)), taus=taus)


def beat_features(T, beat_frames):
    data = np.zeros((T, 28))
    data[np.asarray(beat_frames, dtype=int), 27] = 1.0
    return MusicFeatures(data=data, layout=DEFAULT_LAYOUT)


class TestTIF:
    def test_far_apart_is_zero(self, skeleton):
        motions = [static_motion(10), static_motion(10, (5.0, 0.0, 4.0))]
        assert tif(motions, skeleton) == 0.0

    def test_full_overlap_is_one(self, skeleton):
        motions = [static_motion(10), static_motion(10)]
        assert tif(motions, skeleton) == 1.0

    def test_constructed_quarter(self, skeleton):
        # overlap during exactly 30 of 120 frames
        T = 120
        xs = np.full(T, 5.0)
        xs[45:75] = 0.0
        motions = [static_motion(T), walking_motion(T, xs)]
        assert tif(motions, skeleton) == 0.25

    def test_translation_invariant(self, skeleton, rng):
        base = [
            MotionSequence(thetas=rng.normal(0, 0.2, (8, 69)), taus=np.tile([dx, 0, 4.0], (8, 1)))
            for dx in (0.0, 0.4)
        ]
        shifted = [
            MotionSequence(thetas=m.thetas.copy(), taus=m.taus + np.array([3.0, -1.0, 2.0]))
            for m in base
        ]
        assert tif(base, skeleton) == tif(shifted, skeleton)

    def test_needs_two_dancers(self, skeleton):
        with pytest.raises(InvalidArgumentError):
            tif([static_motion(5)], skeleton)


class TestGenDiv:
    def test_identical_motions_zero(self, skeleton):
        motions = [static_motion(6), static_motion(6)]
        assert gendiv(motions, skeleton) == 0.0

    def test_unit_feature_offset_gives_one(self):
        feats = np.zeros((2, 4))
        feats[1, 2] = 1.0
        assert pairwise_diversity(feats) == 1.0

    def test_permutation_invariant(self, skeleton, rng):
        motions = [
            MotionSequence(thetas=rng.normal(0, 0.2, (6, 69)), taus=rng.normal(0, 0.2, (6, 3)))
            for _ in range(4)
        ]
        assert abs(gendiv(motions, skeleton) - gendiv(motions[::-1], skeleton)) < 1e-12

    def test_needs_two(self, skeleton):
        with pytest.raises(InvalidArgumentError):
            gendiv([static_motion(6)], skeleton)


def pulsing_motion(T, beat_frames, fps=30.0):
    """Speed has strict local minima exactly at the requested speed samples."""
    # speed sample k covers frames k..k+1 and is assigned time (k + 0.5) / fps;
    # build a triangular-speed x trajectory dipping at the beat samples
    speed = np.ones(T - 1)
    for b in beat_frames:
        speed[b] = 0.0
        if b - 1 >= 0:
            speed[b - 1] = 0.6
        if b + 1 < T - 1:
            speed[b + 1] = 0.6
    xs = np.concatenate([[0.0], np.cumsum(speed / fps)])
    return walking_motion(T, xs)


class TestMMC:
    def test_aligned_beats_give_one(self, skeleton):
        beats = [5, 15, 25]
        motion = pulsing_motion(40, beats)
        feats = beat_features(40, [b for b in beats])
        kin = kinematic_beats(motion, skeleton)
        assert np.allclose(sorted(kin), [(b + 0.5) / 30.0 for b in beats])
        value = mmc(motion, feats, sigma=0.1, skeleton=skeleton)
        assert abs(value - 1.0) < 1e-9

    def test_sigma_offset_gives_exp_minus_half(self, skeleton):
        sigma = 0.1
        offset = int(round(sigma * 30))  # 3 frames = 0.1 s
        kin_beats = [6, 16, 26]
        motion = pulsing_motion(40, kin_beats)
        feats = beat_features(40, [b + offset for b in kin_beats])
        value = mmc(motion, feats, sigma=sigma, skeleton=skeleton)
        assert abs(value - np.exp(-0.5)) < 1e-9

    def test_static_motion_returns_zero(self, skeleton):
        feats = beat_features(30, [5, 20])
        assert mmc(static_motion(30), feats, sigma=0.1, skeleton=skeleton) == 0.0

    def test_no_music_beats_is_undefined(self, skeleton):
        feats = beat_features(30, [])
        with pytest.raises(UndefinedMetricError):
            mmc(pulsing_motion(30, [10]), feats, sigma=0.1, skeleton=skeleton)

    def test_time_shift_invariance(self, skeleton):
        kin_beats = [6, 16]
        motion_a = pulsing_motion(45, kin_beats)
        feats_a = beat_features(45, [8, 18])
        motion_b = pulsing_motion(45, [b + 10 for b in kin_beats])
        feats_b = beat_features(45, [18, 28])
        va = mmc(motion_a, feats_a, sigma=0.1, skeleton=skeleton)
        vb = mmc(motion_b, feats_b, sigma=0.1, skeleton=skeleton)
        assert abs(va - vb) < 1e-12


class TestFrechet:
    def test_identical_sets_zero(self, skeleton, rng):
        motions = [
            MotionSequence(thetas=rng.normal(0, 0.2, (6, 69)), taus=rng.normal(0, 0.3, (6, 3)))
            for _ in range(5)
        ]
        assert fid_kinetic(motions, motions, skeleton) <= 1e-8

    def test_equal_covariance_unit_mean_offset(self):
        cov = np.array([[0.5, 0.1], [0.1, 0.4]])
        mu = np.array([1.0, -2.0])
        assert abs(frechet_gaussian(mu, cov, mu + np.array([1.0, 0.0]), cov) - 1.0) < 1e-10

    def test_matches_scipy_sqrtm_oracle(self, rng):
        for _ in range(5):
            a = rng.normal(size=(6, 4))
            b = rng.normal(size=(7, 4))
            cov_a = a.T @ a / 5 + 0.1 * np.eye(4)
            cov_b = b.T @ b / 6 + 0.1 * np.eye(4)
            mu_a, mu_b = rng.normal(size=4), rng.normal(size=4)
            oracle = float(
                ((mu_a - mu_b) ** 2).sum()
                + np.trace(cov_a + cov_b - 2 * np.real(sqrtm(cov_a @ cov_b)))
            )
            assert abs(frechet_gaussian(mu_a, cov_a, mu_b, cov_b) - oracle) < 1e-6

    def test_symmetric(self, skeleton, rng):
        group_a = [
            MotionSequence(thetas=rng.normal(0, 0.2, (6, 69)), taus=rng.normal(0, 0.3, (6, 3)))
            for _ in range(4)
        ]
        group_b = [
            MotionSequence(thetas=rng.normal(0, 0.4, (6, 69)), taus=rng.normal(0, 0.2, (6, 3)))
            for _ in range(4)
        ]
        ab = fid_kinetic(group_a, group_b, skeleton)
        ba = fid_kinetic(group_b, group_a, skeleton)
        assert abs(ab - ba) < 1e-8

    def test_empty_set_rejected(self, skeleton):
        with pytest.raises(InvalidArgumentError):
            fid_kinetic([], [static_motion(6)], skeleton)


class TestKineticFeatures:
    def test_dimension_is_three_per_joint(self, skeleton):
        f = kinetic_features(static_motion(5), skeleton)
        assert f.shape == (3 * skeleton.num_joints,)

    def test_static_motion_is_zero(self, skeleton):
        assert not kinetic_features(static_motion(5), skeleton).any()


class TestReport:
    def test_ranges_validated(self):
        with pytest.raises(InvalidArgumentError):
            MetricsReport(tif=1.5)
        with pytest.raises(InvalidArgumentError):
            MetricsReport(gendiv=-0.1)

    def test_json_includes_variant_labels(self, skeleton, rng):
        groups = [
            [
                MotionSequence(thetas=rng.normal(0, 0.2, (6, 69)), taus=np.tile([dx, 0, 4.0], (6, 1)))
                for dx in (0.0, 0.5)
            ]
            for _ in range(2)
        ]
        report = evaluate_groups(groups, groups, skeleton)
        doc = json.loads(report.to_json())
        assert "documented variant" in doc["variants"]["tif"]
        assert doc["metadata"]["generated_groups"] == 2
        assert doc["fid_kinetic"] <= 1e-8
