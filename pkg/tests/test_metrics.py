"""Metric oracles: analytic kinetic/FID/diversity values, BAS, FSR, beats."""

import numpy as np
import pytest

from beatflow.config import EvalConfig
from beatflow.metrics import (
    FeatureSet,
    aggregate_speed,
    bas,
    detect_motion_beats,
    diversity,
    dominant_frequency,
    evaluate_sets,
    expected_normal_diversity,
    fid,
    fsr,
    geometric_features,
    kinetic_features,
)
from beatflow.motion import SKELETONS
from beatflow.synth import Segment, TrackSpec, gen_track, track_poses

FPS = 30.0


def poses_array(track):
    skel = SKELETONS["toy5"]
    init = skel.rest_pose()
    decoded = track_poses(track)
    return np.stack([init.joint_pos] + [p.joint_pos for p in decoded])


class TestKinetic:
    def test_frozen_motion_all_zero(self):
        pos = np.tile(np.random.default_rng(0).normal(size=(1, 4, 3)), (20, 1, 1))
        assert np.all(kinetic_features(pos) == 0.0)

    def test_uniform_translation_zero_accel(self):
        t = np.arange(50)[:, None, None]
        pos = np.zeros((50, 3, 3)) + t * np.array([0.02, 0.0, 0.01])
        f = kinetic_features(pos).reshape(3, 3)
        assert np.allclose(f[:, 1], 0.0, atol=1e-12)  # mean accel
        assert np.allclose(f[:, 2], 0.0, atol=1e-12)  # speed variance
        assert np.allclose(f[:, 0], np.hypot(0.02, 0.01), atol=1e-12)

    def test_sinusoid_mean_speed_matches_4af(self):
        a, f_hz = 0.3, 1.0
        t = np.arange(3000) / FPS
        pos = np.zeros((3000, 1, 3))
        pos[:, 0, 0] = a * np.sin(2 * np.pi * f_hz * t)
        mean_speed = kinetic_features(pos)[0] * FPS  # m/frame -> m/s
        assert mean_speed == pytest.approx(4 * a * f_hz, rel=0.02)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            kinetic_features(np.zeros((2, 4, 3)))


class TestGeometric:
    def test_rest_pose_distances(self):
        skel = SKELETONS["toy5"]
        pose = skel.rest_pose()
        pos = np.tile(pose.joint_pos[None], (10, 1, 1))
        f = geometric_features(pos)
        K = skel.n_joints
        iu = np.triu_indices(K, k=1)
        expect = np.linalg.norm(pose.joint_pos[iu[0]] - pose.joint_pos[iu[1]], axis=1)
        assert np.allclose(f[: len(expect)], expect, atol=1e-12)

    def test_translation_invariant(self):
        rng = np.random.default_rng(1)
        pos = rng.normal(size=(20, 5, 3))
        shifted = pos + np.array([3.0, -1.0, 7.0])
        assert np.allclose(geometric_features(pos), geometric_features(shifted), atol=1e-9)

    def test_yaw_invariant(self):
        rng = np.random.default_rng(2)
        pos = rng.normal(size=(15, 4, 3))
        th = 1.1
        R = np.array([[np.cos(th), 0, np.sin(th)], [0, 1, 0], [-np.sin(th), 0, np.cos(th)]])
        assert np.allclose(geometric_features(pos), geometric_features(pos @ R.T), atol=1e-9)


class TestFid:
    def test_identical_sets_zero(self):
        m = np.random.default_rng(0).normal(size=(50, 6))
        a = FeatureSet("kinetic", m)
        assert fid(a, FeatureSet("kinetic", m.copy())) <= 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = FeatureSet("kinetic", rng.normal(size=(80, 5)))
        b = FeatureSet("kinetic", rng.normal(size=(70, 5)) + 0.3)
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)

    def test_mean_shift_closed_form(self):
        rng = np.random.default_rng(2)
        d = np.array([1.0, -2.0, 0.5])
        a = FeatureSet("kinetic", rng.normal(size=(10_000, 3)))
        b = FeatureSet("kinetic", rng.normal(size=(10_000, 3)) + d)
        assert fid(a, b) == pytest.approx(float(d @ d), rel=0.05)

    def test_variance_gap_closed_form(self):
        rng = np.random.default_rng(3)
        a = FeatureSet("kinetic", rng.normal(size=(20_000, 1)))
        b = FeatureSet("kinetic", rng.normal(size=(20_000, 1)) * 2.0)
        assert fid(a, b) == pytest.approx(1.0, rel=0.05)

    def test_kind_and_dim_mismatch(self):
        a = FeatureSet("kinetic", np.zeros((3, 2)))
        with pytest.raises(ValueError, match="kinds"):
            fid(a, FeatureSet("geometric", np.zeros((3, 2))))
        with pytest.raises(ValueError, match="dimensions"):
            fid(a, FeatureSet("kinetic", np.zeros((3, 4))))

    def test_row_order_invariant(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(60, 4))
        b = FeatureSet("kinetic", rng.normal(size=(60, 4)) + 0.5)
        v1 = fid(FeatureSet("kinetic", m), b)
        v2 = fid(FeatureSet("kinetic", m[rng.permutation(60)]), b)
        assert v1 == pytest.approx(v2, abs=1e-9)


class TestDiversity:
    def test_identical_rows_zero(self):
        assert diversity(FeatureSet("kinetic", np.ones((10, 4)))) == 0.0

    def test_two_rows_exact(self):
        m = np.array([[0.0, 0.0], [3.0, 4.0]])
        assert diversity(FeatureSet("kinetic", m)) == pytest.approx(5.0)

    def test_standard_normal_matches_chi_expectation(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(4000, 16))
        got = diversity(FeatureSet("kinetic", m), n_pairs=100_000, seed=0)
        assert got == pytest.approx(expected_normal_diversity(16), rel=0.03)

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            diversity(FeatureSet("kinetic", np.zeros((1, 3))))

    def test_exact_regime_order_invariant(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(15, 3))  # 105 pairs <= default 200 -> exact mean
        a = diversity(FeatureSet("kinetic", m))
        b = diversity(FeatureSet("kinetic", m[rng.permutation(15)]))
        assert a == pytest.approx(b, abs=1e-12)


class TestMotionBeats:
    def test_constant_velocity_empty(self):
        t = np.arange(60)[:, None, None]
        pos = np.zeros((60, 2, 3)) + t * 0.01
        assert detect_motion_beats(pos).size == 0

    def test_frozen_empty(self):
        assert detect_motion_beats(np.zeros((30, 3, 3))).size == 0

    def test_minimum_gap_enforced(self):
        t = np.arange(300) / FPS
        pos = np.zeros((300, 1, 3))
        pos[:, 0, 0] = np.sin(2 * np.pi * 2.0 * t)  # speed minima every 7.5 frames
        beats = detect_motion_beats(pos)
        assert beats.size > 0
        assert np.all(np.diff(beats) >= 4)
        assert np.all(np.diff(beats) > 3)

    def test_synth_track_beats_within_1_frame(self):
        spec = TrackSpec(12.0, (Segment(0.0, 120.0, 0),), seed=0)
        track = gen_track(spec)
        pos = poses_array(track)
        detected = detect_motion_beats(pos)
        annotated = np.round(track.beat_times * FPS).astype(int)
        annotated = annotated[(annotated > 2) & (annotated < pos.shape[0] - 3)]
        hits = sum(np.abs(detected - a).min() <= 1 for a in annotated)
        assert hits / len(annotated) >= 0.9, (hits, len(annotated))

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            detect_motion_beats(np.zeros((4, 2, 3)))


class TestAggregateSpeed:
    def test_frozen_is_zero(self):
        pos = np.tile(np.random.default_rng(0).normal(size=(1, 4, 3)), (10, 1, 1))
        assert np.array_equal(aggregate_speed(pos), np.zeros(9))

    def test_uniform_translation_exact(self):
        step = np.array([0.03, 0.0, 0.04])  # length 0.05
        pos = np.zeros((12, 3, 3)) + np.arange(12)[:, None, None] * step
        np.testing.assert_allclose(aggregate_speed(pos), 0.05, atol=1e-12)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="2 frames"):
            aggregate_speed(np.zeros((1, 3, 3)))


class TestDominantFrequency:
    def test_pure_tone_on_bin(self):
        t = np.arange(300) / FPS
        f = dominant_frequency(np.sin(2 * np.pi * 3.0 * t), fps=FPS, window=60)
        assert np.all(np.isnan(f[:59]))
        np.testing.assert_allclose(f[59:], 3.0)

    def test_dc_offset_does_not_leak_into_lowest_bin(self):
        # rectified tone: huge DC, fundamental at twice the base frequency
        t = np.arange(300) / FPS
        sig = np.abs(np.sin(2 * np.pi * 2.0 * t)) + 5.0
        f = dominant_frequency(sig, fps=FPS, window=60)
        np.testing.assert_allclose(f[59:], 4.0)

    def test_frequency_step_tracked_within_one_window(self):
        t = np.arange(240) / FPS
        sig = np.where(t < 4.0, np.sin(2 * np.pi * 2.0 * t), np.sin(2 * np.pi * 1.0 * t))
        f = dominant_frequency(sig, fps=FPS, window=60)
        assert f[119] == pytest.approx(2.0)   # last pre-switch frame
        assert f[180] == pytest.approx(1.0)   # one window after the switch

    def test_short_signal_all_nan(self):
        assert np.all(np.isnan(dominant_frequency(np.zeros(10), window=60)))

    def test_window_bound(self):
        with pytest.raises(ValueError):
            dominant_frequency(np.zeros(100), window=3)

    def test_tempo_switch_track_halves(self):
        spec = TrackSpec(16.0, (Segment(0.0, 120.0, 1), Segment(8.0, 60.0, 1)), seed=2)
        track = gen_track(spec)
        speed = aggregate_speed(poses_array(track))
        f = dominant_frequency(speed, fps=FPS, window=60)
        assert f[8 * 30 - 2] == pytest.approx(2.0)  # steady 120 BPM
        assert f[-1] == pytest.approx(1.0)          # steady 60 BPM


class TestBas:
    def test_perfect_alignment(self):
        beats = np.array([0.5, 1.0, 1.5])
        assert bas(beats, beats) == pytest.approx(1.0)

    def test_single_sigma_offset(self):
        assert bas([1.1], [1.0], sigma_s=0.1) == pytest.approx(np.exp(-0.5))

    def test_no_motion_beats_scores_zero(self):
        assert bas([], [1.0, 2.0]) == 0.0

    def test_monotone_in_uniform_offset(self):
        audio = np.arange(1, 10) * 0.5
        prev = 2.0
        for off in (0.0, 0.05, 0.1, 0.2):
            cur = bas(audio + off, audio, sigma_s=0.1)
            assert cur <= prev + 1e-12
            prev = cur

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            bas([1.0], [1.0], sigma_s=0.0)


class TestFsr:
    def _walk(self, slide: float, height: float = 0.0):
        pos = np.zeros((40, 3, 3))
        pos[:, 0, 1] = 1.0  # body above
        pos[:, 1:, 1] = height
        pos[:, 1, 0] = np.arange(40) * slide
        return pos

    def test_pinned_feet_zero(self):
        assert fsr(self._walk(slide=0.0), foot_indices=(1, 2)) == 0.0

    def test_constant_slide_at_floor_is_one(self):
        assert fsr(self._walk(slide=0.05), foot_indices=(1, 2)) == 1.0

    def test_lifted_feet_do_not_count(self):
        assert fsr(self._walk(slide=0.05, height=0.3), foot_indices=(1, 2)) == 0.0

    def test_airborne_com_excused(self):
        pos = self._walk(slide=0.05)
        t = np.arange(40) / FPS
        pos[:, 0, 1] += 2.0 * t * t  # strong vertical acceleration: not in contact
        assert fsr(pos, foot_indices=(1, 2)) == 0.0

    def test_no_feet_tagged(self):
        with pytest.raises(ValueError, match="foot"):
            fsr(np.zeros((10, 2, 3)), foot_indices=())

    def test_synth_ground_truth_clean(self):
        spec = TrackSpec(8.0, (Segment(0.0, 120.0, 2),), seed=3)
        pos = poses_array(gen_track(spec))
        assert fsr(pos, SKELETONS["toy5"].foot_indices) == 0.0


class TestReport:
    def test_full_report_on_synth(self):
        tracks = [
            gen_track(TrackSpec(6.0, (Segment(0.0, tempo, s),), seed=s))
            for s, tempo in enumerate((60.0, 90.0, 120.0, 150.0))
        ]
        pos = [poses_array(t) for t in tracks]
        beats = [t.beat_times for t in tracks]
        rep = evaluate_sets(pos, pos, beats, SKELETONS["toy5"].foot_indices,
                            fps=FPS, cfg=EvalConfig())
        assert rep["fid_k"] <= 1e-6 and rep["fid_g"] <= 1e-6
        assert rep["bas"] > 0.9
        assert rep["fsr"] == 0.0
        assert rep["n_sequences"] == 4
        assert rep["div_k"] > 0.0

    def test_empty_generated_rejected(self):
        with pytest.raises(ValueError):
            evaluate_sets([], [], [], (0,))
