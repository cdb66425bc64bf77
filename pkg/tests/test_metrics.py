import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionseq.errors import ValidationError
from motionseq.metrics import (
    FeatureSet,
    GaussianSummary,
    GeometricConfig,
    ToyCoEmbedding,
    beat_alignment,
    diversity,
    feature_fid,
    feature_set,
    fid,
    gaussian_summary,
    geometric_features,
    kinematic_beats,
    kinetic_features,
    multimodal_distance,
    r_precision,
    repeated,
)
from motionseq.motion import MotionSequence, resample_fps, synth_motion


def random_summary(rng, d):
    a = rng.standard_normal((d, d))
    return GaussianSummary(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d))


# kinetic / geometric


def test_kinetic_constant_is_zero():
    f = kinetic_features(synth_motion("constant", 30, 4))
    assert f.shape == (8,) and np.all(f == 0)
    with pytest.raises(ValidationError):
        kinetic_features(np.zeros((2, 3)))


def test_kinetic_sinusoid_analytic():
    fps, amp, w = 20.0, 0.7, 2 * np.pi * 0.5
    t = np.arange(400) / fps  # 20 periods
    seq = MotionSequence(np.stack([amp * np.sin(w * t), np.zeros_like(t)], axis=1), fps)
    mean_v2 = kinetic_features(seq)[0]
    assert abs(mean_v2 - amp**2 * w**2 / 2) / (amp**2 * w**2 / 2) < 0.05


def test_kinetic_fps_doubling_stable():
    # The same continuous curves sampled at 20 and 40 fps. Linear resampling is
    # avoided here: its kinks inflate the acceleration term.
    a = kinetic_features(synth_motion("sine-walk", 200, 3, base_freq=0.5, fps=20.0))
    b = kinetic_features(synth_motion("sine-walk", 400, 3, base_freq=0.5, fps=40.0))
    assert np.all(np.abs(a - b) / a < 0.1)
    # velocity survives linear resampling as well
    c = kinetic_features(resample_fps(synth_motion("sine-walk", 200, 3, base_freq=0.5), 40.0))
    assert np.all(np.abs(a[:3] - c[:3]) / a[:3] < 0.1)


def test_geometric_joint_mode():
    frames = np.zeros((10, 6))
    frames[:, 3:] = [0.0, 0.0, 0.05]  # joint 1 sits 5 cm above joint 0
    cfg = GeometricConfig(n_joints=2)
    f = geometric_features(frames, cfg)
    # [close, dx>0, dy>0, dz>0] for (0 - 1)
    assert f.tolist() == [1.0, 0.0, 0.0, 0.0]
    frames[:5, 3:] = [-1.0, 0.0, 0.0]
    assert geometric_features(frames, cfg).tolist() == [0.5, 0.5, 0.0, 0.0]


def test_geometric_frozen_pose_equals_single_frame(rng):
    pose = rng.standard_normal((1, 9))
    cfg = GeometricConfig(n_joints=3, distance_threshold=1.0)
    many = geometric_features(np.repeat(pose, 7, axis=0), cfg)
    one = geometric_features(pose, cfg)
    assert np.array_equal(many, one) and np.all((many == 0) | (many == 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_geometric_values_in_unit_interval(seed):
    x = np.random.default_rng(seed).standard_normal((12, 12))
    f = geometric_features(x, GeometricConfig(n_joints=4, distance_threshold=1.5))
    assert f.shape == (24,) and np.all((f >= 0) & (f <= 1))


def test_geometric_fallback_channel_stats(rng):
    x = rng.standard_normal((20, 5))
    np.testing.assert_allclose(geometric_features(x), np.concatenate([x.mean(0), x.std(0)]))


def test_feature_set_validation():
    with pytest.raises(ValidationError):
        FeatureSet(np.zeros((3, 1)))
    with pytest.raises(ValidationError):
        FeatureSet(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValidationError):
        feature_set([], "kinetic")
    fs = feature_set([synth_motion("sine-walk", 20, 3, seed=s) for s in range(4)], "kinetic")
    assert fs.features.shape == (4, 6) and fs.extractor == "kinetic"


# gaussian summary and fid


def test_summary_identical_rows_zero_cov():
    s = gaussian_summary(np.ones((2, 3)))
    assert np.all(s.cov == 0)
    with pytest.raises(ValidationError):
        gaussian_summary(np.ones((1, 3)))


def test_summary_sampling_oracle():
    x = np.random.default_rng(7).standard_normal((10000, 2))
    s = gaussian_summary(x)
    assert np.abs(s.mean).max() < 0.05 and np.abs(s.cov - np.eye(2)).max() < 0.1


def test_summary_two_pass(rng):
    x = rng.standard_normal((50, 4)) * 3 + 10
    n = len(x)
    mu = [sum(x[i, k] for i in range(n)) / n for k in range(4)]
    cov = np.array(
        [[sum((x[i, a] - mu[a]) * (x[i, b] - mu[b]) for i in range(n)) / (n - 1) for b in range(4)] for a in range(4)]
    )
    s = gaussian_summary(x)
    assert np.abs(s.cov - cov).max() < 1e-10 and np.array_equal(s.cov, s.cov.T)


def test_fid_self_and_symmetry(rng):
    for _ in range(20):
        a, b = random_summary(rng, 5), random_summary(rng, 5)
        assert fid(a, a) < 1e-6
        assert abs(fid(a, b) - fid(b, a)) < 1e-6
        assert fid(a, b) >= 0


def test_fid_mean_shift_law(rng):
    a = random_summary(rng, 6)
    delta = rng.standard_normal(6)
    b = GaussianSummary(a.mean + delta, a.cov.copy())
    assert fid(a, b) == pytest.approx(float(delta @ delta), rel=1e-9, abs=1e-9)


def test_fid_scalar_case():
    a = GaussianSummary(np.zeros(1), np.array([[1.0]]))
    b = GaussianSummary(np.zeros(1), np.array([[4.0]]))
    assert fid(a, b) == pytest.approx(1.0, abs=1e-12)


def test_fid_diagonal_oracle(rng):
    va, vb = rng.uniform(0.1, 2, 4), rng.uniform(0.1, 2, 4)
    a = GaussianSummary(np.zeros(4), np.diag(va))
    b = GaussianSummary(np.ones(4), np.diag(vb))
    assert fid(a, b) == pytest.approx(4 + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2), rel=1e-10)


def test_fid_errors():
    a = GaussianSummary(np.zeros(2), np.eye(2))
    with pytest.raises(ValidationError):
        fid(a, GaussianSummary(np.zeros(3), np.eye(3)))
    with pytest.raises(ValidationError):
        fid(a, GaussianSummary(np.array([np.nan, 0]), np.eye(2)))


def test_feature_fid_same_set_zero(rng):
    fs = FeatureSet(rng.standard_normal((30, 4)) * [1, 100, 0.01, 5])
    assert feature_fid(fs, fs) < 1e-6


# diversity


def test_diversity_cases(rng):
    assert diversity(np.ones((5, 3))) == 0
    assert diversity(np.array([[0.0, 0.0], [3.0, 0.0]])) == 3.0
    x = rng.standard_normal((10, 4))
    brute = [math.dist(x[i], x[j]) for i in range(10) for j in range(i + 1, 10)]
    assert abs(diversity(x, n_pairs=45) - sum(brute) / 45) < 1e-12
    assert abs(diversity(x) - sum(brute) / 45) < 1e-12
    assert diversity(x, n_pairs=10, seed=3) == diversity(x, n_pairs=10, seed=3)
    with pytest.raises(ValidationError):
        diversity(x[:1])


# beats


def test_pulse_dance_beats_at_construction():
    seq = synth_motion("pulse-dance", 100, 8, base_freq=2.0)
    beats = kinematic_beats(seq)
    want = np.arange(10, 100 - 1, 10)
    assert len(beats) == len(want)
    assert np.all(np.abs(beats - want) <= 1)


def test_no_interior_beats_for_monotone_or_constant():
    t = np.arange(30.0)[:, None]
    assert kinematic_beats(t**2).size == 0
    assert kinematic_beats(np.zeros((30, 3))).size == 0


def test_beat_alignment_closed_forms():
    beats = [3, 10, 17]
    assert beat_alignment(beats, beats) == 1.0
    assert abs(beat_alignment([6, 13, 20], beats, sigma=3.0) - math.exp(-0.5)) < 1e-9
    assert beat_alignment([1, 2], []) == 0.0
    with pytest.warns(RuntimeWarning):
        assert beat_alignment([], [1]) == 0.0


def test_beat_alignment_brute_force(rng):
    kin = rng.integers(0, 200, 15)
    mus = rng.integers(0, 200, 9)
    total = 0.0
    for t in kin:
        d = min(abs(int(t) - int(u)) for u in mus)
        total += math.exp(-(d**2) / 18.0)
    assert abs(beat_alignment(kin, mus) - total / len(kin)) < 1e-12


def test_beat_alignment_monotone_in_offset():
    mus = np.arange(0, 200, 20)
    vals = [beat_alignment(mus + k, mus) for k in range(11)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= 1 for v in vals)


def test_shifted_pulse_dance_aligns_poorly():
    seq = synth_motion("pulse-dance", 200, 8, base_freq=2.0)
    music = np.arange(0, 200, 10)
    assert beat_alignment(kinematic_beats(seq), music) > 0.9
    shifted = MotionSequence(seq.frames[5:], 20.0)
    assert beat_alignment(kinematic_beats(shifted), music) < 0.5


# retrieval


def test_r_precision_perfect_and_monotone(rng):
    m = rng.standard_normal((64, 8))
    assert r_precision(m, m) == 1.0
    t = m + rng.standard_normal((64, 8)) * 0.8
    tops = [r_precision(m, t, top=k, seed=2) for k in (1, 2, 3)]
    assert tops[0] <= tops[1] <= tops[2]
    with pytest.raises(ValidationError):
        r_precision(m[:10], m[:10])


def test_r_precision_chance_level():
    r = np.random.default_rng(11)
    m, t = r.standard_normal((2000, 8)), r.standard_normal((2000, 8))
    assert abs(r_precision(m, t) - 1 / 32) < 0.03


def test_multimodal_distance(rng):
    m = rng.standard_normal((12, 5))
    assert multimodal_distance(m, m) == 0
    d = rng.standard_normal(5)
    assert multimodal_distance(m, m + d) == pytest.approx(np.linalg.norm(d), rel=1e-12)
    t = rng.standard_normal((12, 5))
    brute = sum(math.dist(a, b) for a, b in zip(m, t)) / 12
    assert abs(multimodal_distance(m, t) - brute) < 1e-12
    with pytest.raises(ValidationError):
        multimodal_distance(m, t[:3])


def test_toy_coembedding_retrieves_labels():
    kinds = ["sine-walk", "pulse-dance"]
    seqs = [synth_motion(kinds[i % 2], 60, 4, base_freq=1.0 + i % 2, seed=i) for i in range(40)]
    labels = [kinds[i % 2] for i in range(40)]
    emb = ToyCoEmbedding(dim=8).fit(seqs, labels)
    m, t = emb.embed_motion(seqs), emb.embed_text(labels)
    assert multimodal_distance(m, t) < multimodal_distance(m, t[::-1])
    with pytest.raises(ValidationError):
        emb.embed_text(["tango"])


def test_repeated_mean_std():
    mean, std = repeated(lambda s: float(s % 2), n_repeats=4)
    assert mean == 0.5 and std == 0.5
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = repeated(lambda s: diversity(np.arange(20.0).reshape(10, 2), n_pairs=5, seed=s), n_repeats=5)
    assert a == repeated(lambda s: diversity(np.arange(20.0).reshape(10, 2), n_pairs=5, seed=s), n_repeats=5)
