import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtrig.attack_eval import (
    Profile,
    attack,
    build_profile,
    fit_length,
    hypothesis_scores,
    meets_success,
    pge_curve,
    pge_from_scores,
    precision_sweep,
    register,
    success_step,
)
from vtrig.errors import ContractError, DegenerateProfileError
from vtrig.synthgen import HW_SBOX, SynthConfig, cp_template, sbox_hw_oracle


def noiseless_segments(key, plaintexts, gain=0.05):
    cfg = SynthConfig(key=key, leak_gain=gain)
    return np.array([cp_template(cfg, p) for p in plaintexts]), cfg


def random_blocks(rng, n):
    return [bytes(rng.integers(0, 256, 16, dtype=np.uint8)) for _ in range(n)]


@pytest.fixture(scope="module")
def noisy_setup():
    rng = np.random.default_rng(77)
    key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    pts = random_blocks(rng, 1200)
    clean, _ = noiseless_segments(key, pts)
    x = clean + rng.normal(scale=0.05, size=clean.shape)
    prof = build_profile(x[:1000], pts[:1000], key, 3)
    return prof, x[1000:], pts[1000:], key


def test_pois_land_on_planted_samples():
    rng = np.random.default_rng(1)
    key = bytes(range(16))
    pts = random_blocks(rng, 300)
    x, cfg = noiseless_segments(key, pts)
    prof = build_profile(x, pts, key, 3)
    for b in range(16):
        start = cfg.idle_len + cfg.poi_offsets[b]
        assert prof.poi_indices[b].tolist() == [start, start + 1, start + 2]


def test_identical_plaintexts_are_degenerate():
    x, _ = noiseless_segments(bytes(16), [bytes(16)] * 10)
    with pytest.raises(DegenerateProfileError):
        build_profile(x, [bytes(16)] * 10, bytes(16), 2)


def test_class_means_monotone_in_hamming_weight(noisy_setup):
    prof = noisy_setup[0]
    for b in range(16):
        m = prof.means[b, :, 0]
        present = prof.class_counts[b] >= 30
        assert np.all(np.diff(m[present]) > 0)


def test_empty_classes_interpolated_and_flagged(caplog):
    key = bytes(16)
    # plaintexts whose SBox outputs only reach weights 3..5
    by_hw = {h: [p for p in range(256) if sbox_hw_oracle(p, 0) == h] for h in range(9)}
    pts = [bytes([by_hw[h][i]] * 16) for h in (3, 4, 5) for i in range(5)]
    x, _ = noiseless_segments(key, pts)
    x = x + np.random.default_rng(0).normal(scale=0.01, size=x.shape)
    with caplog.at_level(logging.WARNING, logger="vtrig"):
        prof = build_profile(x, pts, key, 1)
    assert prof.empty_classes[0] == [0, 1, 2, 6, 7, 8]
    assert np.all(np.isfinite(prof.means)) and np.all(prof.variances > 0)
    assert "interpolated" in caplog.text


def test_abundant_noiseless_attack_ranks_key_first():
    rng = np.random.default_rng(2)
    key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    pts = random_blocks(rng, 400)
    x, _ = noiseless_segments(key, pts)
    prof = build_profile(x[:300], pts[:300], key, 3)
    report = attack(prof, x[300:], pts[300:], key)
    assert report.final().tolist() == [0] * 16


def test_attack_needs_segments(noisy_setup):
    prof, _, _, key = noisy_setup
    with pytest.raises(ContractError):
        attack(prof, [], [], key)


def test_segment_length_mismatch(noisy_setup):
    prof, x, pts, key = noisy_setup
    with pytest.raises(ContractError, match="does not match"):
        attack(prof, x[:, :-1], pts, key)


def toy_profile(mu_hi=1.0, var=(0.5, 2.0)):
    """Two effective classes: HW < 4 and HW >= 4, two POIs."""
    means = np.zeros((16, 9, 2))
    means[:, 4:, :] = mu_hi
    variances = np.empty((16, 9, 2))
    variances[:, :4, :] = var[0]
    variances[:, 4:, :] = var[1]
    return Profile(
        poi_indices=np.tile([0, 1], (16, 1)),
        means=means,
        variances=variances,
        class_counts=np.ones((16, 9), dtype=np.int64),
        n_profiling=9,
        segment_length=2,
    )


def brute_force_ranks(prof, x, pts, key):
    ranks = []
    for b in range(16):
        totals = []
        for k in range(256):
            s = 0.0
            for seg, pt in zip(x, pts):
                h = sbox_hw_oracle(pt[b], k)
                for j in range(2):
                    mu, var = prof.means[b, h, j], prof.variances[b, h, j]
                    s += -0.5 * ((seg[j] - mu) ** 2 / var + math.log(var) + math.log(2 * math.pi))
            totals.append(s)
        ranks.append(sum(t > totals[key[b]] for t in totals))
    return ranks


@pytest.mark.parametrize("n_seg", [1, 2, 3, 4])
def test_ranking_matches_brute_force(n_seg):
    rng = np.random.default_rng(n_seg)
    prof = toy_profile()
    x = rng.normal(size=(n_seg, 2))
    pts = random_blocks(rng, n_seg)
    key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    assert attack(prof, x, pts, key).final().tolist() == brute_force_ranks(prof, x, pts, key)


def test_null_model_mean_rank_is_mid_range():
    rng = np.random.default_rng(3)
    ranks = [pge_from_scores(rng.normal(size=256), rng.integers(256)) for _ in range(500)]
    assert 128 - 15 <= np.mean(ranks) <= 128 + 15


def test_pge_strictly_greater_ties():
    assert pge_from_scores(np.array([1.0, 1.0, 0.5, 2.0]), 0) == 1


@settings(max_examples=20, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 15))
def test_ranking_invariant_to_constant_score_offset(c, b):
    rng = np.random.default_rng(4)
    prof = toy_profile()
    x, pts = rng.normal(size=(3, 2)), random_blocks(rng, 3)
    s = hypothesis_scores(prof, x, pts).sum(axis=1)
    for k in range(0, 256, 37):
        assert pge_from_scores(s[b] + c, k) == pge_from_scores(s[b], k)


@settings(max_examples=5, deadline=None)
@given(st.floats(0.1, 10.0))
def test_ranking_invariant_to_amplitude_rescaling(scale):
    rng = np.random.default_rng(5)
    key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    pts = random_blocks(rng, 260)
    clean, _ = noiseless_segments(key, pts)
    x = clean + rng.normal(scale=0.2, size=clean.shape)
    a = attack(build_profile(x[:200], pts[:200], key, 2), x[200:], pts[200:], key)
    b = attack(build_profile(scale * x[:200], pts[:200], key, 2), scale * x[200:], pts[200:], key)
    assert a.final().tolist() == b.final().tolist()


def test_pge_curve_decreases_and_succeeds(noisy_setup):
    prof, x, pts, key = noisy_setup
    steps = [1, 2, 4, 8, 16, 50, 100, 200]
    report = pge_curve(prof, x, pts, key, steps, n_repetitions=30, seed=1)
    mean = report.pge.mean(axis=1)
    assert np.all(np.diff(mean) <= 1.0)
    assert success_step(report) is not None
    assert report.pge_runs.shape == (30, len(steps), 16)


def test_single_repetition_full_step_equals_attack(noisy_setup):
    prof, x, pts, key = noisy_setup
    curve = pge_curve(prof, x, pts, key, [len(x)], n_repetitions=1)
    np.testing.assert_array_equal(curve.final(), attack(prof, x, pts, key).final())


def test_pge_curve_preconditions(noisy_setup):
    prof, x, pts, key = noisy_setup
    with pytest.raises(ContractError):
        pge_curve(prof, x, pts, key, [len(x) + 1])
    with pytest.raises(ContractError):
        pge_curve(prof, x, pts, key, [0])


def test_success_criterion():
    assert meets_success(np.r_[np.zeros(15), 200])
    assert not meets_success(np.r_[np.zeros(14), 4, 4])


def test_profile_serialises(noisy_setup):
    prof = noisy_setup[0]
    again = Profile.from_dict(prof.to_dict())
    np.testing.assert_array_equal(again.means, prof.means)
    np.testing.assert_array_equal(again.reference, prof.reference)
    assert again.poi_window() == prof.poi_window()


def test_fit_length_crops_or_wraps():
    assert fit_length([1.0, 2.0, 3.0], 2).tolist() == [1.0, 2.0]
    assert fit_length([1.0, 2.0], 5).tolist() == [1.0, 2.0, 1.0, 2.0, 1.0]


def test_register_undoes_small_roll(rng):
    ref = rng.normal(size=500)
    got = register(np.roll(np.r_[ref, 0.0, 0.0], 3), ref, max_lag=5)
    np.testing.assert_array_equal(got, ref)
    assert register(ref, ref).tolist() == ref.tolist()


def test_precision_sweep_contract(noisy_setup):
    prof, _, _, key = noisy_setup
    with pytest.raises(ContractError, match="include 0"):
        precision_sweep(prof, [], [], key, 4350.09, [1.0], 10)


def test_precision_sweep_dedups_and_degrades(caplog):
    rng = np.random.default_rng(8)
    key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    from vtrig.segment_aligner import denoise_pipeline
    from vtrig.synthgen import generate

    def trace(pt, seed):
        cfg = SynthConfig(n_cps=22, repeats_per_plaintext=22, key=key, plaintexts=[pt], noise_sigma=0.2,
                          leak_gain=0.05, seed=seed)
        return generate(cfg)[0]

    pts = random_blocks(rng, 260)
    segs = np.array([denoise_pipeline(trace(p, i), 4350.09, 20).samples for i, p in enumerate(pts[:200])])
    prof = build_profile(segs, pts[:200], key, 3)
    apts = pts[200:]
    traces = (trace(p, 1000 + i) for i, p in enumerate(apts))
    with caplog.at_level(logging.WARNING, logger="vtrig"):
        res = precision_sweep(prof, traces, apts, key, 4350.09, [0.0, 0.0, 12.6], 20, steps=[60], n_repetitions=5)
    assert list(res) == [0.0, 12.6]
    assert "duplicate" in caplog.text
    assert res[12.6].mean_final() > res[0.0].mean_final()

