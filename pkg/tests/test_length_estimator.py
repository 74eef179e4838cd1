import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtrig.errors import ContractError, DeltaNotIdentifiableError, NoPeriodicityError
from vtrig.length_estimator import (
    PeriodEstimate,
    _secondary_minima,
    distance_curve,
    estimate_period_autocorr,
    l1_distance,
    refine_period,
    samples_to_ns,
)
from vtrig.trace_model import Trace, vt_positions

from .conftest import same_data_trace

vectors = st.integers(1, 40).flatmap(
    lambda n: st.tuples(*(arrays(np.float64, n, elements=st.floats(-1e3, 1e3)) for _ in range(2)))
)


def test_l1_examples(rng):
    assert l1_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert l1_distance([0, 0], [1, 3]) == 2.0
    a, b = rng.normal(size=1000), rng.normal(size=1000)
    total = 0.0
    for x, y in zip(a, b):
        total += abs(x - y)
    assert l1_distance(a, b) == pytest.approx(total / 1000, rel=1e-12)


def test_l1_length_mismatch():
    with pytest.raises(ContractError):
        l1_distance([1.0], [1.0, 2.0])
    with pytest.raises(ContractError):
        l1_distance([], [])


@given(vectors, st.floats(0.01, 100))
def test_l1_metric_properties(ab, scale):
    a, b = ab
    d = l1_distance(a, b)
    assert d >= 0
    assert d == pytest.approx(l1_distance(b, a))
    assert (d == 0) == np.array_equal(a, b)
    assert l1_distance(scale * a, scale * b) == pytest.approx(scale * d, rel=1e-9, abs=1e-12)


def test_square_wave_period_is_exact():
    x = np.tile(np.r_[np.ones(50), -np.ones(50)], 60)
    est = estimate_period_autocorr(Trace(x, 1.0), 60, 150)
    assert est.l_cp_samples == 100.0
    assert est.stage == "approximate"
    assert set(est.peak_spacings) == {100}


def test_white_noise_has_no_periodicity(rng):
    with pytest.raises(NoPeriodicityError, match="no periodicity"):
        estimate_period_autocorr(Trace(rng.normal(size=60000), 1.0), 3000, 6000)


def test_constant_trace_has_no_periodicity():
    with pytest.raises(NoPeriodicityError):
        estimate_period_autocorr(Trace(np.ones(30000), 1.0), 3000, 6000)


def test_autocorr_preconditions():
    with pytest.raises(ContractError):
        estimate_period_autocorr(Trace(np.ones(100), 1.0), 10, 50)
    with pytest.raises(ContractError):
        estimate_period_autocorr(Trace(np.ones(1000), 1.0), 50, 10)


def test_autocorr_within_two_percent_at_moderate_noise():
    _, trace, _ = same_data_trace(n_cps=100, noise_sigma=0.5, seed=4)
    est = estimate_period_autocorr(trace, 3000, 6000)
    assert abs(est.l_cp_samples - 4350.09) / 4350.09 < 0.02


def test_refine_recovers_fractional_period_at_low_noise():
    _, trace, _ = same_data_trace(n_cps=300, noise_sigma=0.001, seed=1)
    est = refine_period(trace, 4350.0, 5.0, 1000)
    assert est.stage == "refined"
    assert abs(est.l_cp_samples - 4350.09) <= 0.005 + 1e-9


def test_refine_on_integer_period_finds_zero():
    _, trace, _ = same_data_trace(n_cps=120, period_samples=4350.0)
    est = refine_period(trace, 4350.0, 5.0, 200)
    assert est.delta_samples == pytest.approx(0.0, abs=1e-12)


def test_curve_smaller_at_truth_than_half_interval_away():
    _, trace, _ = same_data_trace(n_cps=120, noise_sigma=0.01, seed=2)
    approx, interval = 4350.0, 5.0
    width = int(np.floor(approx - interval / 2))

    def brute(length, n=100):
        starts = vt_positions(length, n)
        even = np.mean([trace.samples[s : s + width] for s in starts[0::2]], axis=0)
        odd = np.mean([trace.samples[s : s + width] for s in starts[1::2]], axis=0)
        return np.abs(even - odd).sum() / width

    at_truth, away = brute(4350.09), brute(4350.09 + interval / 2)
    assert at_truth < away
    curve = distance_curve(trace, approx, interval, 500, n_segments=100)
    assert curve[-1, 1] == pytest.approx(brute(approx + interval / 2), rel=1e-12)


def test_refined_argmin_matches_curve_and_estimate():
    _, trace, _ = same_data_trace(n_cps=120, noise_sigma=0.01, seed=3)
    est = refine_period(trace, PeriodEstimate(4350.1, "approximate"), 5.0, 100)
    i = int(np.argmin(est.distance_curve[:, 1]))
    assert est.l_cp_samples - est.approx_length == pytest.approx(est.distance_curve[i, 0])
    assert est.distance_curve.shape == (101, 2)
    np.testing.assert_allclose(est.distance_curve[[0, -1], 0], [-2.5, 2.5])


@settings(max_examples=5, deadline=None)
@given(st.floats(0.01, 100.0))
def test_refine_is_amplitude_scale_invariant(scale):
    _, trace, _ = same_data_trace(n_cps=60, noise_sigma=0.05, seed=5)
    base = refine_period(trace, 4350.0, 5.0, 50)
    scaled = refine_period(Trace(trace.samples * scale, trace.sample_rate_hz), 4350.0, 5.0, 50)
    assert scaled.l_cp_samples == base.l_cp_samples
    np.testing.assert_allclose(scaled.distance_curve[:, 1], scale * base.distance_curve[:, 1], rtol=1e-9)


def test_flat_curve_is_not_identifiable():
    with pytest.raises(DeltaNotIdentifiableError):
        refine_period(Trace(np.ones(50000), 1.0), 4350.0, 5.0, 10)


def test_refine_preconditions():
    trace = Trace(np.ones(20000), 1.0)
    with pytest.raises(ContractError):
        refine_period(trace, 4350.0, 5.0, 1)
    with pytest.raises(ContractError, match="at most"):
        refine_period(trace, 4350.0, 5.0, 10, n_segments=10)


def test_secondary_minimum_flags_ambiguity(caplog):
    d = np.linspace(-1, 1, 41)
    l1 = np.abs(d) + 1.0
    l1[35] = 1.02
    curve = np.column_stack([d, l1])
    assert _secondary_minima(curve, 20, exclusion=10) == [35]
    l1[35] = 1.2
    assert _secondary_minima(np.column_stack([d, l1]), 20, exclusion=10) == []


def test_samples_to_ns():
    assert samples_to_ns(0.09, 5e6) == pytest.approx(18.0)
