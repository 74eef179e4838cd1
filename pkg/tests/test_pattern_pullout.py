import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtrig.errors import ContractError, NoCPsFoundError
from vtrig.pattern_pullout import (
    SegmentTemplate,
    correlation_scores,
    find_occurrences,
    learn_template,
    pullout_denoised,
    pullout_segments,
)
from vtrig.segment_aligner import AlignmentParams, rotate_to_idle, segment_trace
from vtrig.synthgen import cp_template
from vtrig.trace_model import Trace

from .conftest import same_data_trace


@pytest.fixture(scope="module")
def template():
    _, trace, _ = same_data_trace(n_cps=51, noise_sigma=0.05, seed=21)
    return learn_template(trace, 4350.09, 50)


def direct_pearson(x, t):
    w = t.size
    out = np.empty(x.size - w + 1)
    for i in range(out.size):
        win = x[i : i + w]
        sd = win.std()
        out[i] = 0.0 if sd == 0 else np.corrcoef(win, t)[0, 1]
    return out


def test_template_matches_generator(template):
    cfg, _, _ = same_data_trace(n_cps=1)
    clean = cp_template(cfg, cfg.plaintexts[0])
    assert np.corrcoef(template.samples[: clean.size], clean)[0, 1] >= 0.99
    assert template.source["n_averaged"] == 50


def test_single_noiseless_segment_template_is_that_segment_rotated():
    _, trace, _ = same_data_trace(n_cps=2, lead_in=600)
    tpl = learn_template(trace, 4350.09, 1)
    np.testing.assert_array_equal(tpl.samples, rotate_to_idle(trace.samples[:4350], 230).samples)


def test_crop_outside_segment_is_error():
    _, trace, _ = same_data_trace(n_cps=3)
    with pytest.raises(ContractError):
        learn_template(trace, 4350.09, 2, crop=(0, 5000))
    assert len(learn_template(trace, 4350.09, 2, crop=(200, 1000))) == 1000


def test_constant_template_rejected():
    with pytest.raises(ContractError):
        SegmentTemplate(np.ones(10))
    with pytest.raises(ContractError):
        correlation_scores(np.arange(20.0), np.ones(5))


def test_embedded_copies_are_found(rng):
    tpl = rng.normal(size=300)
    x = rng.normal(scale=0.3, size=13000)
    for o in (0, 5000, 12345):
        x[o : o + 300] += tpl
    dets = find_occurrences(Trace(x, 1.0), SegmentTemplate(tpl))
    assert [d.offset for d in dets] == [0, 5000, 12345]
    assert all(d.score >= 0.7 for d in dets)


@pytest.mark.parametrize("seed", range(20))
def test_pure_noise_gives_no_detection(seed):
    r = np.random.default_rng(seed)
    tpl = SegmentTemplate(r.normal(size=400))
    assert find_occurrences(Trace(r.normal(size=20000), 1.0), tpl, 0.7) == []


def test_self_match(rng):
    t = rng.normal(size=500)
    dets = find_occurrences(Trace(t, 1.0), SegmentTemplate(t))
    assert len(dets) == 1 and dets[0].offset == 0 and dets[0].score == pytest.approx(1.0)


@pytest.mark.parametrize("n, w", [(50, 7), (3000, 100), (20000, 500)])
def test_fft_and_direct_agree(rng, n, w):
    x = rng.normal(size=n) + 5.0
    t = rng.normal(size=w)
    a = correlation_scores(x, t, "direct")
    b = correlation_scores(x, t, "fft")
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


def test_scores_match_pearson_oracle(rng):
    x = rng.normal(size=400)
    x[100:140] = 2.0  # zero-variance windows score 0
    t = rng.normal(size=40)
    np.testing.assert_allclose(correlation_scores(x, t), direct_pearson(x, t), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(-1e3, 1e3), st.integers(0, 2**31))
def test_score_affine_invariant(a, b, seed):
    r = np.random.default_rng(seed)
    x, t = r.normal(size=600), r.normal(size=50)
    np.testing.assert_allclose(correlation_scores(a * x + b, t), correlation_scores(x, t), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 400))
def test_detections_sorted_and_spaced(seed, spacing):
    r = np.random.default_rng(seed)
    t = r.normal(size=60)
    x = r.normal(scale=0.5, size=3000)
    for o in r.integers(0, 2900, size=8):
        x[o : o + 60] += t
    dets = find_occurrences(x, SegmentTemplate(t), 0.5, spacing)
    offs = [d.offset for d in dets]
    assert offs == sorted(offs)
    assert all(b - a >= spacing for a, b in zip(offs, offs[1:]))
    assert all(d.score >= 0.5 for d in dets)


def test_bad_threshold():
    with pytest.raises(ContractError):
        find_occurrences(np.arange(10.0), SegmentTemplate([0.0, 1.0]), 0.0)


def test_jittered_trace_recall_and_precision(template):
    _, trace, truth = same_data_trace(n_cps=40, noise_sigma=0.5, seed=5, jitter_max=200)
    m = pullout_segments(trace, template)
    starts = np.asarray(truth.cp_start_indices)
    starts = starts[starts + len(template) <= len(trace)]
    assert m.n_rows == starts.size
    assert np.abs(m.origin_offsets - starts).max() <= 2


def test_jitter_free_pullout_matches_vt_rows(template):
    _, trace, _ = same_data_trace(n_cps=12, noise_sigma=0.1, seed=6, lead_in=1000)
    po = pullout_segments(trace, template)
    vt = segment_trace(trace, 4350.09, 11)
    phase = (po.origin_offsets[0] - vt.origin_offsets[0]) % 4350
    assert np.all(np.abs((po.origin_offsets[: vt.n_rows] - vt.origin_offsets - phase + 1) % 4350 - 1) <= 1)


def test_unattainable_threshold_reports_best_score(template):
    _, trace, _ = same_data_trace(n_cps=5, noise_sigma=0.5, seed=7)
    with pytest.raises(NoCPsFoundError) as info:
        pullout_segments(trace, template, threshold=1.0)
    assert 0.5 < info.value.max_score < 1.0


def test_pullout_denoised_limit_and_alignment(template):
    _, trace, _ = same_data_trace(n_cps=10, noise_sigma=0.2, seed=8, jitter_max=100)
    rows, d = pullout_denoised(trace, template, limit=6)
    assert rows.n_rows == 6 and d.n_averaged == 6
    rows2, d2 = pullout_denoised(trace, template, params=AlignmentParams(max_lag=5), align=True)
    assert d2.n_averaged == rows2.n_rows
