"""CP length discovery.

Two stages: the auto-correlation of a trace of back-to-back CPs peaks at every
multiple of the CP length, which gives an approximate length; a sweep of
sub-sample corrections then picks the length for which the average of the
even-indexed segments and the average of the odd-indexed segments agree best.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft
from scipy.signal import find_peaks

from .errors import ContractError, DeltaNotIdentifiableError, NoPeriodicityError
from .trace_model import vt_positions

log = logging.getLogger(__name__)

__all__ = [
    "PeriodEstimate",
    "autocorrelation",
    "estimate_period_autocorr",
    "refine_period",
    "l1_distance",
    "distance_curve",
    "samples_to_ns",
]

APPROXIMATE = "approximate"
REFINED = "refined"

# lag window extends to this many multiples of max_period
LAG_MULTIPLES = 10
PEAK_FRACTION = 0.5
# peaks must also clear this many standard errors of a white-noise correlation
NOISE_SIGMAS = 5.0
AMBIGUITY_FRACTION = 0.05


@dataclass
class PeriodEstimate:
    l_cp_samples: float
    stage: str
    distance_curve: np.ndarray | None = None  # rows of (delta_samples, l1)
    peak_spacings: list | None = None
    approx_length: float | None = None
    warnings: list = field(default_factory=list)

    @property
    def delta_samples(self):
        if self.approx_length is None:
            return 0.0
        return self.l_cp_samples - self.approx_length


def samples_to_ns(samples, sample_rate_hz):
    return np.asarray(samples, dtype=np.float64) * 1e9 / sample_rate_hz


def autocorrelation(x, max_lag):
    """Mean-removed, unbiased auto-correlation for lags ``0..max_lag``.

    Each lag is normalised by its number of overlapping products so that
    peaks of a stationary periodic signal keep equal heights.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    max_lag = min(int(max_lag), n - 1)
    nfft = sp_fft.next_fast_len(n + max_lag + 1, real=True)
    spec = sp_fft.rfft(x, nfft)
    ac = sp_fft.irfft(spec * np.conj(spec), nfft)[: max_lag + 1]
    return ac / (n - np.arange(max_lag + 1))


def estimate_period_autocorr(trace, min_period, max_period):
    """Approximate CP length from the spacing of auto-correlation peaks.

    Peaks are searched for lags in ``[min_period, LAG_MULTIPLES * max_period]``
    (clipped so at least ``max_period`` samples overlap), must exceed half of
    the largest correlation in that window and be at least ``min_period``
    apart. They must also stand out from white noise, whose correlation at
    lag ``l`` has standard error ``ac[0] / sqrt(n - l)``. The estimate is the
    mean spacing between consecutive peaks.
    """
    if not 0 < min_period < max_period:
        raise ContractError("need 0 < min_period < max_period")
    n = len(trace)
    if n < 3 * max_period:
        raise ContractError(f"trace of {n} samples is shorter than 3 * max_period = {3 * max_period}")
    hi = min(LAG_MULTIPLES * max_period, n - max_period)
    ac = autocorrelation(trace.samples, hi)
    if ac[0] <= 0:
        raise NoPeriodicityError("no periodicity detected: trace is constant")
    window = ac[min_period : hi + 1]
    top = window.max()
    if top <= 0:
        raise NoPeriodicityError("no periodicity detected: no positive correlation at any lag")
    lags_all = np.arange(min_period, hi + 1)
    floor = np.maximum(PEAK_FRACTION * top, NOISE_SIGMAS * ac[0] / np.sqrt(n - lags_all))
    # pad so a maximum on the window edge still counts as a peak
    padded = np.concatenate([[-np.inf], window, [-np.inf]])
    idx, _ = find_peaks(padded, height=np.concatenate([[np.inf], floor, [np.inf]]), distance=min_period)
    lags = idx - 1 + min_period
    if lags.size < 2:
        raise NoPeriodicityError(
            f"no periodicity detected: {lags.size} correlation peak(s) in [{min_period}, {hi}]"
        )
    spacings = np.diff(lags)
    est = float(spacings.mean())
    if not min_period <= est <= max_period:
        raise NoPeriodicityError(
            f"no periodicity detected: peak spacing {est:.1f} outside [{min_period}, {max_period}]"
        )
    return PeriodEstimate(est, APPROXIMATE, peak_spacings=[int(s) for s in spacings])


def l1_distance(seg_a, seg_b):
    """Mean absolute difference between two equal-length segments."""
    a = np.asarray(seg_a, dtype=np.float64)
    b = np.asarray(seg_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ContractError(f"segments must be 1-D with equal non-zero length, got {a.shape} and {b.shape}")
    return float(np.abs(a - b).sum() / a.size)


def _even_odd_distance(x, starts, width):
    acc_even = np.zeros(width)
    acc_odd = np.zeros(width)
    for k, s in enumerate(starts):
        if k & 1:
            acc_odd += x[s : s + width]
        else:
            acc_even += x[s : s + width]
    n_even = (len(starts) + 1) // 2
    n_odd = len(starts) // 2
    return l1_distance(acc_even / n_even, acc_odd / n_odd)


def _sweep_layout(n_total, approx, interval_samples, n_segments):
    lo = approx - interval_samples / 2.0
    hi = approx + interval_samples / 2.0
    width = int(np.floor(lo))
    if width < 1:
        raise ContractError("interval is larger than the approximate length")
    # the longest candidate decides how many segments fit
    feasible = int((n_total - width) // hi) + 1
    if n_segments is None:
        n_segments = feasible
    if n_segments < 2:
        raise ContractError("need at least 2 segments to compare even and odd groups")
    if n_segments > feasible:
        raise ContractError(
            f"trace of {n_total} samples holds at most {feasible} segments of length {hi:.3f}"
        )
    return width, n_segments


def distance_curve(trace, approx_length, interval_samples, n_steps, n_segments=None):
    """Evaluate the even/odd L1 distance over the correction sweep.

    Returns an array of ``(delta_samples, l1)`` rows with ``n_steps + 1``
    candidates spaced ``interval_samples / n_steps`` apart from
    ``-interval/2`` to ``+interval/2``. Every candidate cuts the same
    ``n_segments`` segments of a common width ``floor(approx - interval/2)``
    starting at sample 0.
    """
    if n_steps < 2:
        raise ContractError("n_steps must be >= 2")
    if not interval_samples > 0:
        raise ContractError("interval must be positive")
    x = trace.samples
    width, n_segments = _sweep_layout(x.size, approx_length, interval_samples, n_segments)
    deltas = np.linspace(-interval_samples / 2.0, interval_samples / 2.0, n_steps + 1)
    l1 = np.empty_like(deltas)
    for i, d in enumerate(deltas):
        starts = vt_positions(approx_length + d, n_segments)
        l1[i] = _even_odd_distance(x, starts, width)
    return np.column_stack([deltas, l1])


def _secondary_minima(curve, argmin, exclusion):
    l1 = curve[:, 1]
    best = l1[argmin]
    out = []
    for i in range(1, l1.size - 1):
        if abs(i - argmin) <= exclusion:
            continue
        if l1[i] <= l1[i - 1] and l1[i] <= l1[i + 1] and l1[i] <= best * (1 + AMBIGUITY_FRACTION):
            out.append(i)
    return out


def refine_period(trace, approx, interval_samples, n_steps, n_segments=None):
    """Refine ``approx`` to the length minimising the even/odd L1 distance.

    The global minimum wins (lowest delta on ties). A warning is attached
    when another local minimum more than ten steps away comes within 5 % of
    it.
    """
    approx_length = approx.l_cp_samples if isinstance(approx, PeriodEstimate) else float(approx)
    curve = distance_curve(trace, approx_length, interval_samples, n_steps, n_segments)
    l1 = curve[:, 1]
    span = l1.max() - l1.min()
    if span <= 1e-9 * max(abs(l1.max()), np.finfo(float).tiny):
        raise DeltaNotIdentifiableError("delta not identifiable: distance curve is flat")
    i_best = int(np.argmin(l1))
    warnings = []
    others = _secondary_minima(curve, i_best, exclusion=10)
    if others:
        alt = ", ".join(f"{curve[i, 0]:+.4f}" for i in others[:5])
        msg = (
            f"ambiguous delta: {len(others)} secondary minima within {AMBIGUITY_FRACTION:.0%} "
            f"of the global one at {curve[i_best, 0]:+.4f} samples (e.g. {alt})"
        )
        log.warning(msg)
        warnings.append(msg)
    return PeriodEstimate(
        approx_length + float(curve[i_best, 0]),
        REFINED,
        distance_curve=curve,
        peak_spacings=approx.peak_spacings if isinstance(approx, PeriodEstimate) else None,
        approx_length=approx_length,
        warnings=warnings,
    )
