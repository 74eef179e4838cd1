"""Virtual-trigger segmentation, fine alignment and idle-instant rotation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ContractError
from .trace_model import DenoisedSegment, SegmentMatrix, round_half_down, vt_positions

__all__ = [
    "AlignmentParams",
    "segment_trace",
    "max_segments",
    "fine_align",
    "sliding_variance",
    "rotate_to_idle",
    "denoise_pipeline",
    "average_rows",
]

PLAIN = "plain"
NORMALIZED = "normalized"


@dataclass(frozen=True)
class AlignmentParams:
    """Search bound for fine alignment and idle-instant window, in samples.

    ``max_lag=None`` means 5 % of the segment width.
    """

    max_lag: int | None = None
    idle_window: int = 230
    correlation_mode: str = PLAIN

    def __post_init__(self):
        if self.correlation_mode not in (PLAIN, NORMALIZED):
            raise ContractError(f"unknown correlation mode {self.correlation_mode!r}")
        if self.max_lag is not None and self.max_lag < 0:
            raise ContractError("max_lag must be non-negative")
        if self.idle_window < 1:
            raise ContractError("idle_window must be positive")

    def lag_bound(self, width):
        lag = int(0.05 * width) if self.max_lag is None else int(self.max_lag)
        if 2 * lag >= width:
            raise ContractError(f"max_lag={lag} must be below half the segment width {width}")
        return lag


def max_segments(trace_len, l_cp, start_offset=0):
    """Largest n with ``start_offset + round(n * l_cp) <= trace_len``."""
    n = int((trace_len - start_offset) // l_cp) + 1
    while n > 0 and start_offset + int(round_half_down(n * l_cp)) > trace_len:
        n -= 1
    return n


def segment_trace(trace, l_cp_samples, n_segments, start_offset=0):
    """Cut ``n_segments`` rows of ``floor(l_cp)`` samples at the virtual triggers."""
    if n_segments < 1:
        raise ContractError("n_segments must be >= 1")
    if not l_cp_samples >= 1:
        raise ContractError("l_cp_samples must be >= 1")
    if start_offset < 0:
        raise ContractError("start_offset must be non-negative")
    end = start_offset + int(round_half_down(n_segments * l_cp_samples))
    if end > len(trace):
        raise BoundsError(
            f"{n_segments} segments of {l_cp_samples} samples need {end} samples but the trace "
            f"has {len(trace)}; at most {max_segments(len(trace), l_cp_samples, start_offset)} fit"
        )
    starts = vt_positions(l_cp_samples, n_segments, start_offset)
    return SegmentMatrix.from_trace(trace, starts, int(np.floor(l_cp_samples)))


def _best_lag(row_spec, template_spec, width, lag_bound):
    # corr[l] = sum_j template[j] * row[(j + l) % width]
    corr = np.fft.irfft(np.conj(template_spec) * row_spec, width)
    lags = np.arange(-lag_bound, lag_bound + 1)
    window = corr[lags % width]
    i = int(np.argmax(window))
    return int(lags[i]), float(window[i])


def fine_align(segments, params=AlignmentParams()):
    """Align rows one after another against the running average, then average.

    The first row seeds the template. Every following row is circularly
    shifted by the lag in ``[-max_lag, max_lag]`` that maximises its
    correlation with the current template, after which the template becomes
    the mean of all rows aligned so far. Ties go to the most negative lag.

    With circular shifts the row norm does not depend on the lag, so both
    correlation modes choose the same lag; ``normalized`` only differs in
    working on mean-removed rows.
    """
    rows = segments.rows if isinstance(segments, SegmentMatrix) else np.asarray(segments, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ContractError("fine_align needs at least one row")
    n, width = rows.shape
    if n == 1:
        return DenoisedSegment(rows[0], 1, 0, shifts=np.zeros(1, dtype=np.int64))
    lag_bound = params.lag_bound(width)
    work = rows - rows.mean(axis=1, keepdims=True) if params.correlation_mode == NORMALIZED else rows
    specs = np.fft.rfft(work, axis=1)

    shifts = np.zeros(n, dtype=np.int64)
    acc = rows[0].copy()
    acc_spec = specs[0].copy()
    for i in range(1, n):
        lag, _ = _best_lag(specs[i], acc_spec / i, width, lag_bound)
        shifts[i] = lag
        acc += np.roll(rows[i], -lag)
        # rolling by -lag multiplies the spectrum by exp(+2 pi i k lag / width)
        phase = np.exp(2j * np.pi * np.arange(acc_spec.size) * lag / width)
        acc_spec += specs[i] * phase
    return DenoisedSegment(acc / n, n, 0, shifts=shifts)


def sliding_variance(x, window, circular=True):
    """Population variance of every ``window``-long run, one pass over cumsums.

    With ``circular=True`` the buffer is extended by its own first ``window``
    samples and one value per start index ``0..len(x)-1`` is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= window <= x.size:
        raise ContractError(f"window {window} must lie in [1, {x.size}]")
    ext = np.concatenate([x, x[:window]]) if circular else x
    ext = ext - x.mean()
    c1 = np.concatenate([[0.0], np.cumsum(ext)])
    c2 = np.concatenate([[0.0], np.cumsum(ext * ext)])
    n_win = x.size if circular else x.size - window + 1
    s1 = c1[window : window + n_win] - c1[:n_win]
    s2 = c2[window : window + n_win] - c2[:n_win]
    mean = s1 / window
    return np.maximum(s2 / window - mean * mean, 0.0)


def rotate_to_idle(segment, idle_window):
    """Rotate so the minimum-variance ``idle_window`` run starts at index 0.

    The variance scan runs on the segment followed by its own first
    ``idle_window`` samples, so a quiet run cut in two by the segment boundary
    is still found. Near-ties (within 1e-12 of the variance range) resolve to
    the lowest start index.
    """
    if not isinstance(segment, DenoisedSegment):
        segment = DenoisedSegment(np.asarray(segment, dtype=np.float64), 1)
    x = segment.samples
    if not 1 <= idle_window < x.size:
        raise ContractError(f"idle_window {idle_window} must be smaller than the segment ({x.size})")
    var = sliding_variance(x, idle_window, circular=True)
    tol = 1e-12 * max(var.max() - var.min(), np.finfo(float).tiny)
    m = int(np.flatnonzero(var <= var.min() + tol)[0])
    return DenoisedSegment(np.roll(x, -m), segment.n_averaged, m, shifts=segment.shifts)


def denoise_pipeline(trace, l_cp, n_segments, params=AlignmentParams(), start_offset=0, anchored=False):
    """Segment, fine-align, average and rotate one same-data trace.

    When ``l_cp`` is off by a few samples, every row holds that many samples
    too many or too few and the average carries a seam where the content
    jumps. With ``anchored=True`` a first pass locates the idle instant and
    the trace is cut again starting there, so the seam falls into the idle
    run instead of the active part. The trace then needs room for one more
    CP.
    """
    seg = segment_trace(trace, l_cp, n_segments, start_offset)
    out = rotate_to_idle(fine_align(seg, params), params.idle_window)
    if not anchored:
        return out
    return denoise_pipeline(trace, l_cp, n_segments, params, start_offset + out.rotation_phase)


def average_rows(segments, params=None):
    """Average already aligned rows, optionally fine-aligning them first."""
    if params is not None:
        return fine_align(segments, params)
    rows = segments.rows if isinstance(segments, SegmentMatrix) else np.asarray(segments, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ContractError("need at least one row to average")
    return DenoisedSegment(rows.mean(axis=0), rows.shape[0], 0, shifts=np.zeros(rows.shape[0], dtype=np.int64))
