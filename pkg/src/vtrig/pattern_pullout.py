"""Template learning and correlation-based CP pullout.

A template is the denoised, idle-rotated segment of a jitter-free profiling
trace. On any other trace the zero-mean, unit-norm correlation with the
template is evaluated at every offset and CPs are taken at its peaks, which
tolerates arbitrary gaps between consecutive CPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft
from scipy.signal import find_peaks

from .errors import ContractError, NoCPsFoundError
from .segment_aligner import AlignmentParams, average_rows, denoise_pipeline
from .trace_model import SegmentMatrix

__all__ = [
    "SegmentTemplate",
    "Detection",
    "learn_template",
    "correlation_scores",
    "find_occurrences",
    "pullout_segments",
    "pullout_denoised",
    "DEFAULT_THRESHOLD",
    "FFT_CUTOFF",
]

DEFAULT_THRESHOLD = 0.7
# direct summation below this many multiply-adds, FFT above
FFT_CUTOFF = 1 << 22


@dataclass(frozen=True)
class SegmentTemplate:
    samples: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ContractError("a template needs at least two samples")
        if not np.var(s) > 0:
            raise ContractError("template is constant")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class Detection:
    offset: int
    score: float


def learn_template(profiling_trace, l_cp, n_segments, params=AlignmentParams(), crop=None):
    """Denoise a jitter-free profiling trace into a template.

    ``crop=(start, length)`` keeps a sub-window of the rotated segment.
    """
    seg = denoise_pipeline(profiling_trace, l_cp, n_segments, params)
    x = seg.samples
    if crop is not None:
        start, length = (int(v) for v in crop)
        if start < 0 or length < 2 or start + length > x.size:
            raise ContractError(f"crop ({start}, {length}) does not fit a {x.size}-sample segment")
        x = x[start : start + length]
    return SegmentTemplate(
        x,
        source={
            "trace": profiling_trace.source_id,
            "n_averaged": seg.n_averaged,
            "rotation_phase": seg.rotation_phase,
            "crop": None if crop is None else list(crop),
        },
    )


def _numerator_direct(x, t0):
    return np.correlate(x, t0, mode="valid")


def _numerator_fft(x, t0):
    n, w = x.size, t0.size
    nfft = sp_fft.next_fast_len(n + w - 1, real=True)
    prod = sp_fft.rfft(x, nfft) * sp_fft.rfft(t0[::-1], nfft)
    full = sp_fft.irfft(prod, nfft)
    return full[w - 1 : n]


def correlation_scores(trace, template, method="auto"):
    """Pearson correlation of the template with every full-length window.

    ``method`` is ``"direct"``, ``"fft"`` or ``"auto"`` (FFT once
    ``len(trace) * len(template)`` exceeds ``FFT_CUTOFF``). Windows with no
    variance score 0.
    """
    x = np.asarray(getattr(trace, "samples", trace), dtype=np.float64)
    t = np.asarray(getattr(template, "samples", template), dtype=np.float64)
    w = t.size
    if x.size < w:
        raise ContractError(f"trace ({x.size}) is shorter than the template ({w})")
    t0 = t - t.mean()
    t_norm = np.sqrt(np.dot(t0, t0))
    if not t_norm > 0:
        raise ContractError("template is constant")
    if method == "auto":
        method = "fft" if x.size * w > FFT_CUTOFF else "direct"
    xc = x - x.mean()
    if method == "direct":
        num = _numerator_direct(xc, t0)
    elif method == "fft":
        num = _numerator_fft(xc, t0)
    else:
        raise ContractError(f"unknown correlation method {method!r}")
    c1 = np.concatenate([[0.0], np.cumsum(xc)])
    c2 = np.concatenate([[0.0], np.cumsum(xc * xc)])
    s1 = c1[w:] - c1[:-w]
    s2 = c2[w:] - c2[:-w]
    ss = np.maximum(s2 - s1 * s1 / w, 0.0)
    floor = 1e-12 * max(float(np.var(xc)), np.finfo(float).tiny) * w
    den = np.sqrt(ss) * t_norm
    scores = np.zeros_like(num)
    ok = ss > floor
    scores[ok] = num[ok] / den[ok]
    return np.clip(scores, -1.0, 1.0)


def _pick(scores, threshold, min_spacing):
    # pad so a peak on either end of the score array is still a local maximum
    padded = np.concatenate([[-np.inf], scores, [-np.inf]])
    idx, _ = find_peaks(padded, height=threshold, distance=min_spacing)
    return idx - 1


def find_occurrences(trace, template, threshold=DEFAULT_THRESHOLD, min_spacing=None, method="auto"):
    """Offsets where the template matches with score >= ``threshold``.

    Local maxima are kept greedily by descending score so that no two are
    closer than ``min_spacing`` (default ``0.8 * len(template)``); the result
    is sorted by offset.
    """
    if not 0 < threshold <= 1:
        raise ContractError("threshold must lie in (0, 1]")
    if min_spacing is None:
        min_spacing = max(1, int(0.8 * len(template)))
    if min_spacing < 1:
        raise ContractError("min_spacing must be >= 1")
    scores = correlation_scores(trace, template, method)
    # exact self-matches can land a hair under 1.0
    idx = _pick(np.minimum(scores + 1e-12, 1.0), threshold, min_spacing)
    return [Detection(int(i), float(scores[i])) for i in idx]


def pullout_segments(trace, template, threshold=DEFAULT_THRESHOLD, params=None, min_spacing=None):
    """Extract one template-length row per detected CP."""
    scores = correlation_scores(trace, template)
    if min_spacing is None:
        min_spacing = max(1, int(0.8 * len(template)))
    if not 0 < threshold <= 1:
        raise ContractError("threshold must lie in (0, 1]")
    idx = _pick(np.minimum(scores + 1e-12, 1.0), threshold, min_spacing)
    if idx.size == 0:
        best = float(scores.max())
        raise NoCPsFoundError(f"no CPs found: best score {best:.3f} is below {threshold}", max_score=best)
    return SegmentMatrix.from_trace(trace, idx, len(template))


def pullout_denoised(
    trace, template, threshold=DEFAULT_THRESHOLD, params=None, min_spacing=None, align=False, limit=None
):
    """Pull out every CP and average them into one denoised segment.

    The rows are aligned by construction; ``align=True`` adds a fine
    alignment pass with ``params`` before averaging. ``limit`` keeps only
    the first detections, to compare against a fixed segment count.
    """
    rows = pullout_segments(trace, template, threshold, params, min_spacing)
    if limit is not None and rows.n_rows > limit:
        rows = SegmentMatrix(rows.rows[:limit], rows.origin_offsets[:limit])
    if align:
        return rows, average_rows(rows, params or AlignmentParams())
    return rows, average_rows(rows)
