"""Profiled Hamming-weight template attack and partial guessing entropy.

The profile is a naive-Bayes Gaussian template: for every key byte and every
Hamming-weight class of ``SBox(p ^ k)`` it stores the mean and variance of a
handful of points of interest. An attack scores each of the 256 key-byte
hypotheses by the summed log-likelihood of the observed segments; the
partial guessing entropy (PGE) is the number of hypotheses scoring strictly
better than the true byte.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateProfileError
from .synthgen import HW_SBOX
from .trace_model import DenoisedSegment

log = logging.getLogger(__name__)

__all__ = [
    "Profile",
    "AttackReport",
    "build_profile",
    "hypothesis_scores",
    "pge_from_scores",
    "attack",
    "pge_curve",
    "success_step",
    "meets_success",
    "PGE_FAIL_LEVEL",
    "fit_length",
    "register",
    "precision_sweep",
]

N_BYTES = 16
N_CLASSES = 9
# a key byte at or above this rank counts as unrecovered
PGE_FAIL_LEVEL = 4
VARIANCE_FLOOR = 1e-12
_LOG_2PI = np.log(2 * np.pi)


def _segment_array(segments):
    if isinstance(segments, np.ndarray):
        arr = np.asarray(segments, dtype=np.float64)
    else:
        arr = np.array([s.samples if isinstance(s, DenoisedSegment) else s for s in segments], dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("segments must all have the same length")
    return arr


def _block_array(blocks, n=None):
    arr = np.array([list(b) for b in blocks], dtype=np.uint8) if not isinstance(blocks, np.ndarray) else blocks
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2 or arr.shape[1] != N_BYTES:
        raise ContractError("plaintexts must be 16-byte blocks")
    if n is not None and arr.shape[0] != n:
        raise ContractError(f"{arr.shape[0]} plaintexts for {n} segments")
    return arr


def _key_array(key):
    k = np.frombuffer(bytes(key), dtype=np.uint8) if not isinstance(key, np.ndarray) else key.astype(np.uint8)
    if k.shape != (N_BYTES,):
        raise ContractError("key must be 16 bytes")
    return k


@dataclass
class Profile:
    """Per-byte POIs and Hamming-weight class statistics.

    ``means[b]`` and ``variances[b]`` have shape ``(9, n_poi)``.
    ``empty_classes[b]`` lists classes with no profiling observation, whose
    means were interpolated from the neighbouring classes.
    """

    poi_indices: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    class_counts: np.ndarray
    n_profiling: int
    segment_length: int
    pooled_variance: bool = True
    empty_classes: list = field(default_factory=list)
    reference: np.ndarray | None = None  # mean profiling segment

    @property
    def n_poi(self):
        return self.poi_indices.shape[1]

    def poi_window(self, margin=64):
        """Slice bounds covering every POI plus ``margin`` samples either side."""
        lo = max(int(self.poi_indices.min()) - margin, 0)
        hi = min(int(self.poi_indices.max()) + margin + 1, self.segment_length)
        return lo, hi

    def to_dict(self):
        return {
            "poi_indices": self.poi_indices.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "class_counts": self.class_counts.tolist(),
            "n_profiling": self.n_profiling,
            "segment_length": self.segment_length,
            "pooled_variance": self.pooled_variance,
            "empty_classes": [list(map(int, e)) for e in self.empty_classes],
            "reference": None if self.reference is None else self.reference.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            poi_indices=np.asarray(d["poi_indices"], dtype=np.int64),
            means=np.asarray(d["means"], dtype=np.float64),
            variances=np.asarray(d["variances"], dtype=np.float64),
            class_counts=np.asarray(d["class_counts"], dtype=np.int64),
            n_profiling=int(d["n_profiling"]),
            segment_length=int(d["segment_length"]),
            pooled_variance=bool(d.get("pooled_variance", True)),
            empty_classes=[list(e) for e in d.get("empty_classes", [])],
            reference=None if d.get("reference") is None else np.asarray(d["reference"], dtype=np.float64),
        )


@dataclass
class AttackReport:
    """Mean PGE per step and key byte, plus the per-repetition ranks."""

    pge: np.ndarray  # (n_steps, 16) mean over repetitions
    traces_used: list
    n_repetitions: int
    pge_runs: np.ndarray | None = None  # (n_repetitions, n_steps, 16) integer ranks

    def final(self):
        return self.pge[-1]

    def mean_final(self):
        return float(self.pge[-1].mean())


def fit_length(samples, width):
    """Crop, or extend circularly, an idle-rotated segment to ``width`` samples.

    Segments cut with a slightly different CP length differ only in how much
    trailing idle they carry, so the head is what must line up.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size >= width:
        return x[:width]
    return np.resize(x, width)


def register(samples, reference, max_lag=16, window=None):
    """Roll a segment by at most ``max_lag`` samples to best match ``reference``.

    The idle instant is only located to within the slack of a flat idle run,
    and a segment cut with a length a few samples off the true one carries a
    seam where the content jumps by that difference. Registration picks the
    circular shift whose length-fitted result correlates best with the
    reference over ``window`` (a ``(start, stop)`` slice, default the whole
    segment; smallest absolute shift on ties) and returns the fitted segment.
    """
    x = np.asarray(samples, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    sl = slice(None) if window is None else slice(*window)
    r0 = ref[sl] - ref[sl].mean()
    best, best_score = None, -np.inf
    for lag in sorted(range(-max_lag, max_lag + 1), key=abs):
        cand = fit_length(np.roll(x, -lag), ref.size)
        c = cand[sl] - cand[sl].mean()
        den = np.sqrt((c @ c) * (r0 @ r0))
        score = (c @ r0) / den if den > 0 else 0.0
        if score > best_score:
            best, best_score = cand, score
    return best


def _correlation_columns(x, y):
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    num = yc @ xc
    den = np.sqrt((xc * xc).sum(axis=0) * (yc @ yc))
    out = np.zeros(x.shape[1])
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def build_profile(segments, plaintexts, key, n_poi, pooled_variance=True):
    """Select POIs and fit the Hamming-weight class templates.

    POIs for byte ``b`` are the ``n_poi`` samples with the largest absolute
    correlation between sample value and ``HW(SBox(p_b ^ k_b))``.
    """
    x = _segment_array(segments)
    n, width = x.shape
    pts = _block_array(plaintexts, n)
    k = _key_array(key)
    if n_poi < 1 or n_poi > width:
        raise ContractError(f"n_poi must lie in [1, {width}]")
    global_var = float(x.var()) if x.var() > 0 else 1.0
    floor = VARIANCE_FLOOR * global_var

    pois = np.empty((N_BYTES, n_poi), dtype=np.int64)
    means = np.empty((N_BYTES, N_CLASSES, n_poi))
    variances = np.empty((N_BYTES, N_CLASSES, n_poi))
    counts = np.zeros((N_BYTES, N_CLASSES), dtype=np.int64)
    empty = []
    for b in range(N_BYTES):
        labels = HW_SBOX[pts[:, b] ^ k[b]]
        if np.unique(labels).size < 2:
            raise DegenerateProfileError(f"degenerate profiling set: byte {b} has a single leakage class")
        rho = np.abs(_correlation_columns(x, labels.astype(np.float64)))
        order = np.argsort(-rho, kind="stable")[:n_poi]
        pois[b] = np.sort(order)
        obs = x[:, pois[b]]
        counts[b] = np.bincount(labels, minlength=N_CLASSES)
        present = np.flatnonzero(counts[b])
        for h in present:
            sel = obs[labels == h]
            means[b, h] = sel.mean(axis=0)
            variances[b, h] = sel.var(axis=0) if sel.shape[0] > 1 else np.nan
        missing = np.flatnonzero(counts[b] == 0)
        if missing.size:
            for p in range(n_poi):
                means[b, missing, p] = np.interp(missing, present, means[b, present, p])
            log.warning("byte %d: empty Hamming-weight classes %s interpolated", b, missing.tolist())
        empty.append(missing.tolist())
        resid = obs - means[b, labels]
        pooled = (resid * resid).sum(axis=0) / max(n - present.size, 1)
        if pooled_variance:
            variances[b] = pooled
        else:
            thin = counts[b] < 2
            variances[b, thin] = pooled
        variances[b] = np.maximum(variances[b], floor)
    return Profile(pois, means, variances, counts, n, width, pooled_variance, empty, x.mean(axis=0))


def _class_loglik(profile, x, b):
    """Log-likelihood of every segment under every HW class, shape (n, 9)."""
    obs = x[:, profile.poi_indices[b]]  # (n, p)
    mu = profile.means[b]  # (9, p)
    var = profile.variances[b]
    d = obs[:, None, :] - mu[None, :, :]
    return -0.5 * (d * d / var[None] + np.log(var)[None] + _LOG_2PI).sum(axis=2)


def hypothesis_scores(profile, segments, plaintexts):
    """Per-segment log-likelihood of every key hypothesis, shape (16, n, 256)."""
    x = _segment_array(segments)
    if x.shape[1] != profile.segment_length:
        raise ContractError(
            f"segment length {x.shape[1]} does not match the profile ({profile.segment_length})"
        )
    pts = _block_array(plaintexts, x.shape[0])
    hyp = np.arange(256, dtype=np.uint8)
    out = np.empty((N_BYTES, x.shape[0], 256))
    for b in range(N_BYTES):
        ll = _class_loglik(profile, x, b)
        cls = HW_SBOX[pts[:, b, None] ^ hyp[None, :]]  # (n, 256)
        out[b] = np.take_along_axis(ll, cls, axis=1)
    return out


def pge_from_scores(scores, true_value):
    """Number of hypotheses scoring strictly higher than the true one."""
    scores = np.asarray(scores)
    return int(np.count_nonzero(scores > scores[..., int(true_value)]))


def attack(profile, segments, plaintexts, true_key):
    """Single attack on all given segments; returns a one-step report."""
    x = _segment_array(segments) if len(segments) else None
    if x is None or x.shape[0] == 0:
        raise ContractError("attack needs at least one segment")
    k = _key_array(true_key)
    total = hypothesis_scores(profile, x, plaintexts).sum(axis=1)  # (16, 256)
    pge = np.array([[pge_from_scores(total[b], k[b]) for b in range(N_BYTES)]])
    return AttackReport(pge.astype(np.float64), [x.shape[0]], 1, pge_runs=pge[None])


def _ranks(cum, true_scores):
    # cum: (16, n_steps, 256); count hypotheses strictly above the true one
    return (cum > true_scores[..., None]).sum(axis=2)


def pge_curve(profile, segments, plaintexts, true_key, steps, n_repetitions=30, seed=0):
    """Mean PGE versus the number of attack segments.

    Every repetition draws a seeded permutation of the segments and attacks
    with its first ``s`` entries for each ``s`` in ``steps``.
    """
    x = _segment_array(segments)
    n = x.shape[0]
    steps = sorted({int(s) for s in steps})
    if not steps or steps[0] < 1:
        raise ContractError("steps must be positive")
    if steps[-1] > n:
        raise ContractError(f"largest step {steps[-1]} exceeds the {n} available segments")
    if n_repetitions < 1:
        raise ContractError("n_repetitions must be >= 1")
    k = _key_array(true_key)
    per_seg = hypothesis_scores(profile, x, plaintexts)  # (16, n, 256)
    rng = np.random.default_rng(seed)
    idx = np.asarray(steps) - 1
    runs = np.empty((n_repetitions, len(steps), N_BYTES), dtype=np.int64)
    for r in range(n_repetitions):
        perm = rng.permutation(n) if n_repetitions > 1 else np.arange(n)
        cum = np.cumsum(per_seg[:, perm, :], axis=1)[:, idx, :]  # (16, steps, 256)
        true_scores = cum[np.arange(N_BYTES), :, k]  # (16, steps)
        runs[r] = _ranks(cum, true_scores).T
    return AttackReport(runs.mean(axis=0), steps, n_repetitions, pge_runs=runs)


def meets_success(pge_row, level=PGE_FAIL_LEVEL, max_failed=1):
    """At most ``max_failed`` key bytes with (mean) PGE at or above ``level``."""
    return int(np.count_nonzero(np.asarray(pge_row) >= level)) <= max_failed


def success_step(report, level=PGE_FAIL_LEVEL, max_failed=1):
    """First number of attack segments meeting the success criterion, or None."""
    for s, row in zip(report.traces_used, report.pge):
        if meets_success(row, level, max_failed):
            return s
    return None


def precision_sweep(
    profile,
    traces,
    plaintexts,
    true_key,
    base_lcp,
    offsets,
    n_segments,
    params=None,
    steps=None,
    n_repetitions=30,
    seed=0,
    anchored=True,
):
    """Attack efficiency when the virtual trigger uses ``base_lcp + offset``.

    ``traces`` is an iterable of same-plaintext traces (consumed once, so a
    generator keeps memory flat); each is denoised once per offset and
    registered to the profile. Returns ``{offset: AttackReport}`` in
    ascending offset order.
    """
    from .segment_aligner import AlignmentParams, denoise_pipeline

    params = params or AlignmentParams()
    uniq = sorted({float(o) for o in offsets})
    if len(uniq) != len(list(offsets)):
        log.warning("duplicate offsets removed: %s", list(offsets))
    if 0.0 not in uniq:
        raise ContractError("offsets must include 0")
    segs = {o: [] for o in uniq}
    for trace in traces:
        for o in uniq:
            seg = denoise_pipeline(trace, base_lcp + o, n_segments, params, anchored=anchored)
            if profile.reference is None:
                segs[o].append(fit_length(seg.samples, profile.segment_length))
            else:
                segs[o].append(register(seg.samples, profile.reference, window=profile.poi_window()))
    n = len(segs[uniq[0]])
    steps = steps or [n]
    return {
        o: pge_curve(profile, np.array(segs[o]), plaintexts, true_key, steps, n_repetitions, seed)
        for o in uniq
    }
