"""Sample-buffer types and raw trace file I/O.

Traces are stored on disk as headerless little-endian float32 (``.f32``) or
interleaved float32 I/Q pairs (``.iq32``), with acquisition metadata in a
``<tracefile>.meta.json`` sidecar. In memory every buffer is float64.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BoundsError, ContractError, DataError, FormatError

__all__ = [
    "Trace",
    "TraceMeta",
    "SegmentMatrix",
    "DenoisedSegment",
    "round_half_down",
    "vt_positions",
    "load_iq_trace",
    "load_real_trace",
    "save_real_trace",
    "load_trace",
    "read_meta",
    "write_meta",
    "meta_path",
]

_F32_LE = np.dtype("<f4")


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def round_half_down(x):
    """Round to nearest integer, exact halves going down.

    A 1e-9 guard absorbs float error in products like ``k * (L + delta)``,
    so a position that is mathematically a half is treated as one.
    """
    return np.ceil(np.asarray(x, dtype=np.float64) - 0.5 - 1e-9).astype(np.int64)


def vt_positions(l_cp, n, start_offset=0):
    """Virtual-trigger cut positions ``start_offset + round(k * l_cp)``, k < n."""
    return start_offset + round_half_down(np.arange(n, dtype=np.float64) * float(l_cp))


@dataclass(frozen=True)
class TraceMeta:
    sample_rate_hz: float
    center_freq_hz: float | None = None
    notes: str = ""

    def __post_init__(self):
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ContractError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    def to_dict(self):
        d = {"sample_rate_hz": self.sample_rate_hz}
        if self.center_freq_hz is not None:
            d["center_freq_hz"] = self.center_freq_hz
        if self.notes:
            d["notes"] = self.notes
        return d

    @classmethod
    def from_dict(cls, d):
        if "sample_rate_hz" not in d:
            raise FormatError("metadata is missing required key 'sample_rate_hz'")
        return cls(
            sample_rate_hz=float(d["sample_rate_hz"]),
            center_freq_hz=None if d.get("center_freq_hz") is None else float(d["center_freq_hz"]),
            notes=str(d.get("notes", "")),
        )


@dataclass(frozen=True)
class Trace:
    """One continuous real-valued capture."""

    samples: np.ndarray
    sample_rate_hz: float
    source_id: str = ""

    def __post_init__(self):
        s = _frozen(self.samples)
        if s.ndim != 1 or s.size < 1:
            raise ContractError("a trace needs a 1-D buffer of at least one sample")
        if not np.all(np.isfinite(s)):
            bad = int(np.flatnonzero(~np.isfinite(s))[0])
            raise DataError(f"non-finite sample at index {bad}")
        if not self.sample_rate_hz > 0:
            raise ContractError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def sample_period_s(self):
        return 1.0 / self.sample_rate_hz


@dataclass(frozen=True)
class SegmentMatrix:
    """N equal-length rows cut from one trace."""

    rows: np.ndarray
    origin_offsets: np.ndarray

    def __post_init__(self):
        rows = _frozen(self.rows)
        offs = _frozen(self.origin_offsets, np.int64)
        if rows.ndim != 2:
            raise ContractError("rows must form a 2-D array")
        if offs.shape != (rows.shape[0],):
            raise ContractError("need exactly one origin offset per row")
        if offs.size > 1 and np.any(np.diff(offs) <= 0):
            raise ContractError("origin offsets must be strictly increasing")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "origin_offsets", offs)

    @classmethod
    def from_trace(cls, trace, offsets, width):
        """Gather ``trace[o:o + width]`` for every offset, bounds-checked."""
        offsets = np.asarray(offsets, dtype=np.int64)
        if width < 1:
            raise ContractError("segment width must be at least 1")
        if offsets.size and (offsets[0] < 0 or offsets[-1] + width > len(trace)):
            raise BoundsError(
                f"segments [{offsets[0]}, {offsets[-1] + width}) exceed trace of {len(trace)} samples"
            )
        x = trace.samples
        rows = np.empty((offsets.size, width))
        for i, o in enumerate(offsets):
            rows[i] = x[o : o + width]
        return cls(rows, offsets)

    @property
    def n_rows(self):
        return self.rows.shape[0]

    @property
    def width(self):
        return self.rows.shape[1]


@dataclass(frozen=True)
class DenoisedSegment:
    """An averaged segment; ``shifts`` holds per-row alignment lags when known."""

    samples: np.ndarray
    n_averaged: int
    rotation_phase: int = 0
    shifts: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        s = _frozen(self.samples)
        if s.ndim != 1 or s.size < 1:
            raise ContractError("a denoised segment needs a non-empty 1-D buffer")
        if self.n_averaged < 1:
            raise ContractError("n_averaged must be >= 1")
        if not 0 <= self.rotation_phase < s.size:
            raise ContractError(f"rotation_phase {self.rotation_phase} outside [0, {s.size})")
        object.__setattr__(self, "samples", s)
        if self.shifts is not None:
            object.__setattr__(self, "shifts", _frozen(self.shifts, np.int64))

    def __len__(self):
        return self.samples.size


def meta_path(path):
    return Path(str(path) + ".meta.json")


def read_meta(path):
    """Read the sidecar of a trace file."""
    mp = meta_path(path)
    try:
        with open(mp) as fh:
            return TraceMeta.from_dict(json.load(fh))
    except FileNotFoundError:
        raise FormatError(f"missing metadata sidecar {mp}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mp}: {exc}") from None


def write_meta(path, meta):
    with open(meta_path(path), "w") as fh:
        json.dump(meta.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_f32(path, multiple):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read trace {path}: {exc.strerror or exc}") from exc
    if len(raw) == 0:
        raise FormatError(f"{path}: empty trace file")
    if len(raw) % multiple:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {multiple}")
    return np.frombuffer(raw, dtype=_F32_LE)


def _check_finite(values, path):
    bad = ~np.isfinite(values)
    if bad.any():
        raise DataError(f"{path}: non-finite value at sample index {int(np.flatnonzero(bad)[0])}")


def load_iq_trace(path, meta):
    """Load interleaved float32 I/Q pairs as a magnitude trace."""
    iq = _read_f32(path, 8).reshape(-1, 2).astype(np.float64)
    bad = ~np.isfinite(iq).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: non-finite value at pair index {int(np.flatnonzero(bad)[0])}")
    mag = np.hypot(iq[:, 0], iq[:, 1])
    return Trace(mag, meta.sample_rate_hz, source_id=os.fspath(path))


def load_real_trace(path, meta):
    x = _read_f32(path, 4).astype(np.float64)
    _check_finite(x, path)
    return Trace(x, meta.sample_rate_hz, source_id=os.fspath(path))


def save_real_trace(trace, path):
    """Write ``trace`` as raw little-endian float32.

    Values that are not exactly representable in float32 are rounded; a
    trace loaded from such a file round-trips bit-exactly.
    """
    x = np.asarray(trace.samples)
    if np.any(np.abs(x) > np.finfo(np.float32).max):
        raise DataError(f"trace {trace.source_id!r} has values beyond float32 range")
    data = x.astype(_F32_LE).tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def load_trace(path, meta=None):
    """Load a trace by extension (``.iq32`` or ``.f32``) using its sidecar."""
    if meta is None:
        meta = read_meta(path)
    if str(path).endswith(".iq32"):
        return load_iq_trace(path, meta)
    return load_real_trace(path, meta)
