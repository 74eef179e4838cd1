"""Synthetic CP-series traces with a known AES first-round leakage.

Every cryptographic process (CP) occupies one period of the trace:

    [ idle run | round 1 | round 2 | ... | round 10 | filler idle ]

The idle run is ``idle_len`` samples at ``idle_level``. Each round is one copy
of ``round_profile``. Inside round 1, byte ``b`` leaks on a plateau of
``poi_width`` samples starting at ``poi_offsets[b]`` whose value is
``leak_gain * HW(SBox(plaintext[b] ^ key[b]))``. CP ``k`` starts at
``lead_in + round(k * period_samples) + sum(jitter[:k])``; the filler between
the end of round 10 and the next start is idle. Gaussian noise of standard
deviation ``noise_sigma`` is added to every sample.

Randomness comes from ``numpy.random.default_rng(seed)`` (PCG64). Draw order
is fixed: ``n_cps`` jitter integers via ``Generator.integers(0, jitter_max + 1)``
(skipped when ``jitter_max == 0``), then one ``Generator.normal`` call for the
whole trace (skipped when ``noise_sigma == 0``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .trace_model import Trace, round_half_down

__all__ = [
    "SBOX",
    "HW",
    "HW_SBOX",
    "sbox_hw_oracle",
    "default_round_profile",
    "default_poi_offsets",
    "SynthConfig",
    "GroundTruth",
    "generate",
    "cp_template",
]

# fmt: off
SBOX = np.array([
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
], dtype=np.uint8)
# fmt: on

HW = np.array([bin(v).count("1") for v in range(256)], dtype=np.int64)
HW_SBOX = HW[SBOX]

N_ROUNDS = 10
DEFAULT_ROUND_LEN = 412
DEFAULT_POI_START = 40
DEFAULT_POI_SPACING = 20


def sbox_hw_oracle(plaintext_byte, key_byte):
    """Hamming weight of ``SBox(plaintext_byte ^ key_byte)``."""
    return int(HW_SBOX[(int(plaintext_byte) ^ int(key_byte)) & 0xFF])


def default_round_profile(length=DEFAULT_ROUND_LEN, texture=0.5):
    """One AES round as a deterministic waveform.

    A half-sine envelope carries a fixed broadband texture (unit-variance
    PCG64 normals, seed 0x5CA, scaled by ``texture``), standing in for
    cycle-level switching activity. Strobes of height 1.5 mark both ends of
    the round so the transitions into and out of the idle run are sharp.
    """
    u = np.arange(length, dtype=np.float64)
    tex = np.random.default_rng(0x5CA).normal(size=length)
    prof = 1.0 + 0.6 * np.sin(np.pi * u / length) + texture * tex
    edge = max(1, length // 50)
    prof[:edge] = 1.5
    prof[-edge:] = 1.5
    return prof


def default_poi_offsets(start=DEFAULT_POI_START, spacing=DEFAULT_POI_SPACING):
    return tuple(start + spacing * b for b in range(16))


def _as_block(b, what):
    if isinstance(b, str):
        b = bytes.fromhex(b)
    b = bytes(b)
    if len(b) != 16:
        raise ConfigError(f"{what} must be 16 bytes, got {len(b)}")
    return b


@dataclass
class SynthConfig:
    period_samples: float = 4350.09
    idle_len: int = 230
    n_cps: int = 500
    noise_sigma: float = 0.5
    jitter_max: int = 0
    key: bytes = bytes(range(16))
    plaintexts: list = field(default_factory=lambda: [bytes(16)])
    repeats_per_plaintext: int = 500
    leak_gain: float = 0.05
    round_profile: np.ndarray = field(default_factory=default_round_profile)
    seed: int = 0
    sample_rate_hz: float = 5e6
    lead_in: int = 0
    idle_level: float = 0.0
    poi_width: int = 3
    poi_offsets: tuple = field(default_factory=default_poi_offsets)

    def __post_init__(self):
        self.key = _as_block(self.key, "key")
        self.plaintexts = [_as_block(p, "plaintext") for p in self.plaintexts]
        self.round_profile = np.asarray(self.round_profile, dtype=np.float64)
        self.poi_offsets = tuple(int(o) for o in self.poi_offsets)
        self.validate()

    @property
    def cp_active_len(self):
        return N_ROUNDS * self.round_profile.size

    def validate(self):
        if not self.period_samples > 0:
            raise ConfigError("period_samples must be positive")
        if self.idle_len < 1:
            raise ConfigError("idle_len must be positive")
        if self.period_samples < self.idle_len + self.cp_active_len:
            raise ConfigError(
                f"period_samples={self.period_samples} cannot hold idle_len={self.idle_len} "
                f"plus {self.cp_active_len} active samples"
            )
        if self.n_cps < 1 or self.repeats_per_plaintext < 1:
            raise ConfigError("n_cps and repeats_per_plaintext must be positive")
        if self.noise_sigma < 0 or self.jitter_max < 0:
            raise ConfigError("noise_sigma and jitter_max must be non-negative")
        if not self.leak_gain > 0:
            raise ConfigError("leak_gain must be positive")
        if not self.plaintexts:
            raise ConfigError("at least one plaintext is required")
        if self.round_profile.ndim != 1 or self.round_profile.size < 1:
            raise ConfigError("round_profile must be a non-empty 1-D sequence")
        if len(self.poi_offsets) != 16 or self.poi_width < 1:
            raise ConfigError("need 16 POI offsets and poi_width >= 1")
        if min(self.poi_offsets) < 0 or max(self.poi_offsets) + self.poi_width > self.round_profile.size:
            raise ConfigError("POI plateaus must lie inside round 1")
        if not 0 <= self.lead_in < int(self.period_samples):
            raise ConfigError("lead_in must lie in [0, period_samples)")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz must be positive")

    def plaintext_for(self, k):
        return self.plaintexts[(k // self.repeats_per_plaintext) % len(self.plaintexts)]

    def to_dict(self):
        d = asdict(self)
        d["key"] = self.key.hex()
        d["plaintexts"] = [p.hex() for p in self.plaintexts]
        d["round_profile"] = self.round_profile.tolist()
        d["poi_offsets"] = list(self.poi_offsets)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synth keys: {sorted(extra)}")
        d = dict(d)
        if "round_profile" in d and isinstance(d["round_profile"], (int, float)):
            d["round_profile"] = default_round_profile(int(d["round_profile"]))
        return cls(**d)


@dataclass
class GroundTruth:
    cp_start_indices: list
    true_period_samples: float
    key: bytes
    plaintexts: list
    poi_offsets: list
    idle_len: int

    def poi_indices(self, byte):
        """Sample indices of byte ``byte``'s leakage relative to a CP start."""
        return self.poi_offsets[byte]

    def to_dict(self):
        return {
            "cp_start_indices": [int(s) for s in self.cp_start_indices],
            "true_period_samples": self.true_period_samples,
            "key": self.key.hex(),
            "plaintexts": [p.hex() for p in self.plaintexts],
            "poi_offsets": [list(map(int, p)) for p in self.poi_offsets],
            "idle_len": self.idle_len,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            cp_start_indices=list(d["cp_start_indices"]),
            true_period_samples=float(d["true_period_samples"]),
            key=bytes.fromhex(d["key"]),
            plaintexts=[bytes.fromhex(p) for p in d["plaintexts"]],
            poi_offsets=[list(p) for p in d["poi_offsets"]],
            idle_len=int(d["idle_len"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def cp_template(config, plaintext):
    """Noiseless waveform of one CP (idle run followed by the ten rounds)."""
    prof = config.round_profile
    r = prof.size
    wave = np.full(config.idle_len + N_ROUNDS * r, config.idle_level)
    active = wave[config.idle_len :]
    active[:] = np.tile(prof, N_ROUNDS)
    for b, off in enumerate(config.poi_offsets):
        hw = sbox_hw_oracle(plaintext[b], config.key[b])
        active[off : off + config.poi_width] = config.leak_gain * hw
    return wave


def _poi_indices(config):
    return [
        [config.idle_len + off + j for j in range(config.poi_width)] for off in config.poi_offsets
    ]


def generate(config):
    """Render a trace and its ground-truth manifest from ``config``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_cps
    base = round_half_down(np.arange(n + 1) * config.period_samples)
    if config.jitter_max > 0:
        jitter = rng.integers(0, config.jitter_max + 1, size=n)
    else:
        jitter = np.zeros(n, dtype=np.int64)
    extra = np.concatenate([[0], np.cumsum(jitter)])
    starts = config.lead_in + base + extra
    total = int(starts[-1])

    x = np.full(total, config.idle_level, dtype=np.float64)
    cache = {}
    for k in range(n):
        pt = config.plaintext_for(k)
        if pt not in cache:
            cache[pt] = cp_template(config, pt)
        wave = cache[pt]
        s = int(starts[k])
        x[s : s + wave.size] = wave
    if config.lead_in:
        # tail of a preceding CP that processed the same block as CP 0
        prev = cache[config.plaintext_for(0)]
        period0 = int(base[1])
        tail = np.full(period0, config.idle_level)
        tail[: prev.size] = prev
        x[: config.lead_in] = tail[period0 - config.lead_in :]
    if config.noise_sigma > 0:
        x += rng.normal(0.0, config.noise_sigma, size=total)

    truth = GroundTruth(
        cp_start_indices=[int(s) for s in starts[:n]],
        true_period_samples=float(config.period_samples),
        key=config.key,
        plaintexts=[config.plaintext_for(k) for k in range(n)],
        poi_offsets=_poi_indices(config),
        idle_len=config.idle_len,
    )
    return Trace(x, config.sample_rate_hz, source_id=f"synth:seed={config.seed}"), truth
