"""Signal preprocessing and the TPPG binary dataset format.

Raw recordings are band-pass filtered, cut into non-overlapping 30 s
windows (1920 samples at 64 Hz) and min-max normalized per window. A
seeded synthetic generator provides desk-scale stand-in data with exact
artifact ground truth.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, InputError, ParseError

SAMPLE_RATE = 64
SEGMENT_LEN = 1920  # 30 s at 64 Hz

MAGIC = b"TPPG"
VERSION = 1


@dataclass
class RawRecording:
    subject_id: int
    sample_rate_hz: float
    samples: np.ndarray
    labels: np.ndarray
    activity: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.samples.shape != self.labels.shape:
            raise InputError(f"samples ({self.samples.shape[0]}) and labels "
                             f"({self.labels.shape[0]}) lengths differ")
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate_hz}")


@dataclass
class FilterSpec:
    low_hz: float = 0.9
    high_hz: float = 5.0
    order: int = 4
    zero_phase: bool = True

    def validate(self, sample_rate_hz):
        if not (0 < self.low_hz < self.high_hz < sample_rate_hz / 2):
            raise ConfigError(
                f"band ({self.low_hz}, {self.high_hz}) Hz violates 0 < low < high < "
                f"Nyquist ({sample_rate_hz / 2} Hz)")
        if self.order < 1:
            raise ConfigError(f"filter order must be >= 1, got {self.order}")


@dataclass
class SignalSegment:
    subject_id: int
    segment_index: int
    samples: np.ndarray  # (1920,) float32 in [0, 1]
    labels: np.ndarray   # (1920,) uint8 in {0, 1}


def bandpass_filter(rec: RawRecording, spec: FilterSpec = FilterSpec()) -> RawRecording:
    """Butterworth band-pass; zero-phase (forward-backward) by default.

    Labels pass through untouched.
    """
    spec.validate(rec.sample_rate_hz)
    nyq = rec.sample_rate_hz / 2
    b, a = sps.butter(spec.order, [spec.low_hz / nyq, spec.high_hz / nyq], btype="band")
    padlen = 3 * (max(len(a), len(b)) - 1)
    if rec.samples.shape[0] <= max(padlen, 3 * spec.order):
        raise InputError(f"recording too short to filter: {rec.samples.shape[0]} samples, "
                         f"need more than {padlen}")
    if spec.zero_phase:
        filtered = sps.filtfilt(b, a, rec.samples)
    else:
        filtered = sps.lfilter(b, a, rec.samples)
    return RawRecording(rec.subject_id, rec.sample_rate_hz, filtered, rec.labels, rec.activity)


def minmax_normalize(samples: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a constant input maps to all zeros."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise InputError("cannot normalize an empty sequence")
    lo = samples.min()
    hi = samples.max()
    if hi == lo:
        return np.zeros_like(samples)
    return (samples - lo) / (hi - lo)


def segment_and_normalize(rec: RawRecording) -> list[SignalSegment]:
    """Cut into consecutive 1920-sample windows, each normalized to [0, 1].

    A trailing remainder shorter than one window is dropped; a recording
    shorter than one window yields an empty list.
    """
    if rec.sample_rate_hz != SAMPLE_RATE:
        raise ConfigError(f"expected {SAMPLE_RATE} Hz input, got {rec.sample_rate_hz} "
                          "(resampling is out of scope)")
    n = rec.samples.shape[0] // SEGMENT_LEN
    segments = []
    for i in range(n):
        sl = slice(i * SEGMENT_LEN, (i + 1) * SEGMENT_LEN)
        segments.append(SignalSegment(
            subject_id=int(rec.subject_id),
            segment_index=i,
            samples=minmax_normalize(rec.samples[sl]).astype(np.float32),
            labels=rec.labels[sl].astype(np.uint8).copy(),
        ))
    return segments


@dataclass
class SyntheticConfig:
    n_segments: int = 100
    seed: int = 0
    pulse_freq_range_hz: tuple = (1.0, 2.5)
    artifact_rate: float = 0.3
    artifact_len_range_samples: tuple = (64, 512)
    n_subjects: int = 10

    def validate(self):
        if self.n_segments < 0:
            raise ConfigError("n_segments must be >= 0")
        lo, hi = self.pulse_freq_range_hz
        if not (0 < lo < hi):
            raise ConfigError(f"degenerate pulse frequency range ({lo}, {hi})")
        if not (0.0 <= self.artifact_rate <= 1.0):
            raise ConfigError(f"artifact rate must be in [0, 1], got {self.artifact_rate}")
        a, b = self.artifact_len_range_samples
        if not (0 < a < b <= SEGMENT_LEN):
            raise ConfigError(f"degenerate artifact length range ({a}, {b})")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")


def generate_synthetic(cfg: SyntheticConfig) -> list[SignalSegment]:
    """Seeded quasi-periodic pulse segments with injected artifact bursts.

    Bursts combine an amplitude offset with random-walk noise and are
    recorded exactly in the label mask; the pooled label mean tracks
    cfg.artifact_rate. Subject ids cycle 0..n_subjects-1 so the output
    supports subject-disjoint splits.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(SEGMENT_LEN) / SAMPLE_RATE
    segments = []
    for i in range(cfg.n_segments):
        f0 = rng.uniform(*cfg.pulse_freq_range_hz)
        phase = rng.uniform(0, 2 * np.pi)
        clean = (np.sin(2 * np.pi * f0 * t + phase)
                 + 0.4 * np.sin(4 * np.pi * f0 * t + 2 * phase + rng.uniform(0, 1))
                 + 0.15 * np.sin(6 * np.pi * f0 * t + 3 * phase))
        clean += 0.02 * rng.standard_normal(SEGMENT_LEN)
        labels = np.zeros(SEGMENT_LEN, dtype=np.uint8)
        samples = clean.copy()
        if cfg.artifact_rate > 0:
            target = cfg.artifact_rate * SEGMENT_LEN
            budget = target * rng.uniform(0.85, 1.15)
            guard = 0
            while labels.sum() < budget and guard < 100:
                guard += 1
                length = int(rng.integers(cfg.artifact_len_range_samples[0],
                                          cfg.artifact_len_range_samples[1] + 1))
                length = min(length, SEGMENT_LEN)
                start = int(rng.integers(0, SEGMENT_LEN - length + 1))
                stop = start + length
                if labels[start:stop].any():
                    continue
                jump = rng.choice([-1.0, 1.0]) * rng.uniform(2.0, 4.0)
                walk = np.cumsum(rng.standard_normal(length)) * rng.uniform(0.2, 0.6)
                jitter = rng.standard_normal(length) * rng.uniform(0.3, 0.8)
                samples[start:stop] += jump + walk + jitter
                labels[start:stop] = 1
        segments.append(SignalSegment(
            subject_id=i % cfg.n_subjects,
            segment_index=i,
            samples=minmax_normalize(samples).astype(np.float32),
            labels=labels,
        ))
    return segments


# -- TPPG v1 dataset files ---------------------------------------------------

_HEADER = struct.Struct("<HIHH")       # version, count, segment_len, sample_rate
_SEG_HEADER = struct.Struct("<HI")     # subject_id, segment_index


def save_dataset(segments, path):
    """Write segments to a TPPG v1 file (float32 samples, uint8 labels)."""
    parts = [MAGIC, _HEADER.pack(VERSION, len(segments), SEGMENT_LEN, SAMPLE_RATE)]
    for seg in segments:
        if seg.samples.shape[0] != SEGMENT_LEN or seg.labels.shape[0] != SEGMENT_LEN:
            raise InputError(f"segment {seg.segment_index} has wrong length "
                             f"{seg.samples.shape[0]}")
        parts.append(_SEG_HEADER.pack(int(seg.subject_id), int(seg.segment_index)))
        parts.append(np.ascontiguousarray(seg.samples, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(seg.labels, dtype=np.uint8).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_dataset(path) -> list[SignalSegment]:
    """Read a TPPG v1 file; strict about magic, version and truncation."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0
    if data[:4] != MAGIC:
        raise ParseError("bad magic, not a TPPG dataset", offset=0)
    off = 4
    if len(data) < off + _HEADER.size:
        raise ParseError("truncated header", offset=off)
    version, count, seg_len, rate = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    if version != VERSION:
        raise ParseError(f"unsupported TPPG version {version}", offset=4)
    if seg_len != SEGMENT_LEN:
        raise ParseError(f"unsupported segment length {seg_len}", offset=10)
    if rate != SAMPLE_RATE:
        raise ParseError(f"unsupported sample rate {rate}", offset=12)
    segments = []
    rec_size = _SEG_HEADER.size + 4 * SEGMENT_LEN + SEGMENT_LEN
    for i in range(count):
        if len(data) < off + rec_size:
            raise ParseError(f"truncated in segment {i} of {count}", offset=off)
        subject, index = _SEG_HEADER.unpack_from(data, off)
        off += _SEG_HEADER.size
        samples = np.frombuffer(data, dtype="<f4", count=SEGMENT_LEN, offset=off).copy()
        off += 4 * SEGMENT_LEN
        labels = np.frombuffer(data, dtype=np.uint8, count=SEGMENT_LEN, offset=off).copy()
        off += SEGMENT_LEN
        bad = (labels > 1).nonzero()[0]
        if bad.size:
            raise ParseError(f"segment {i} has non-binary label {labels[bad[0]]}",
                             offset=off - SEGMENT_LEN + int(bad[0]))
        segments.append(SignalSegment(subject_id=int(subject), segment_index=int(index),
                                      samples=samples, labels=labels))
    if off != len(data):
        raise ParseError("trailing data after last segment", offset=off)
    return segments
