"""Record preprocessing: normalization, anti-alias decimation, windowing,
majority relabeling, and mapping window predictions back to sample streams.

The pipeline runs per record and is deterministic:

1. min-max normalize each channel to [0, 1],
2. low-pass filter and decimate 200 Hz -> 100 Hz (labels keep every 2nd
   sample; annotations are piecewise constant over seconds, so nothing of
   consequence is lost),
3. cut 30 s windows (3000 samples) every 5 s (500 samples),
4. relabel each window with the most frequent annotation value and drop
   windows whose mode is the non-scored marker -1,
5. after inference, expand window probabilities back to a per-sample
   200 Hz stream by averaging all windows covering each sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TARGET_FS = 100
WINDOW_SAMPLES = 3000   # 30 s at 100 Hz
WINDOW_STEP = 500       # 25 s overlap
VALID_LABELS = (-1, 0, 1)


@dataclass
class Record:
    """Multichannel sampled signal with per-sample ternary annotations."""

    id: str
    channel_names: list[str]
    data: np.ndarray          # (channels, length)
    fs: int
    labels: np.ndarray        # (length,) int8 in {-1, 0, 1}
    source_length: int | None = None   # pre-decimation length, for upsampling

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.data.ndim != 2:
            raise ValueError(f"record {self.id}: data must be (channels, length), got {self.data.shape}")
        if len(self.channel_names) != self.data.shape[0]:
            raise ValueError(f"record {self.id}: {len(self.channel_names)} names for "
                             f"{self.data.shape[0]} channels")
        if self.labels.shape != (self.data.shape[1],):
            raise ValueError(f"record {self.id}: labels length {self.labels.shape[0]} != "
                             f"signal length {self.data.shape[1]}")
        if self.fs <= 0:
            raise ValueError(f"record {self.id}: fs must be > 0")
        bad = ~np.isin(self.labels, VALID_LABELS)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"record {self.id}: label {int(self.labels[i])} at sample {i} "
                             f"outside {{-1, 0, 1}}")

    @property
    def length(self) -> int:
        return self.data.shape[1]


@dataclass
class FirFilter:
    """Symmetric odd-length FIR with unit DC gain."""

    taps: np.ndarray

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.size % 2 == 0:
            raise ValueError("tap count must be odd")
        if not np.allclose(self.taps, self.taps[::-1]):
            raise ValueError("taps must be symmetric")
        if abs(self.taps.sum() - 1.0) > 1e-6:
            raise ValueError(f"DC gain {self.taps.sum()} != 1")

    @property
    def group_delay(self) -> int:
        return (self.taps.size - 1) // 2


@dataclass
class WindowSet:
    """Fixed-length windows with one binary label each and provenance
    (record id, start sample at 100 Hz) for reassembly."""

    data: np.ndarray                       # (n, channels, WINDOW_SAMPLES)
    labels: np.ndarray                     # (n,) int8 in {0, 1}
    provenance: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if len(self.provenance) != len(self.labels) or self.data.shape[0] != len(self.labels):
            raise ValueError("windows, labels and provenance lengths differ")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx: np.ndarray) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.data[idx], self.labels[idx],
                         [self.provenance[int(i)] for i in idx])

    @staticmethod
    def concatenate(parts: list["WindowSet"]) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return WindowSet(np.zeros((0, 0, WINDOW_SAMPLES), np.float32),
                             np.zeros(0, np.int8), [])
        return WindowSet(np.concatenate([p.data for p in parts]),
                         np.concatenate([p.labels for p in parts]),
                         [pv for p in parts for pv in p.provenance])


@dataclass
class ScoreStream:
    """Per-sample arousal probabilities aligned to a record's annotations."""

    record_id: str
    probs: np.ndarray         # (length,) in [0, 1], at the original rate
    labels: np.ndarray        # (length,) int8 in {-1, 0, 1}

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.probs.shape != self.labels.shape:
            raise ValueError(f"stream {self.record_id}: probs length {self.probs.shape} != "
                             f"labels length {self.labels.shape}")
        if self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0):
            raise ValueError(f"stream {self.record_id}: probabilities outside [0, 1]")


def normalize_minmax(signal: np.ndarray) -> np.ndarray:
    """Affinely map a sequence onto [0, 1]; a constant sequence maps to zeros."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty sequence")
    if not np.isfinite(x).all():
        raise ValueError("cannot normalize: input contains non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def design_antialias_fir(fs_in: float, fs_out: float, n_taps: int = 63) -> FirFilter:
    """Hamming-windowed sinc low-pass with cutoff at the new Nyquist fs_out/2,
    normalized to unit DC gain."""
    if fs_out >= fs_in:
        raise ValueError(f"fs_out {fs_out} must be below fs_in {fs_in}")
    if n_taps % 2 == 0:
        raise ValueError("tap count must be odd")
    m = (n_taps - 1) // 2
    fc = (fs_out / 2.0) / fs_in          # cycles/sample
    n = np.arange(n_taps) - m
    h = np.where(n == 0, 2.0 * fc, np.sin(2.0 * np.pi * fc * n) / (np.pi * np.where(n == 0, 1, n)))
    window = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n_taps) / (n_taps - 1))
    h = h * window
    return FirFilter(h / h.sum())


def fir_response(fir: FirFilter, freq_hz: float, fs: float) -> float:
    """Filter magnitude response at one frequency."""
    n = np.arange(fir.taps.size)
    return float(np.abs(np.sum(fir.taps * np.exp(-2j * np.pi * freq_hz / fs * n))))


def decimate(signal: np.ndarray, fir: FirFilter, factor: int) -> np.ndarray:
    """Low-pass then keep every factor-th sample.

    Edges are handled by edge-value replication and the filter's group delay
    is compensated, so output[k] is the filtered signal at sample k*factor
    and the output length is ceil(len/factor).
    """
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    x = np.asarray(signal, dtype=np.float64)
    gd = fir.group_delay
    padded = np.concatenate([np.full(gd, x[0]), x, np.full(gd, x[-1])])
    filtered = np.convolve(padded, fir.taps, mode="valid")
    return filtered[::factor]


def majority_label(window_labels: np.ndarray) -> int:
    """Most frequent annotation value of a window.

    Returns -1 when the mode is the non-scored marker (the window is then
    discarded).  Count ties are resolved in favor of the scored classes,
    arousal first: 1 beats 0 beats -1.
    """
    w = np.asarray(window_labels)
    bad = ~np.isin(w, VALID_LABELS)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"label {int(w[i])} at position {i} outside {{-1, 0, 1}}")
    counts = {v: int((w == v).sum()) for v in (1, 0, -1)}
    # dict order implements the tie preference 1 > 0 > -1
    return max(counts, key=counts.get)


def window_count(length: int) -> int:
    """Number of 30 s windows a record of `length` samples at 100 Hz yields."""
    if length < WINDOW_SAMPLES:
        return 0
    return (length - WINDOW_SAMPLES) // WINDOW_STEP + 1


def extract_windows(record: Record) -> WindowSet:
    """Cut a (preprocessed, 100 Hz) record into overlapping windows.

    Windows whose majority label is -1 are removed; provenance keeps the
    start offsets of the survivors.
    """
    if record.fs != TARGET_FS:
        raise ValueError(f"record {record.id}: expected {TARGET_FS} Hz input, got {record.fs}")
    n = window_count(record.length)
    data, labels, provenance = [], [], []
    for i in range(n):
        start = i * WINDOW_STEP
        label = majority_label(record.labels[start:start + WINDOW_SAMPLES])
        if label == -1:
            continue
        data.append(record.data[:, start:start + WINDOW_SAMPLES])
        labels.append(label)
        provenance.append((record.id, start))
    if not data:
        return WindowSet(np.zeros((0, record.data.shape[0], WINDOW_SAMPLES), np.float32),
                         np.zeros(0, np.int8), [])
    return WindowSet(np.stack(data).astype(np.float32), np.array(labels, np.int8), provenance)


def preprocess_record(record: Record, fir: FirFilter | None = None) -> Record:
    """Normalize each channel, decimate to 100 Hz, thin the labels.

    Remembers the original length so predictions can be upsampled back.
    """
    if record.fs % TARGET_FS != 0:
        raise ValueError(f"record {record.id}: fs {record.fs} is not an integer "
                         f"multiple of {TARGET_FS}")
    factor = record.fs // TARGET_FS
    if factor > 1 and fir is None:
        fir = design_antialias_fir(record.fs, TARGET_FS)
    channels = []
    for row in record.data:
        x = normalize_minmax(row)
        channels.append(decimate(x, fir, factor) if factor > 1 else x)
    return Record(record.id, list(record.channel_names),
                  np.stack(channels).astype(np.float32), TARGET_FS,
                  record.labels[::factor], source_length=record.length)


def upsample_predictions(window_probs: np.ndarray, provenance: list[tuple[str, int]],
                         original_length: int, labels: np.ndarray | None = None) -> ScoreStream:
    """Expand window probabilities to a per-sample stream of `original_length`.

    Each 100 Hz sample takes the mean probability of all windows covering it;
    uncovered samples copy the nearest covered sample (0.0 when there are no
    windows at all).  The stream is then repeated x2 up to the original rate
    and truncated or edge-padded to `original_length`.  `labels` are the
    record's original annotations (zeros when omitted).
    """
    probs = np.asarray(window_probs, dtype=np.float64)
    if probs.ndim != 1 or len(provenance) != probs.size:
        raise ValueError(f"{probs.size} window probabilities for {len(provenance)} "
                         f"provenance entries")
    ids = {rid for rid, _ in provenance}
    if len(ids) > 1:
        raise ValueError(f"provenance mixes records: {sorted(ids)}")
    record_id = provenance[0][0] if provenance else ""

    n100 = -(-original_length // 2)   # ceil
    sums = np.zeros(n100)
    counts = np.zeros(n100)
    for p, (_, start) in zip(probs, provenance):
        if start < 0 or start + WINDOW_SAMPLES > n100:
            raise ValueError(f"window at {start} outside record of {n100} samples")
        sums[start:start + WINDOW_SAMPLES] += p
        counts[start:start + WINDOW_SAMPLES] += 1.0

    covered = np.flatnonzero(counts > 0)
    if covered.size == 0:
        stream100 = np.zeros(n100)
    else:
        values = sums[covered] / counts[covered]
        if covered.size == n100:
            stream100 = values
        else:
            pos = np.arange(n100)
            right = np.clip(np.searchsorted(covered, pos), 0, covered.size - 1)
            left = np.clip(right - 1, 0, covered.size - 1)
            take_left = np.abs(pos - covered[left]) <= np.abs(covered[right] - pos)
            stream100 = values[np.where(take_left, left, right)]

    stream = np.repeat(stream100, 2)[:original_length]
    if stream.size < original_length:
        pad_value = stream[-1] if stream.size else 0.0
        stream = np.concatenate([stream, np.full(original_length - stream.size, pad_value)])
    if labels is None:
        labels = np.zeros(original_length, np.int8)
    return ScoreStream(record_id, stream, labels)
