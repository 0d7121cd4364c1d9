"""Packet traces, seamless windows, channel masks, normalization and the WFDS file format.

A window packs ``window`` consecutive packets into ``2 * window`` values laid
out as interleaved ``(jitter_us, size_bytes)`` pairs.  Jitter is always
computed over the whole trace, so a window cut from the middle of a session
keeps the true inter-arrival time of its first packet.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    EmptyInputError,
    FormatError,
    OrderingError,
    ParseError,
    TruncatedError,
    VersionMismatchError,
)
from .seeding import rng

WINDOW = 500
WFDS_MAGIC = b"WFDS"
WFDS_VERSION = 1
_WFDS_HEADER = struct.Struct("<4sHIH")


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float  # microseconds since trace start
    size: int  # bytes on wire

    def __post_init__(self):
        if self.size < 0 or self.timestamp < 0:
            raise DataError(f"invalid packet {self}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trace:
    """An ordered packet sequence labelled with its site and collection environment.

    Packets are held column-wise (``timestamps`` in float64 microseconds,
    ``sizes`` in int64 bytes); ``packets`` gives the record view.
    """

    timestamps: np.ndarray
    sizes: np.ndarray
    site_label: int = 0
    env_id: int = 0
    epoch_tag: str = ""

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).ravel()
        sz = np.asarray(self.sizes)
        if sz.size and not np.all(np.equal(np.mod(sz, 1), 0)):
            raise DataError("packet sizes must be whole bytes")
        sz = sz.astype(np.int64).ravel()
        if ts.shape != sz.shape:
            raise DataError(f"{ts.size} timestamps vs {sz.size} sizes")
        if ts.size:
            if not np.all(np.isfinite(ts)) or ts.min() < 0:
                raise DataError("timestamps must be finite and non-negative")
            if np.any(np.diff(ts) < 0):
                raise OrderingError("timestamps must be non-decreasing")
            if sz.min() < 0:
                raise DataError("packet sizes must be non-negative")
        if self.site_label < 0 or self.env_id < 0:
            raise DataError("site_label and env_id must be non-negative")
        object.__setattr__(self, "timestamps", _readonly(ts))
        object.__setattr__(self, "sizes", _readonly(sz))
        object.__setattr__(self, "site_label", int(self.site_label))
        object.__setattr__(self, "env_id", int(self.env_id))

    @classmethod
    def from_packets(cls, packets: Iterable[PacketRecord], site_label=0, env_id=0, epoch_tag=""):
        packets = list(packets)
        return cls(
            np.array([p.timestamp for p in packets], dtype=np.float64),
            np.array([p.size for p in packets], dtype=np.int64),
            site_label,
            env_id,
            epoch_tag,
        )

    @property
    def packets(self) -> list[PacketRecord]:
        return [PacketRecord(float(t), int(s)) for t, s in zip(self.timestamps, self.sizes)]

    def __len__(self) -> int:
        return int(self.sizes.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            (self.site_label, self.env_id, self.epoch_tag)
            == (other.site_label, other.env_id, other.epoch_tag)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.sizes, other.sizes)
        )

    __hash__ = None

    def content_key(self) -> int:
        """64-bit digest of labels and packet contents (position-independent identity)."""
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<qq", self.site_label, self.env_id))
        h.update(self.epoch_tag.encode())
        h.update(self.timestamps.tobytes())
        h.update(self.sizes.tobytes())
        return int.from_bytes(h.digest(), "little")


def trace_from_jitter(jitter, sizes, site_label=0, env_id=0, epoch_tag="", start: float = 0.0) -> Trace:
    """Rebuild a trace whose timestamps are ``start`` plus the running jitter sum."""
    jitter = np.asarray(jitter, dtype=np.float64)
    ts = start + np.cumsum(jitter) - (jitter[0] if jitter.size else 0.0)
    return Trace(ts, sizes, site_label, env_id, epoch_tag)


@dataclass(frozen=True, eq=False)
class SampleVector:
    values: np.ndarray  # (2 * window,) interleaved jitter/size
    site_label: int = 0
    env_id: int = 0

    @property
    def jitter(self) -> np.ndarray:
        return self.values[0::2]

    @property
    def size(self) -> np.ndarray:
        return self.values[1::2]


@dataclass(frozen=True, eq=False)
class SampleSet:
    """A batch of sample vectors stored as one ``(n, 2 * window)`` array.

    Indexing with an int returns a :class:`SampleVector`; ``subset`` takes an
    index array and returns another set.
    """

    values: np.ndarray
    site_labels: np.ndarray
    env_ids: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] % 2:
            raise DataError(f"sample array must be (n, 2*window), got {v.shape}")
        s = np.asarray(self.site_labels, dtype=np.int64).reshape(-1)
        e = np.asarray(self.env_ids, dtype=np.int64).reshape(-1)
        if not (s.size == e.size == v.shape[0]):
            raise DataError("label arrays do not match sample count")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "site_labels", s)
        object.__setattr__(self, "env_ids", e)

    @classmethod
    def empty(cls, window: int = WINDOW, dtype=np.float32) -> SampleSet:
        return cls(np.zeros((0, 2 * window), dtype=dtype), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_vectors(cls, vectors: Sequence[SampleVector], window: int = WINDOW) -> SampleSet:
        if not vectors:
            return cls.empty(window)
        return cls(
            np.stack([v.values for v in vectors]),
            [v.site_label for v in vectors],
            [v.env_id for v in vectors],
        )

    @classmethod
    def concat(cls, sets: Sequence[SampleSet]) -> SampleSet:
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.values for s in sets]),
            np.concatenate([s.site_labels for s in sets]),
            np.concatenate([s.env_ids for s in sets]),
        )

    @property
    def window(self) -> int:
        return self.values.shape[1] // 2

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> SampleVector:
        return SampleVector(self.values[i], int(self.site_labels[i]), int(self.env_ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> SampleSet:
        idx = np.asarray(idx, dtype=np.int64) if not isinstance(idx, np.ndarray) or idx.dtype != bool else idx
        return SampleSet(self.values[idx], self.site_labels[idx], self.env_ids[idx])

    def where(self, *, sites=None, envs=None) -> SampleSet:
        keep = np.ones(len(self), dtype=bool)
        if sites is not None:
            keep &= np.isin(self.site_labels, list(sites))
        if envs is not None:
            keep &= np.isin(self.env_ids, list(envs))
        return self.subset(np.flatnonzero(keep))

    def channels(self) -> np.ndarray:
        """``(n, 2, window)`` view: channel 0 is jitter, channel 1 is size."""
        return self.values.reshape(len(self), self.window, 2).transpose(0, 2, 1)

    def with_labels(self, site_labels) -> SampleSet:
        return SampleSet(self.values, site_labels, self.env_ids)


# -- jitter and windowing ---------------------------------------------------------------

def compute_jitter(trace: Trace) -> np.ndarray:
    ts = np.asarray(trace.timestamps, dtype=np.float64)
    if ts.size == 0:
        raise EmptyInputError("trace has no packets")
    d = np.diff(ts, prepend=ts[0])
    if np.any(d < 0):
        raise OrderingError("timestamps must be non-decreasing")
    return d


def interleave(jitter: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    out = np.empty(2 * len(jitter), dtype=np.float64)
    out[0::2] = jitter
    out[1::2] = sizes
    return out


def window_starts(n_packets: int, window: int, stride: int) -> np.ndarray:
    if n_packets < window:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n_packets - window + 1, stride, dtype=np.int64)


def extract_windows(trace: Trace, window: int = WINDOW, stride: int | None = None) -> SampleSet:
    """Cut ``trace`` into seamless windows starting at 0, stride, 2*stride, ...

    ``stride`` defaults to ``window`` (non-overlapping).  A trace shorter than
    ``window`` yields an empty set.
    """
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise DataError("window and stride must be positive")
    starts = window_starts(len(trace), window, stride)
    if starts.size == 0:
        return SampleSet.empty(window)
    flat = interleave(compute_jitter(trace), trace.sizes)
    views = np.lib.stride_tricks.sliding_window_view(flat, 2 * window)[2 * starts]
    n = len(starts)
    return SampleSet(
        views.astype(np.float32),
        np.full(n, trace.site_label),
        np.full(n, trace.env_id),
    )


def windows_from_traces(traces: Iterable[Trace], window: int = WINDOW, stride: int | None = None) -> SampleSet:
    sets = [extract_windows(t, window, stride) for t in traces]
    return SampleSet.concat(sets) if sets else SampleSet.empty(window)


# -- channel masks and normalization ----------------------------------------------------

class ChannelMask(str, enum.Enum):
    BOTH = "both"
    JITTER_ONLY = "jitter-only"
    SIZE_ONLY = "size-only"


def apply_channel_mask(sample, mask: ChannelMask | str):
    """Zero the masked-out channel of a SampleVector or SampleSet (labels untouched)."""
    mask = ChannelMask(mask)
    if mask is ChannelMask.BOTH:
        return sample
    values = np.array(sample.values, copy=True)
    if mask is ChannelMask.JITTER_ONLY:
        values[..., 1::2] = 0
    else:
        values[..., 0::2] = 0
    return replace(sample, values=values)


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float]  # (jitter, size)
    std: tuple[float, float]
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0 or min(self.std) < 0:
            raise DataError("NormStats needs epsilon > 0 and std >= 0")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(tuple(d["mean"]), tuple(d["std"]), d["epsilon"])


def fit_norm_stats(train: SampleSet, epsilon: float = 1e-6) -> NormStats:
    if len(train) == 0:
        raise EmptyInputError("cannot fit normalization on an empty set")
    v = np.asarray(train.values, dtype=np.float64)
    jit, size = v[:, 0::2], v[:, 1::2]
    return NormStats(
        (float(jit.mean()), float(size.mean())),
        (float(jit.std()), float(size.std())),
        float(epsilon),
    )


def apply_norm(sample, stats: NormStats):
    """Per-channel standardization; returns float64 values."""
    v = np.asarray(sample.values, dtype=np.float64)
    out = np.empty_like(v)
    for c in (0, 1):
        out[..., c::2] = (v[..., c::2] - stats.mean[c]) / max(stats.std[c], stats.epsilon)
    return replace(sample, values=out)


# -- splitting --------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    indices: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False, default=None)


def split_dataset(samples: SampleSet, ratios=(0.5, 0.25, 0.25), seed: int = 0) -> DatasetSplit:
    """Stratified train/validation/test split.

    Per class the validation and test parts get ``floor(ratio * n_c)`` samples
    and training absorbs the remainder.  Each part keeps the input order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(samples) == 0:
        raise EmptyInputError("cannot split an empty dataset")
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in np.unique(samples.site_labels):
        idx = np.flatnonzero(samples.site_labels == c)
        perm = idx[rng(seed, int(c)).permutation(idx.size)]
        n_val = math.floor(ratios[1] * idx.size + 1e-9)
        n_test = math.floor(ratios[2] * idx.size + 1e-9)
        parts[1].append(perm[:n_val])
        parts[2].append(perm[n_val:n_val + n_test])
        parts[0].append(perm[n_val + n_test:])
    idx = tuple(np.sort(np.concatenate(p)) for p in parts)
    return DatasetSplit(*(samples.subset(i) for i in idx), indices=idx)


# -- WFDS files -------------------------------------------------------------------------

def _record_dtype(window: int) -> np.dtype:
    return np.dtype([("site", "<u2"), ("env", "<u2"), ("values", "<f4", (2 * window,))])


def write_dataset(path, samples: SampleSet) -> None:
    path = Path(path)
    n, window = len(samples), samples.window
    if n and (samples.site_labels.max() > 0xFFFF or samples.env_ids.max() > 0xFFFF):
        raise DataError("labels must fit in 16 bits")
    if window > 0xFFFF:
        raise DataError("window too long for the WFDS header")
    rec = np.zeros(n, dtype=_record_dtype(window))
    rec["site"] = samples.site_labels
    rec["env"] = samples.env_ids
    rec["values"] = samples.values
    with open(path, "wb") as fh:
        fh.write(_WFDS_HEADER.pack(WFDS_MAGIC, WFDS_VERSION, n, window))
        fh.write(rec.tobytes())


def read_dataset(path) -> SampleSet:
    data = Path(path).read_bytes()
    head = data[:4]
    if head != WFDS_MAGIC[: len(head)]:
        raise BadMagicError(f"{path}: not a WFDS file")
    if len(data) < _WFDS_HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, count, window = _WFDS_HEADER.unpack_from(data)
    if version != WFDS_VERSION:
        raise VersionMismatchError(f"{path}: WFDS version {version}, expected {WFDS_VERSION}")
    dt = _record_dtype(window)
    payload = memoryview(data)[_WFDS_HEADER.size:]
    need = count * dt.itemsize
    if len(payload) < need:
        raise TruncatedError(f"{path}: header promises {count} samples, payload holds {len(payload) // dt.itemsize}")
    if len(payload) > need:
        raise FormatError(f"{path}: {len(payload) - need} trailing bytes")
    rec = np.frombuffer(payload, dtype=dt, count=count)
    return SampleSet(
        np.array(rec["values"], dtype=np.float32).reshape(count, 2 * window),
        rec["site"].astype(np.int64),
        rec["env"].astype(np.int64),
    )


# -- CSV ingestion ----------------------------------------------------------------------

def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def ingest_csv(path, site_label: int = 0, env_id: int = 0, epoch_tag: str = "") -> Trace:
    """Read ``timestamp_us,size_bytes`` rows.  Line numbers in errors are 1-based."""
    ts: list[float] = []
    sizes: list[int] = []
    seen_row = False
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", lineno)
            a, b = row[0].strip(), row[1].strip()
            if not seen_row:
                seen_row = True
                if not _is_number(a) and not _is_number(b):
                    continue  # header row
            try:
                t = float(a)
                s = float(b)
            except ValueError:
                raise ParseError(f"non-numeric field in {row!r}", lineno) from None
            if not (math.isfinite(t) and math.isfinite(s)) or t < 0 or s < 0 or s != int(s):
                raise ParseError(f"invalid values in {row!r}", lineno)
            t = float(round(t))
            if ts and t < ts[-1]:
                raise OrderingError(f"line {lineno}: timestamp {t} < previous {ts[-1]}")
            ts.append(t)
            sizes.append(int(s))
    return Trace(np.array(ts, dtype=np.float64), np.array(sizes, dtype=np.int64), site_label, env_id, epoch_tag)
