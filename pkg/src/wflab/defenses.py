"""Traffic defenses: Inflation (random jitter/size enlargement) and Active Injection (trigger packets).

Both transforms work on the ``(jitter, size)`` view of a packet sequence, so
they apply equally to traces and to the window streams stored in WFDS files.
Trace outputs rebuild timestamps as the running jitter sum from the original
first timestamp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .errors import ConfigError, EmptyInputError
from .seeding import derive_seed, rng, text_key
from .traffic import WINDOW, SampleSet, Trace, compute_jitter, trace_from_jitter

TRIGGER_SIZE_RANGE = (50, 250)
INJECTION_LEVELS = (10, 25, 35, 40, 50)
INFLATION_LEVELS = (15, 20, 25, 30, 40, 50, 60, 70, 80, 90)


# -- configs ----------------------------------------------------------------------------

@dataclass(frozen=True)
class InflationConfig:
    a: float = 0.0
    basis: str = "mean"  # or "stddev"
    targets: str = "both"  # "jitter", "size" or "both"
    seed: int = 0

    def __post_init__(self):
        if not (self.a >= 0 and math.isfinite(self.a)):
            raise ConfigError("inflation coefficient a must be a finite value >= 0")
        if self.basis not in ("mean", "stddev"):
            raise ConfigError(f"unknown inflation basis {self.basis!r}")
        if self.targets not in ("jitter", "size", "both"):
            raise ConfigError(f"unknown inflation targets {self.targets!r}")


@dataclass(frozen=True)
class TriggerPattern:
    pattern_id: int
    sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not self.sizes or min(self.sizes) <= 0:
            raise ConfigError("a trigger needs at least one packet of positive size")

    @property
    def packet_count(self) -> int:
        return len(self.sizes)

    def sizes_for(self, k: int) -> np.ndarray:
        """The pattern cycled or truncated to ``k`` packets."""
        return np.resize(np.asarray(self.sizes, dtype=np.int64), k)


@dataclass(frozen=True)
class InjectionConfig:
    k: int = 35
    pool: tuple = ()
    rotation: str = "per-trace"  # or "per-day"
    seed: int = 0
    span: int = WINDOW

    def __post_init__(self):
        object.__setattr__(self, "pool", tuple(self.pool))
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.span < 1:
            raise ConfigError("span must be >= 1")
        if self.k > 0 and not self.pool:
            raise ConfigError("injection with k > 0 needs a non-empty trigger pool")
        if self.rotation not in ("per-trace", "per-day"):
            raise ConfigError(f"unknown trigger rotation {self.rotation!r}")


def make_trigger_pool(
    n_patterns: int,
    count_per_pattern: int = 35,
    size_range=TRIGGER_SIZE_RANGE,
    seed: int = 0,
    constant: bool = False,
    forced_size: int | None = None,
) -> tuple[TriggerPattern, ...]:
    """Distinct trigger patterns with sizes drawn uniformly from ``size_range``.

    ``constant`` gives every packet of a pattern the same size; ``forced_size``
    overrides the draw entirely (one pattern only, since copies would collide).
    """
    if n_patterns < 1 or count_per_pattern < 1:
        raise ConfigError("need at least one pattern of at least one packet")
    lo, hi = int(size_range[0]), int(size_range[1])
    if not 0 < lo <= hi:
        raise ConfigError(f"bad trigger size range {size_range}")
    if forced_size is not None:
        if n_patterns != 1:
            raise ConfigError("forced_size yields identical patterns; use n_patterns=1")
        return (TriggerPattern(0, (forced_size,) * count_per_pattern),)
    distinct = (hi - lo + 1) if constant else (hi - lo + 1) ** count_per_pattern
    if n_patterns > distinct:
        raise ConfigError(f"cannot draw {n_patterns} distinct patterns from the size range")
    g = rng(seed, 0x7216)
    seen, pool = set(), []
    while len(pool) < n_patterns:
        if constant:
            sizes = (int(g.integers(lo, hi + 1)),) * count_per_pattern
        else:
            sizes = tuple(int(s) for s in g.integers(lo, hi + 1, size=count_per_pattern))
        if sizes in seen:
            continue  # redraw on collision
        seen.add(sizes)
        pool.append(TriggerPattern(len(pool), sizes))
    return tuple(pool)


# -- overhead ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OverheadReport:
    """Ratios plus the exact quantities they come from.

    Durations are float microseconds; ratios are computed as exact fractions of
    those floats and only then rounded to the nearest double.
    """

    original_duration: float
    defended_duration: float
    original_bytes: int
    added_bytes: int
    original_packets: int
    added_packets: int

    @property
    def delay_multiplier(self) -> float:
        if self.original_duration == 0:
            return 1.0 if self.defended_duration == 0 else math.inf
        return float(Fraction(self.defended_duration) / Fraction(self.original_duration))

    @property
    def byte_overhead(self) -> float:
        return float(Fraction(self.added_bytes, self.original_bytes)) if self.original_bytes else 0.0

    @property
    def packet_overhead(self) -> float:
        return float(Fraction(self.added_packets, self.original_packets)) if self.original_packets else 0.0

    def to_dict(self) -> dict:
        return {
            "delay_multiplier": self.delay_multiplier,
            "byte_overhead": self.byte_overhead,
            "packet_overhead": self.packet_overhead,
        }

    @staticmethod
    def identity(trace_or_len, duration: float = 0.0, total_bytes: int = 0) -> OverheadReport:
        n = trace_or_len if isinstance(trace_or_len, int) else len(trace_or_len)
        return OverheadReport(duration, duration, total_bytes, 0, n, 0)


def _duration(jitter: np.ndarray) -> float:
    # the first entry is the gap before the sequence, not part of its span
    return math.fsum(jitter[1:].tolist()) if jitter.size > 1 else 0.0


def measure_overhead(original: Trace, defended: Trace) -> OverheadReport:
    """Overheads recomputed from scratch from the two traces."""
    d0 = float(original.timestamps[-1] - original.timestamps[0]) if len(original) else 0.0
    d1 = float(defended.timestamps[-1] - defended.timestamps[0]) if len(defended) else 0.0
    b0, b1 = int(original.sizes.sum()), int(defended.sizes.sum())
    return OverheadReport(d0, d1, b0, b1 - b0, len(original), len(defended) - len(original))


def aggregate_overhead(reports) -> dict:
    """Corpus-level ratios (pooled sums) and per-trace means."""
    reports = list(reports)
    if not reports:
        return {"traces": 0, "delay_multiplier": 1.0, "byte_overhead": 0.0, "packet_overhead": 0.0}
    pooled = OverheadReport(
        math.fsum(r.original_duration for r in reports),
        math.fsum(r.defended_duration for r in reports),
        sum(r.original_bytes for r in reports),
        sum(r.added_bytes for r in reports),
        sum(r.original_packets for r in reports),
        sum(r.added_packets for r in reports),
    )
    out = {"traces": len(reports), **pooled.to_dict()}
    for key in ("delay_multiplier", "byte_overhead", "packet_overhead"):
        out[f"mean_{key}"] = float(np.mean([getattr(r, key) for r in reports]))
    return out


# -- array-level transforms -------------------------------------------------------------

def inflate_arrays(jitter: np.ndarray, sizes: np.ndarray, cfg: InflationConfig, g: np.random.Generator):
    """Add ``U[0, a * basis]`` to jitters and/or sizes.

    Jitter statistics skip the leading entry (the gap before the sequence,
    which is zero for a whole trace); it is left untouched.
    """
    jitter = np.asarray(jitter, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.size == 0:
        raise EmptyInputError("cannot inflate an empty sequence")
    stat = np.mean if cfg.basis == "mean" else np.std
    # draws happen whatever the targets, so jitter noise is the same with or without size noise
    u_j = g.uniform(0.0, 1.0, size=jitter.size)
    u_s = g.uniform(0.0, 1.0, size=sizes.size)
    out_j, out_s = jitter.copy(), sizes.copy()
    if cfg.targets in ("jitter", "both") and jitter.size > 1:
        x = cfg.a * float(stat(jitter[1:]))
        out_j[1:] = jitter[1:] + u_j[1:] * x
    if cfg.targets in ("size", "both"):
        x = cfg.a * float(stat(sizes))
        out_s = sizes + np.ceil(u_s * x).astype(np.int64)
        out_s = np.maximum(out_s, 1)
    return out_j, out_s


def pattern_index(cfg: InjectionConfig, site_label: int, epoch_tag: str, trace_key: int) -> int:
    """Which pool pattern a sequence receives.

    ``per-trace`` draws one pattern per trace from its content key.  ``per-day``
    simulates a daily rotation schedule: every site owns a pool slot and all
    slots advance by one each day, so a site's trigger changes from one day to
    the next while sites collected on the same day carry distinct triggers
    (for up to ``len(pool)`` sites).  Day numbers come from integer epoch tags;
    other tags are hashed.
    """
    n = len(cfg.pool)
    if cfg.rotation == "per-trace":
        return int(rng(cfg.seed, 0x1217, trace_key).integers(n))
    slots = rng(cfg.seed, 0x5107).permutation(n)
    try:
        day = int(epoch_tag) if epoch_tag else 0
    except ValueError:
        day = text_key(epoch_tag)
    return int((slots[site_label % n] + day) % n)


def inject_arrays(jitter: np.ndarray, sizes: np.ndarray, cfg: InjectionConfig, pattern: TriggerPattern,
                  g: np.random.Generator, mean_jitter: float | None = None):
    """Insert ``k`` trigger packets after every complete span of ``cfg.span`` packets.

    Injected gaps are ``U[0, mean jitter]``; each original packet keeps its own
    gap, so everything downstream shifts by the injected delays.
    """
    jitter = np.asarray(jitter, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.int64)
    n = sizes.size
    spans = n // cfg.span
    if cfg.k == 0 or spans == 0:
        return jitter.copy(), sizes.copy()
    if mean_jitter is None:
        mean_jitter = float(np.mean(jitter[1:])) if n > 1 else 0.0
    trig = pattern.sizes_for(cfg.k)
    add_j = g.uniform(0.0, mean_jitter, size=(spans, cfg.k))
    pieces_j, pieces_s = [], []
    for s in range(spans):
        lo, hi = s * cfg.span, (s + 1) * cfg.span
        pieces_j += [jitter[lo:hi], add_j[s]]
        pieces_s += [sizes[lo:hi], trig]
    pieces_j.append(jitter[spans * cfg.span :])
    pieces_s.append(sizes[spans * cfg.span :])
    return np.concatenate(pieces_j), np.concatenate(pieces_s)


# -- trace-level API --------------------------------------------------------------------

def _trace_rng(seed: int, trace: Trace) -> np.random.Generator:
    return rng(seed, trace.content_key())


def _rebuild(trace: Trace, jitter, sizes) -> Trace:
    return trace_from_jitter(jitter, sizes, trace.site_label, trace.env_id, trace.epoch_tag, float(trace.timestamps[0]))


def apply_inflation(trace: Trace, cfg: InflationConfig) -> tuple[Trace, OverheadReport]:
    if len(trace) == 0:
        raise EmptyInputError("cannot inflate an empty trace")
    if cfg.a == 0:
        return trace, measure_overhead(trace, trace)
    jitter, sizes = inflate_arrays(compute_jitter(trace), trace.sizes, cfg, _trace_rng(cfg.seed, trace))
    out = _rebuild(trace, jitter, sizes)
    return out, measure_overhead(trace, out)


def apply_injection(trace: Trace, cfg: InjectionConfig) -> tuple[Trace, OverheadReport]:
    if len(trace) == 0:
        raise EmptyInputError("cannot inject into an empty trace")
    if cfg.k == 0 or len(trace) < cfg.span:
        return trace, measure_overhead(trace, trace)
    key = trace.content_key()
    pattern = cfg.pool[pattern_index(cfg, trace.site_label, trace.epoch_tag, key)]
    jitter, sizes = inject_arrays(compute_jitter(trace), trace.sizes, cfg, pattern, rng(cfg.seed, key))
    out = _rebuild(trace, jitter, sizes)
    return out, measure_overhead(trace, out)


def apply_defense(trace: Trace, cfg) -> tuple[Trace, OverheadReport]:
    if isinstance(cfg, InflationConfig):
        return apply_inflation(trace, cfg)
    if isinstance(cfg, InjectionConfig):
        return apply_injection(trace, cfg)
    raise ConfigError(f"not a defense config: {cfg!r}")


def defend_dataset(train, test, cfg, mode: str = "train+test"):
    """Defend ``test`` traces and, in ``train+test`` mode, ``train`` traces too.

    Returns ``(train_out, test_out, reports)``; each trace uses a seed derived
    from its own contents, so traces are defended independently of each other.
    """
    if mode not in ("train+test", "test-only"):
        raise ConfigError(f"unknown defense mode {mode!r}")
    reports = []

    def run(traces):
        out = []
        for t in traces:
            d, rep = apply_defense(t, cfg)
            out.append(d)
            reports.append(rep)
        return out

    train_out = run(train) if mode == "train+test" else list(train)
    test_out = run(test)
    return train_out, test_out, reports


# -- window streams (WFDS contents) ------------------------------------------------------

def defend_samples(samples: SampleSet, cfg, epoch_tag: str = "") -> tuple[SampleSet, OverheadReport]:
    """Defend a window stream: windows of each (site, env) group are joined end to end,
    defended as one sequence and cut into whole windows again.

    Stride-equals-window datasets reconstruct the original packet sequence, so
    this matches defending the trace and windowing afterwards.  Identity
    settings return the input untouched.
    """
    if (isinstance(cfg, InjectionConfig) and cfg.k == 0) or (isinstance(cfg, InflationConfig) and cfg.a == 0):
        vals = samples.values
        j = vals[:, 0::2].astype(np.float64).ravel()
        dur = math.fsum(j.tolist())
        return samples, OverheadReport(dur, dur, int(vals[:, 1::2].sum()), 0, vals.shape[0] * samples.window, 0)
    w = samples.window
    parts, reports = [], []
    groups = sorted(set(zip(samples.site_labels.tolist(), samples.env_ids.tolist())))
    for site, env in groups:
        sel = (samples.site_labels == site) & (samples.env_ids == env)
        vals = samples.values[sel].astype(np.float64)
        jitter, sizes = vals[:, 0::2].ravel(), np.rint(vals[:, 1::2]).astype(np.int64).ravel()
        g = rng(getattr(cfg, "seed", 0), 0x57AE, site, env, text_key(epoch_tag))
        if isinstance(cfg, InflationConfig):
            nj, ns = inflate_arrays(jitter, sizes, cfg, g)
        elif isinstance(cfg, InjectionConfig):
            key = derive_seed(cfg.seed, site, env, text_key(epoch_tag))
            pattern = cfg.pool[pattern_index(cfg, site, epoch_tag, key)]
            nj, ns = inject_arrays(jitter, sizes, cfg, pattern, g)
        else:
            raise ConfigError(f"not a defense config: {cfg!r}")
        reports.append(OverheadReport(_duration(jitter), _duration(nj), int(sizes.sum()), int(ns.sum() - sizes.sum()),
                                      sizes.size, ns.size - sizes.size))
        m = ns.size // w
        if m == 0:
            continue
        out = np.empty((m, 2 * w), dtype=np.float32)
        out[:, 0::2] = nj[: m * w].reshape(m, w)
        out[:, 1::2] = ns[: m * w].reshape(m, w)
        parts.append(SampleSet(out, np.full(m, site, np.int64), np.full(m, env, np.int64)))
    total = OverheadReport(
        math.fsum(r.original_duration for r in reports),
        math.fsum(r.defended_duration for r in reports),
        sum(r.original_bytes for r in reports),
        sum(r.added_bytes for r in reports),
        sum(r.original_packets for r in reports),
        sum(r.added_packets for r in reports),
    )
    return (SampleSet.concat(parts) if parts else SampleSet.empty(w)), total


def with_epoch(traces, tag: str) -> list[Trace]:
    """Copies of ``traces`` stamped with a collection-day tag."""
    return [replace(t, epoch_tag=tag) for t in traces]
