"""Deterministic synthetic traffic: per-site burst/size structure shaped by per-environment effects.

Sites emit bursts of geometric length.  The first packet of a burst waits an
inter-burst gap, the rest an intra-burst gap; both are log-normal.  Sizes come
from a per-site Gaussian mixture.  An environment rescales all gaps
(``latency_scale``, plus ``cpu_slowdown`` on inter-burst gaps), adds log-space
noise, rescales sizes and clamps them to ``[64, mtu_cap]``.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .seeding import derive_seed, rng
from .traffic import Trace

MIN_SIZE = 64

# Environment-level averages used as generator anchors: inter-packet interval
# (microseconds) and packet size (bytes) ranges across eight collection sites.
INTERVAL_RANGE_US = (2604.0, 10893.0)
SIZE_RANGE_BYTES = (1180.0, 2711.0)


@dataclass(frozen=True)
class SiteProfile:
    site_label: int
    size_mixture: tuple  # ((mean_bytes, std_bytes, weight), ...)
    burst_len_geometric_p: float
    intra_burst_jitter: tuple  # (log-mean, log-std) of ln(microseconds)
    inter_burst_jitter: tuple

    def __post_init__(self):
        mix = tuple(tuple(float(x) for x in c) for c in self.size_mixture)
        object.__setattr__(self, "size_mixture", mix)
        object.__setattr__(self, "intra_burst_jitter", tuple(map(float, self.intra_burst_jitter)))
        object.__setattr__(self, "inter_burst_jitter", tuple(map(float, self.inter_burst_jitter)))
        if not mix or any(len(c) != 3 for c in mix):
            raise ConfigError(f"site {self.site_label}: size_mixture needs (mean, std, weight) triples")
        if abs(sum(c[2] for c in mix) - 1.0) > 1e-9 or any(c[2] < 0 for c in mix):
            raise ConfigError(f"site {self.site_label}: mixture weights must sum to 1")
        if any(c[1] < 0 for c in mix) or self.intra_burst_jitter[1] < 0 or self.inter_burst_jitter[1] < 0:
            raise ConfigError(f"site {self.site_label}: standard deviations must be >= 0")
        if not 0 < self.burst_len_geometric_p <= 1:
            raise ConfigError(f"site {self.site_label}: burst p must lie in (0, 1]")

    def mean_jitter(self, cpu_slowdown=1.0, noise_std=0.0) -> float:
        """Expected gap at latency_scale 1 (log-normal means, burst-start rate p)."""
        p = self.burst_len_geometric_p
        lift = math.exp(noise_std**2 / 2)
        intra = math.exp(self.intra_burst_jitter[0] + self.intra_burst_jitter[1] ** 2 / 2)
        inter = math.exp(self.inter_burst_jitter[0] + self.inter_burst_jitter[1] ** 2 / 2)
        return lift * (p * cpu_slowdown * inter + (1 - p) * intra)


@dataclass(frozen=True)
class EnvProfile:
    env_id: int
    latency_scale: float = 1.0
    mtu_cap: int = 1500
    size_scale: float = 1.0
    jitter_noise_std: float = 0.0
    cpu_slowdown: float = 1.0

    def __post_init__(self):
        if self.latency_scale <= 0:
            raise ConfigError(f"env {self.env_id}: latency_scale must be > 0")
        if self.mtu_cap < MIN_SIZE:
            raise ConfigError(f"env {self.env_id}: mtu_cap must be >= {MIN_SIZE}")
        if self.size_scale <= 0 or self.jitter_noise_std < 0 or self.cpu_slowdown < 1:
            raise ConfigError(f"env {self.env_id}: invalid size_scale/noise/cpu_slowdown")


@dataclass(frozen=True)
class SynthConfig:
    sites: tuple
    envs: tuple
    packets_per_trace: int = 5000
    traces_per_site_env: int = 2
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "envs", tuple(self.envs))
        if not self.sites or not self.envs:
            raise ConfigError("need at least one site and one environment")
        if self.packets_per_trace < 1 or self.traces_per_site_env < 1:
            raise ConfigError("packets_per_trace and traces_per_site_env must be positive")
        for kind, labels in (("site", [s.site_label for s in self.sites]), ("env", [e.env_id for e in self.envs])):
            if len(set(labels)) != len(labels):
                raise ConfigError(f"duplicate {kind} ids")

    def with_(self, **changes) -> SynthConfig:
        d = {f: getattr(self, f) for f in ("sites", "envs", "packets_per_trace", "traces_per_site_env", "master_seed")}
        d.update(changes)
        return SynthConfig(**d)

    def to_dict(self) -> dict:
        return {
            "master_seed": int(self.master_seed),
            "packets_per_trace": int(self.packets_per_trace),
            "traces_per_site_env": int(self.traces_per_site_env),
            "sites": [
                {
                    "site_label": s.site_label,
                    "size_mixture": [list(c) for c in s.size_mixture],
                    "burst_len_geometric_p": s.burst_len_geometric_p,
                    "intra_burst_jitter": list(s.intra_burst_jitter),
                    "inter_burst_jitter": list(s.inter_burst_jitter),
                }
                for s in self.sites
            ],
            "envs": [asdict(e) for e in self.envs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        allowed = {"master_seed", "packets_per_trace", "traces_per_site_env", "sites", "envs"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        try:
            sites = [SiteProfile(**s) for s in d["sites"]]
            envs = [EnvProfile(**e) for e in d["envs"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed synth config: {exc}") from None
        rest = {k: d[k] for k in ("master_seed", "packets_per_trace", "traces_per_site_env") if k in d}
        return cls(sites, envs, **rest)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> SynthConfig:
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_dict(data)


def _burst_starts(g: np.random.Generator, p: float, n: int) -> np.ndarray:
    starts = np.zeros(n, dtype=bool)
    pos = 0
    while pos < n:
        lengths = g.geometric(p, size=max(16, int((n - pos) * p * 1.2) + 16))
        offsets = pos + np.concatenate(([0], np.cumsum(lengths[:-1])))
        offsets = offsets[offsets < n]
        starts[offsets] = True
        pos = int(pos + lengths.sum())
    return starts


def generate_trace(site: SiteProfile, env: EnvProfile, seed: int, n_packets: int = 5000, epoch_tag: str = "") -> Trace:
    """One trace of ``n_packets``; a pure function of (profiles, seed, n_packets).

    The random draws do not depend on the environment, so two environments with
    the same seed share the same underlying burst/gap/size noise.
    """
    g = np.random.default_rng(seed)
    starts = _burst_starts(g, site.burst_len_geometric_p, n_packets)
    z_gap = g.standard_normal(n_packets)
    z_env = g.standard_normal(n_packets)
    mix = np.array(site.size_mixture)
    comp = g.choice(len(mix), size=n_packets, p=mix[:, 2] / mix[:, 2].sum())
    z_size = g.standard_normal(n_packets)

    mu = np.where(starts, site.inter_burst_jitter[0], site.intra_burst_jitter[0])
    sigma = np.where(starts, site.inter_burst_jitter[1], site.intra_burst_jitter[1])
    gaps = np.exp(mu + sigma * z_gap + env.jitter_noise_std * z_env)
    gaps *= env.latency_scale * np.where(starts, env.cpu_slowdown, 1.0)
    gaps[0] = 0.0
    sizes = np.rint((mix[comp, 0] + mix[comp, 1] * z_size) * env.size_scale)
    sizes = np.clip(sizes, MIN_SIZE, env.mtu_cap).astype(np.int64)
    return Trace(np.cumsum(gaps), sizes, site.site_label, env.env_id, epoch_tag)


def trace_seed(cfg: SynthConfig, site_label: int, env_id: int, index: int) -> int:
    return derive_seed(cfg.master_seed, site_label, env_id, index)


def _gen_job(args):
    site, env, seed, n = args
    return generate_trace(site, env, seed, n)


def generate_corpus(cfg: SynthConfig, jobs: int = 1) -> list[Trace]:
    """``traces_per_site_env`` traces per (site, env), ordered site-major then env then index."""
    work = [
        (site, env, trace_seed(cfg, site.site_label, env.env_id, i), cfg.packets_per_trace)
        for site in cfg.sites
        for env in cfg.envs
        for i in range(cfg.traces_per_site_env)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_gen_job, work, chunksize=4))
    return [_gen_job(w) for w in work]


# -- default corpus ---------------------------------------------------------------------

# shared site shape: (ack-like, mid, bulk) size components and burst timing
_BASE_MIXTURE = ((90.0, 20.0, 0.30), (600.0, 150.0, 0.20), (1300.0, 250.0, 0.50))
_BASE_BURST_P = 0.15
_BASE_INTRA = (math.log(200.0), 0.6)
_BASE_INTER = (math.log(8000.0), 0.6)


def _site_profile(g: np.random.Generator, label: int, separation: float) -> SiteProfile:
    # each site perturbs the shared shape; ``separation`` scales every perturbation
    z = g.standard_normal(9)
    s = separation
    logits = np.log([c[2] for c in _BASE_MIXTURE]) + 0.5 * s * z[0:3]
    w = np.exp(logits) / np.exp(logits).sum()
    mixture = (
        (_BASE_MIXTURE[0][0], _BASE_MIXTURE[0][1], float(w[0])),
        (max(150.0, _BASE_MIXTURE[1][0] + 150.0 * s * z[3]), _BASE_MIXTURE[1][1], float(w[1])),
        (max(300.0, _BASE_MIXTURE[2][0] + 300.0 * s * z[4]), _BASE_MIXTURE[2][1], 0.0),
    )
    mixture = (*mixture[:2], (mixture[2][0], mixture[2][1], 1.0 - mixture[0][2] - mixture[1][2]))
    p = 1.0 / (1.0 + math.exp(-(math.log(_BASE_BURST_P / (1 - _BASE_BURST_P)) + 0.5 * s * z[5])))
    return SiteProfile(
        site_label=label,
        size_mixture=mixture,
        burst_len_geometric_p=p,
        intra_burst_jitter=(_BASE_INTRA[0] + 0.4 * s * z[6], _BASE_INTRA[1]),
        inter_burst_jitter=(_BASE_INTER[0] + 0.4 * s * z[7], max(0.2, _BASE_INTER[1] + 0.1 * s * z[8])),
    )


def _mean_clamped_size(site_draws: list[np.ndarray], scale: float, cap: int) -> float:
    return float(np.mean([np.clip(np.rint(d * scale), MIN_SIZE, cap).mean() for d in site_draws]))


def default_corpus(
    n_sites: int = 20,
    n_envs: int = 8,
    master_seed: int = 0,
    packets_per_trace: int = 5000,
    traces_per_site_env: int = 2,
    separation: float = 0.8,
) -> SynthConfig:
    """A learnable multi-environment config anchored to the published environment ranges.

    Environment mean gaps are placed log-uniformly across the full interval
    range (first and last env at the extremes) and mean sizes are stratified
    across the size range; both are calibrated against the generated sites.
    """
    if not 1 <= n_sites <= 64 or not 1 <= n_envs <= 16:
        raise ConfigError("default_corpus supports 1..64 sites and 1..16 envs")
    g = rng(master_seed, 0x5173)
    sites = [_site_profile(g, i, separation) for i in range(n_sites)]

    # size calibration sample: fixed standard-normal draws pushed through each mixture
    cal = rng(master_seed, 0xCA1)
    draws = []
    for s in sites:
        mix = np.array(s.size_mixture)
        comp = cal.choice(len(mix), size=4000, p=mix[:, 2])
        draws.append(mix[comp, 0] + mix[comp, 1] * cal.standard_normal(4000))

    lo_i, hi_i = INTERVAL_RANGE_US
    lo_s, hi_s = SIZE_RANGE_BYTES
    size_slots = g.permutation(n_envs)
    envs = []
    for e in range(n_envs):
        frac = e / (n_envs - 1) if n_envs > 1 else 0.5
        target_gap = lo_i * (hi_i / lo_i) ** frac
        target_size = lo_s + (hi_s - lo_s) * (size_slots[e] + g.uniform(0.25, 0.75)) / n_envs
        cpu = float(g.uniform(1.0, 1.6))
        noise = float(g.uniform(0.05, 0.25))
        base_gap = float(np.mean([s.mean_jitter(cpu, noise) for s in sites]))
        cap = 1500 if target_size < 1400 else 9000
        lo, hi = 0.05, 20.0
        for _ in range(60):
            mid = math.sqrt(lo * hi)
            if _mean_clamped_size(draws, mid, cap) < target_size:
                lo = mid
            else:
                hi = mid
        envs.append(
            EnvProfile(
                env_id=e,
                latency_scale=target_gap / base_gap,
                mtu_cap=cap,
                size_scale=math.sqrt(lo * hi),
                jitter_noise_std=noise,
                cpu_slowdown=cpu,
            )
        )
    return SynthConfig(sites, envs, packets_per_trace, traces_per_site_env, master_seed)
