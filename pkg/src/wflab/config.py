"""Structured run configuration (YAML) shared by every CLI command.

Sections mirror the pipeline stages.  Unknown keys anywhere are rejected, and
command-line flags override file values; the resolved config is written next
to every command's outputs so the run can be repeated from it.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapt import DAConfig
from .defenses import InflationConfig, InjectionConfig, make_trigger_pool
from .errors import ConfigError
from .evalkit import ExperimentConfig
from .model import TrainConfig
from .synth import default_corpus


@dataclass
class SynthSection:
    n_sites: int = 20
    n_envs: int = 8
    packets_per_trace: int = 5000
    traces_per_site_env: int = 2
    separation: float = 0.8
    window: int = 500
    stride: int | None = None


@dataclass
class ModelSection:
    preset: str = "tiny"
    overrides: dict = field(default_factory=dict)


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int | None = None
    mask: str = "both"
    split: list = field(default_factory=lambda: [0.5, 0.25, 0.25])


@dataclass
class DASection:
    lambda_d: float = 1.0
    domain_mode: str = "binary"
    schedule: str = "ramp"
    ramp_start: float = 0.0
    ramp_end: float = 1.0
    ramp_epochs: int | None = None
    split_block: int | None = None
    domain_count: int | None = None


@dataclass
class DefenseSection:
    kind: str = "none"  # none, inflation, injection
    a: float = 0.0
    basis: str = "mean"
    targets: str = "both"
    k: int = 35
    pool_size: int = 20
    pattern_packets: int = 35
    rotation: str = "per-trace"
    mode: str = "both"
    epoch_tag: str = ""


@dataclass
class ExperimentSection:
    kind: str = "ablation"  # cross-domain, learning-curve, scaling, ablation, defense
    target_env: int = 0
    sizes: list = field(default_factory=lambda: [1000, 2000, 5000, 10000, 20000])
    curve_mode: str = "scratch"
    counts: list = field(default_factory=lambda: [5, 10, 20, 40])
    masks: list = field(default_factory=lambda: ["both", "jitter-only", "size-only"])
    inflation_levels: list = field(default_factory=lambda: [15, 20, 25, 30, 40, 50, 60, 70, 80, 90])
    injection_levels: list = field(default_factory=lambda: [10, 25, 35, 40, 50])


_SECTIONS = {
    "synth": SynthSection,
    "model": ModelSection,
    "train": TrainSection,
    "da": DASection,
    "defense": DefenseSection,
    "experiment": ExperimentSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    da: DASection = field(default_factory=DASection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        data = dict(data or {})
        unknown = set(data) - {"seed", "out", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: data[k] for k in ("seed", "out") if k in data}
        for name, section in _SECTIONS.items():
            kwargs[name] = _section(section, data.get(name), name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None) -> RunConfig:
        """Read ``path`` (or defaults when None); ``WFLAB_SEED`` fills a missing seed."""
        data = {}
        if path is not None:
            try:
                data = yaml.safe_load(Path(path).read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"{path}: {exc.strerror}") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: expected a mapping at top level")
        if "seed" not in data and os.environ.get("WFLAB_SEED"):
            try:
                data["seed"] = int(os.environ["WFLAB_SEED"])
            except ValueError:
                raise ConfigError("WFLAB_SEED must be an integer") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def validate(self) -> None:
        # building every derived config surfaces range errors early
        self.train_config()
        self.da_config()
        if self.defense.kind != "none":
            self.defense_config()
        if self.defense.kind not in ("none", "inflation", "injection"):
            raise ConfigError(f"unknown defense kind {self.defense.kind!r}")
        if self.experiment.kind not in ("cross-domain", "learning-curve", "scaling", "ablation", "defense"):
            raise ConfigError(f"unknown experiment kind {self.experiment.kind!r}")

    # -- derived configs -------------------------------------------------------------

    def synth_config(self):
        s = self.synth
        return default_corpus(s.n_sites, s.n_envs, self.seed, s.packets_per_trace, s.traces_per_site_env, s.separation)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, optimizer=t.optimizer, lr=t.lr, momentum=t.momentum,
            beta1=t.beta1, beta2=t.beta2, epsilon=t.epsilon, seed=self.seed if seed is None else seed,
            patience=t.patience, mask=t.mask,
        )

    def da_config(self) -> DAConfig:
        d = self.da
        return DAConfig(d.lambda_d, d.domain_mode, d.schedule, d.ramp_start, d.ramp_end, d.ramp_epochs,
                        d.split_block, self.train_config(), d.domain_count)

    def defense_config(self):
        d = self.defense
        if d.kind == "inflation":
            return InflationConfig(d.a, d.basis, d.targets, self.seed)
        if d.kind == "injection":
            pool = make_trigger_pool(d.pool_size, d.pattern_packets, seed=self.seed) if d.k > 0 else ()
            return InjectionConfig(d.k, pool, d.rotation, self.seed)
        return None

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            preset=self.model.preset,
            arch_overrides=dict(self.model.overrides),
            train=self.train_config(),
            split=tuple(self.train.split),
            seed=self.seed,
            window=self.synth.window,
            stride=self.synth.stride,
        )


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**data)
