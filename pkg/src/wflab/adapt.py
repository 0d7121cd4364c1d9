"""Domain-adversarial training through a gradient reversal layer.

One optimizer minimizes ``L_website + lambda * L_domain`` where the domain
gradient reaches the shared extractor only through the reversal layer, so the
domain head learns to tell domains apart while the extractor learns to hide
them.  Labelled (source) batches run the extractor in training mode; unlabelled
target batches run it with the running batch-norm statistics, exactly as the
target will be seen at prediction time.  With ``lambda_d = 0`` the extractor
and website head follow plain supervised training bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError
from .model import StepHook, TrainConfig, TrainedModel, attach_domain_head, fit
from .nn import functional as F
from .seeding import rng
from .traffic import ChannelMask, SampleSet, apply_channel_mask, fit_norm_stats


@dataclass(frozen=True)
class DAConfig:
    lambda_d: float = 1.0
    domain_mode: str = "binary"  # or "multi-index"
    schedule: str = "ramp"  # or "constant"
    ramp_start: float = 0.0
    ramp_end: float = 1.0
    ramp_epochs: int | None = None  # None: first third of training
    split_block: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    domain_count: int | None = None  # None: implied by the domain mode and the data

    def __post_init__(self):
        if self.domain_count is not None and self.domain_count < 2:
            raise ConfigError("domain_count must be at least 2")
        if self.lambda_d < 0:
            raise ConfigError("lambda_d must be >= 0")
        if self.domain_mode not in ("binary", "multi-index"):
            raise ConfigError(f"unknown domain_mode {self.domain_mode!r}")
        if self.schedule not in ("ramp", "constant"):
            raise ConfigError(f"unknown lambda schedule {self.schedule!r}")
        if self.schedule == "ramp":
            if self.ramp_epochs is not None and self.ramp_epochs < 0:
                raise ConfigError("ramp_epochs must be >= 0")
            if self.ramp_epochs is not None and self.ramp_epochs > self.train.epochs:
                raise ConfigError(f"lambda ramp of {self.ramp_epochs} epochs outlasts the {self.train.epochs} training epochs")

    @property
    def ramp_length(self) -> float:
        if self.ramp_epochs is not None:
            return float(self.ramp_epochs)
        return math.ceil(self.train.epochs / 3)

    def lam(self, progress: float) -> float:
        """Reversal strength after ``progress`` epochs (fractional)."""
        if self.schedule == "constant":
            return self.lambda_d
        length = self.ramp_length
        frac = 1.0 if length == 0 else min(progress / length, 1.0)
        return self.lambda_d * (self.ramp_start + (self.ramp_end - self.ramp_start) * frac)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("lambda_d", "domain_mode", "schedule", "ramp_start", "ramp_end", "ramp_epochs", "split_block",
                                       "domain_count")}
        d["train"] = self.train.to_dict()
        return d


@dataclass(frozen=True, eq=False)
class DomainBatch:
    """Samples tagged with domain ids.  Website labels exist only for labelled domains."""

    values: np.ndarray
    domain_ids: np.ndarray
    site_labels: np.ndarray | None = None

    @classmethod
    def unlabeled(cls, samples: SampleSet, domain_id: int) -> DomainBatch:
        return cls(samples.values, np.full(len(samples), domain_id, dtype=np.int64), None)

    @classmethod
    def labeled(cls, samples: SampleSet, domain_ids) -> DomainBatch:
        ids = np.broadcast_to(np.asarray(domain_ids, dtype=np.int64), (len(samples),)).copy()
        return cls(samples.values, ids, samples.site_labels)

    def __len__(self):
        return len(self.domain_ids)

    def as_samples(self) -> SampleSet:
        # website labels of unlabelled domains are not available; zeros keep shapes valid
        labels = self.site_labels if self.site_labels is not None else np.zeros(len(self), np.int64)
        return SampleSet(self.values, labels, self.domain_ids)

    @staticmethod
    def concat(batches) -> DomainBatch:
        return DomainBatch(
            np.concatenate([b.values for b in batches]),
            np.concatenate([b.domain_ids for b in batches]),
            None,
        )


class _AdversarialHook(StepHook):
    """Runs the domain branch alongside each labelled step.

    The labelled half reuses the website forward pass (training-mode batch
    norm); the target half is an equally sized batch run through the extractor
    with running statistics, and each half carries weight one half in the
    domain loss.
    """

    def __init__(self, model: TrainedModel, source_domains: np.ndarray, target: DomainBatch | None,
                 probe: DomainBatch, cfg: DAConfig):
        self.model = model
        self.net = model.net
        self.cfg = cfg
        self.source_domains = source_domains
        self.target_x = model.prepare(target.as_samples()) if target is not None and len(target) else None
        self.target_ids = None if target is None else target.domain_ids
        self.probe = probe
        self.g = rng(cfg.train.seed, 0xDA)
        self._order = np.zeros(0, dtype=np.int64)
        self._batch_len = 0
        self.lam = 0.0
        self.epoch = 0
        self.n_steps = 1
        self.step_in_epoch = 0
        self.loss_sum = 0.0
        self.loss_n = 0
        self.lams: list[float] = []

    def extra_params(self):
        return [p for p in self.net.domain_params() if p.trainable]

    def begin_epoch(self, epoch, n_steps):
        self.epoch, self.n_steps, self.step_in_epoch = epoch, max(n_steps, 1), 0
        self.loss_sum, self.loss_n = 0.0, 0

    def source_features(self, feats, batch_idx, step):
        self.lam = self.cfg.lam(self.epoch - 1 + self.step_in_epoch / self.n_steps)
        self.lams.append(self.lam)
        self.net.grl.lam = self.lam
        self._batch_len = len(batch_idx)
        w = 0.5 if self.target_x is not None else 1.0
        logits = self.net.domain.forward(feats, train=True)
        loss, g = F.softmax_cross_entropy(logits, self.source_domains[batch_idx])
        self.loss_sum += w * loss
        gfeat = self.net.domain.backward((w * g).astype(self.net.dtype))
        # at lambda = 0 nothing reaches the extractor, keeping plain training intact
        return None if self.lam == 0 else gfeat

    def _target_batch(self, n):
        if self._order.size < n:
            self._order = np.concatenate([self._order, self.g.permutation(len(self.target_x))])
        idx, self._order = self._order[:n], self._order[n:]
        return idx

    def after_backward(self, step):
        self.step_in_epoch += 1
        self.loss_n += 1
        if self.target_x is None:
            return
        idx = self._target_batch(min(self._batch_len, len(self.target_x)))
        feats = self.net.features.forward(self.target_x[idx], train=False)
        logits = self.net.domain.forward(feats, train=True)
        loss, g = F.softmax_cross_entropy(logits, self.target_ids[idx])
        self.loss_sum += 0.5 * loss
        gfeat = self.net.domain.backward((0.5 * g).astype(self.net.dtype))
        if self.lam != 0:
            self.net.features.backward(gfeat)

    def end_epoch(self, epoch):
        return {
            "lambda": self.lam,
            "domain_loss": self.loss_sum / max(self.loss_n, 1),
            "domain_acc": domain_accuracy(self.model, self.probe) if len(self.probe) else float("nan"),
        }


def _prepare(model: TrainedModel, domain_count: int, cfg: DAConfig) -> TrainedModel:
    if domain_count < 2:
        raise ConfigError("domain adaptation needs at least two domains")
    if cfg.domain_count is not None and cfg.domain_count != domain_count:
        raise ConfigError(f"domain_count {cfg.domain_count} does not match the {domain_count} domains in the data")
    if model.arch.domain_count == domain_count and (cfg.split_block is None or cfg.split_block == model.arch.split_block):
        return model.clone()
    return attach_domain_head(model, domain_count, cfg.train.seed, cfg.split_block)


def _adversarial_fit(model, source, source_domains, val, target, domain_count, cfg: DAConfig):
    model = _prepare(model, domain_count, cfg)
    # the target pass needs normalization before fit() runs; same stats plain training would fit
    if model.norm is None or cfg.train.refit_norm:
        model.norm = fit_norm_stats(apply_channel_mask(source, ChannelMask(cfg.train.mask)))
        model.mask = ChannelMask(cfg.train.mask)
    probe_parts = []
    if len(val):
        probe_parts.append(DomainBatch.labeled(val, _val_domains(val, source, source_domains)))
    if target is not None and len(target):
        k = min(len(target), max(len(val), 1))
        probe_parts.append(DomainBatch(target.values[:k], target.domain_ids[:k], None))
    probe = DomainBatch.concat(probe_parts) if probe_parts else DomainBatch(np.zeros((0, source.values.shape[1])), np.zeros(0, np.int64))
    hook = _AdversarialHook(model, source_domains, target, probe, cfg)
    model, history = fit(model, source, val, cfg.train, hook=hook)
    model.manifest["da"] = cfg.to_dict()
    return model, history


def _val_domains(val: SampleSet, source: SampleSet, source_domains: np.ndarray) -> np.ndarray:
    lut = {}
    for env, dom in zip(source.env_ids.tolist(), source_domains.tolist()):
        lut.setdefault(env, dom)
    return np.array([lut.get(e, 0) for e in val.env_ids.tolist()], dtype=np.int64)


def da_train(model: TrainedModel, source: SampleSet, source_val: SampleSet, target: SampleSet, cfg: DAConfig):
    """Adapt from labelled ``source`` to unlabelled ``target``; returns ``(model, history)``.

    Binary mode tags all source samples 0 and target samples 1.  Multi-index
    mode gives each source environment its own index and the target the last one.
    Target website labels are dropped before training starts.
    """
    if len(source) == 0 or len(target) == 0:
        raise EmptyInputError("source and target sets must be non-empty")
    if cfg.domain_mode == "binary":
        src_dom = np.zeros(len(source), dtype=np.int64)
        count = 2
    else:
        envs = sorted(set(source.env_ids.tolist()))
        lut = {e: i for i, e in enumerate(envs)}
        src_dom = np.array([lut[e] for e in source.env_ids.tolist()], dtype=np.int64)
        count = len(envs) + 1
    tgt = DomainBatch.unlabeled(target, count - 1)
    return _adversarial_fit(model, source, src_dom, source_val, tgt, count, cfg)


def multi_domain_train(model: TrainedModel, domains: list[SampleSet], val: SampleSet, cfg: DAConfig,
                       target: SampleSet | None = None):
    """Domain classifier over dataset indices; website loss uses every labelled dataset.

    An optional unlabelled ``target`` joins as one more domain index.
    """
    count = len(domains) + (1 if target is not None else 0)
    if count < 2:
        raise ConfigError("multi-domain training needs at least two domains")
    if any(len(d) == 0 for d in domains):
        raise EmptyInputError("every domain dataset must be non-empty")
    source = SampleSet.concat(domains)
    src_dom = np.concatenate([np.full(len(d), i, dtype=np.int64) for i, d in enumerate(domains)])
    tgt = DomainBatch.unlabeled(target, len(domains)) if target is not None else None
    return _adversarial_fit(model, source, src_dom, val, tgt, count, cfg)


def domain_accuracy(model: TrainedModel, batch: DomainBatch) -> float:
    """Accuracy of the domain head on ``batch`` (inference mode throughout)."""
    if len(batch) == 0:
        raise EmptyInputError("empty batch")
    if model.net.domain is None:
        raise ConfigError("model has no domain head")
    x = model.prepare(batch.as_samples())
    preds = []
    for i in range(0, len(x), 256):
        feats = model.net.features.forward(x[i : i + 256], train=False)
        preds.append(model.net.domain.forward(feats, train=False).argmax(axis=1))
    return float(np.mean(np.concatenate(preds) == batch.domain_ids))
