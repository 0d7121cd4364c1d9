"""WFNet: residual 1-D CNN presets, supervised training, prediction, finetuning and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, EmptyInputError, FingerprintMismatchError, NumericError
from .nn import checkpoint as ckpt
from .nn import functional as F
from .nn.layers import BatchNorm, Conv1D, GradientReversal, LayerSpec, Linear, Module, Param, Sequential, build_stack
from .nn.optim import make_optimizer
from .seeding import rng
from .traffic import ChannelMask, NormStats, SampleSet, apply_channel_mask, apply_norm, fit_norm_stats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockConfig:
    n_convs: int
    channels: int
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class ArchitectureConfig:
    """Stem conv (+BN, ReLU, optional max-pool), residual blocks, global average pool, FC head.

    ``head`` lists hidden FC widths; the class layer is appended, so
    ``head=(512, 256)`` means three FC layers.  ``domain_count > 0`` adds a
    gradient-reversed domain classifier fed from the output of the first
    ``split_block`` residual blocks (default: all of them).
    """

    preset: str = "custom"
    class_count: int = 10
    in_channels: int = 2
    input_length: int = 500
    stem_channels: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: int = 2
    blocks: tuple = ()
    head: tuple = (64, 32)
    domain_count: int = 0
    domain_hidden: int = 256
    split_block: int | None = None
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks))
        object.__setattr__(self, "head", tuple(self.head))
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.domain_count == 1 or self.domain_count < 0:
            raise ConfigError("domain_count must be 0 (no domain head) or >= 2")
        if self.split_block is not None and not 0 <= self.split_block <= len(self.blocks):
            raise ConfigError(f"split_block must lie in [0, {len(self.blocks)}]")

    @property
    def split(self) -> int:
        return len(self.blocks) if self.split_block is None else self.split_block

    @property
    def conv_layers(self) -> int:
        """Main-path convolutions inside residual blocks (stem and skip projections excluded)."""
        return sum(b.n_convs for b in self.blocks)

    @property
    def fc_layers(self) -> int:
        return len(self.head) + 1

    def with_(self, **changes) -> ArchitectureConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["head"] = list(self.head)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def _blocks(n_convs, channels, kernel=3):
    return tuple(BlockConfig(n, c, kernel, 2) for n, c in zip(n_convs, channels))


PRESETS = {
    "tiny": dict(
        stem_channels=16, stem_kernel=7, stem_stride=2, stem_pool=2,
        blocks=(BlockConfig(2, 16, 3, 1), BlockConfig(2, 32, 3, 2)),
        head=(64, 32),
    ),
    "base": dict(
        stem_channels=64, stem_kernel=7, stem_stride=2, stem_pool=2,
        blocks=_blocks((3, 3, 3, 4, 4), (64, 128, 256, 512, 704)),
        head=(512, 256),
    ),
    "large": dict(
        stem_channels=64, stem_kernel=7, stem_stride=2, stem_pool=2,
        blocks=_blocks((4, 4, 5, 5, 5), (64, 128, 256, 640, 1024)),
        head=(1024, 256),
    ),
}


def preset(name: str, class_count: int = 10, **overrides) -> ArchitectureConfig:
    name = name.lower()
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ArchitectureConfig(preset=name, class_count=class_count, **{**PRESETS[name], **overrides})


# -- network ----------------------------------------------------------------------------

def _conv_bn(prefix, cin, cout, k, stride, arch, relu=True):
    specs = [
        LayerSpec("conv1d", f"{prefix}.conv", dict(in_ch=cin, out_ch=cout, kernel=k, stride=stride, padding=k // 2)),
        LayerSpec("batchnorm", f"{prefix}.bn", dict(channels=cout, momentum=arch.bn_momentum, epsilon=arch.bn_epsilon)),
    ]
    if relu:
        specs.append(LayerSpec("relu", f"{prefix}.relu"))
    return specs


def layer_specs(arch: ArchitectureConfig) -> dict[str, list[LayerSpec]]:
    """Spec lists for the four sub-stacks: features, trunk, head, domain."""
    stem = _conv_bn("stem", arch.in_channels, arch.stem_channels, arch.stem_kernel, arch.stem_stride, arch)
    if arch.stem_pool > 1:
        stem.append(LayerSpec("maxpool1d", "stem.pool", dict(width=arch.stem_pool)))
    blocks = []
    cin = arch.stem_channels
    for i, b in enumerate(arch.blocks, start=1):
        main = []
        for j in range(b.n_convs):
            main += _conv_bn(
                f"block{i}.{j}", cin if j == 0 else b.channels, b.channels, b.kernel,
                b.stride if j == 0 else 1, arch, relu=j < b.n_convs - 1,
            )
        proj = None
        if b.stride != 1 or cin != b.channels:
            proj = _conv_bn(f"block{i}.proj", cin, b.channels, 1, b.stride, arch, relu=False)
        blocks.append([LayerSpec("residual_start", f"block{i}", {"projection": proj}), *main, LayerSpec("residual_end")])
        cin = b.channels
    split = arch.split
    features = stem + [s for blk in blocks[:split] for s in blk]
    trunk = [s for blk in blocks[split:] for s in blk] + [LayerSpec("gap", "gap")]
    head = []
    width = arch.blocks[-1].channels if arch.blocks else arch.stem_channels
    for j, h in enumerate(arch.head):
        head += [LayerSpec("fc", f"head.fc{j}", dict(n_in=width, n_out=h)), LayerSpec("relu", f"head.relu{j}")]
        width = h
    head.append(LayerSpec("fc", f"head.fc{len(arch.head)}", dict(n_in=width, n_out=arch.class_count)))
    head.append(LayerSpec("softmax_ce", "loss"))
    domain = []
    if arch.domain_count:
        enc = arch.blocks[split - 1].channels if split else arch.stem_channels
        domain = [
            LayerSpec("grl", "domain.grl", dict(lam=1.0)),
            LayerSpec("gap", "domain.gap"),
            LayerSpec("fc", "domain.fc0", dict(n_in=enc, n_out=arch.domain_hidden)),
            LayerSpec("relu", "domain.relu0"),
            LayerSpec("fc", "domain.fc1", dict(n_in=arch.domain_hidden, n_out=arch.domain_count)),
            LayerSpec("softmax_ce", "domain.loss"),
        ]
    return {"features": features, "trunk": trunk, "head": head, "domain": domain}


class WFNet(Module):
    """Website path ``head(trunk(features(x)))`` plus an optional domain path ``domain(features(x))``."""

    def __init__(self, arch: ArchitectureConfig, dtype=np.float32):
        self.name = "wfnet"
        self.arch = arch
        self.dtype = np.dtype(dtype)
        specs = layer_specs(arch)
        shape = (arch.in_channels, arch.input_length)
        self.features, fshape = build_stack("features", specs["features"], shape, dtype)
        self.trunk, tshape = build_stack("trunk", specs["trunk"], fshape, dtype)
        self.head, _ = build_stack("head", specs["head"], tshape, dtype)
        self.domain = build_stack("domain", specs["domain"], fshape, dtype)[0] if arch.domain_count else None

    def children(self):
        return [self.features, self.trunk, self.head] + ([self.domain] if self.domain else [])

    def forward(self, x, train=False):
        return self.head.forward(self.trunk.forward(self.features.forward(x, train), train), train)

    def backward(self, grad):
        return self.features.backward(self.trunk.backward(self.head.backward(grad)))

    @property
    def grl(self) -> GradientReversal | None:
        return self.domain.layers[0] if self.domain else None

    def extractor_params(self) -> list[Param]:
        return self.features.all_params() + self.trunk.all_params()

    def website_params(self) -> list[Param]:
        return self.extractor_params() + self.head.all_params()

    def domain_params(self) -> list[Param]:
        return self.domain.all_params() if self.domain else []

    def batchnorms(self) -> list[BatchNorm]:
        return [m for m in self.modules() if isinstance(m, BatchNorm)]

    def state(self) -> dict[str, np.ndarray | None]:
        return {p.name: None if p.value is None else p.value.copy() for p in self.all_params()}

    def load_state(self, state: dict):
        for p in self.all_params():
            v = state[p.name]
            p.value = None if v is None else v.copy()

    def astype(self, dtype) -> WFNet:
        self.dtype = np.dtype(dtype)
        for p in self.all_params():
            if p.value is not None:
                p.value = p.value.astype(dtype)
            p.grad = None
        return self

    def param_count(self) -> int:
        return sum(p.value.size for p in self.all_params() if p.trainable)


def _he_uniform(modules, g: np.random.Generator):
    for m in modules:
        if isinstance(m, (Conv1D, Linear)):
            w = m.weight.value
            fan_in = int(np.prod(w.shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            m.weight.value = g.uniform(-bound, bound, size=w.shape).astype(w.dtype)
            m.bias.value = np.zeros_like(m.bias.value)


# -- trained model container ------------------------------------------------------------

@dataclass
class TrainedModel:
    arch: ArchitectureConfig
    net: WFNet
    norm: NormStats | None = None
    labels: list = field(default_factory=list)  # class index -> site label
    mask: ChannelMask = ChannelMask.BOTH
    manifest: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> int:
        return ckpt.fingerprint(self.arch.to_dict())

    def param_count(self) -> int:
        return self.net.param_count()

    def clone(self) -> TrainedModel:
        return copy.deepcopy(self)

    def prepare(self, samples: SampleSet) -> np.ndarray:
        """Mask, normalize and reshape samples into ``(n, 2, window)`` network input."""
        if self.norm is None:
            raise DataError("model has no normalization statistics; train it first")
        if samples.window != self.arch.input_length:
            raise DataError(f"model expects windows of {self.arch.input_length} packets, got {samples.window}")
        s = apply_norm(apply_channel_mask(samples, self.mask), self.norm)
        return np.ascontiguousarray(s.channels(), dtype=self.net.dtype)

    def class_indices(self, site_labels) -> np.ndarray:
        lut = {lab: i for i, lab in enumerate(self.labels)}
        try:
            return np.array([lut[int(s)] for s in site_labels], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"site label {exc} is outside the model's label table") from None


def build_model(cfg: ArchitectureConfig, seed: int = 0, dtype=np.float32, labels=None) -> TrainedModel:
    """Fresh model with He-uniform conv/FC weights, zero biases, gamma=1, beta=0."""
    net = WFNet(cfg, dtype)
    _he_uniform([m for c in (net.features, net.trunk, net.head) for m in c.modules()], rng(seed, 0x1417))
    if net.domain:
        _he_uniform(list(net.domain.modules()), rng(seed, 0xD0))
    labels = list(range(cfg.class_count)) if labels is None else [int(x) for x in labels]
    if len(labels) != cfg.class_count:
        raise ConfigError("label table length must equal class_count")
    return TrainedModel(cfg, net, None, labels, ChannelMask.BOTH, {"init_seed": seed})


def attach_domain_head(model: TrainedModel, domain_count: int, seed: int = 0, split_block=None) -> TrainedModel:
    """Copy of ``model`` whose architecture carries a freshly initialized domain classifier."""
    split = model.arch.split_block if split_block is None else split_block
    arch = model.arch.with_(domain_count=domain_count, split_block=split)
    if arch.split != model.arch.split:
        raise ConfigError("changing split_block of an existing model would reshuffle its layers")
    out = model.clone()
    out.arch = arch
    fresh = WFNet(arch, model.net.dtype)
    _he_uniform(list(fresh.domain.modules()), rng(seed, 0xD0))
    out.net.arch = arch
    out.net.domain = fresh.domain
    return out


# -- training ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    patience: int | None = None
    mask: str = "both"
    refit_norm: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (train-mode batch norm)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        ChannelMask(self.mask)

    def optimizer_kwargs(self) -> dict:
        if self.optimizer == "adam":
            return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)
        if self.optimizer == "sgd":
            return dict(lr=self.lr, momentum=self.momentum)
        raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def data_fingerprint(samples: SampleSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(samples.values, dtype=np.float32).tobytes())
    h.update(samples.site_labels.astype("<i8").tobytes())
    return h.hexdigest()[:16]


def _check_labels(model: TrainedModel, *sets: SampleSet):
    for s in sets:
        if len(s) and not set(np.unique(s.site_labels).tolist()) <= set(model.labels):
            raise DataError(f"labels {sorted(set(s.site_labels.tolist()) - set(model.labels))} exceed the model's {model.arch.class_count} classes")


def _batches(n: int, batch_size: int, g: np.random.Generator):
    perm = g.permutation(n)
    for i in range(0, n, batch_size):
        idx = perm[i : i + batch_size]
        if idx.size >= 2:
            yield idx


def evaluate_accuracy(model: TrainedModel, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(y) == 0:
        return float("nan")
    pred = _predict_arrays(model, x, batch_size)[0]
    return float(np.mean(pred == y))


def _predict_arrays(model: TrainedModel, x: np.ndarray, batch_size: int = 256):
    probs = []
    for i in range(0, len(x), batch_size):
        probs.append(F.softmax(model.net.forward(x[i : i + batch_size], train=False).astype(np.float64)))
    p = np.concatenate(probs) if probs else np.zeros((0, model.arch.class_count))
    return p.argmax(axis=1), p


class StepHook:
    """Extension point for the training loop (used by domain-adversarial training).

    ``source_features`` receives the features of the labelled batch and may
    return an extra gradient for them; ``after_backward`` runs once the
    labelled batch has been backpropagated and before the optimizer step.
    """

    def extra_params(self) -> list[Param]:
        return []

    def begin_epoch(self, epoch: int, n_steps: int):
        pass

    def source_features(self, feats, batch_idx, step: int):
        return None

    def after_backward(self, step: int):
        pass

    def end_epoch(self, epoch: int) -> dict:
        return {}


def fit(
    model: TrainedModel,
    train_set: SampleSet,
    val_set: SampleSet,
    cfg: TrainConfig,
    frozen: set[str] = frozenset(),
    hook: StepHook | None = None,
) -> tuple[TrainedModel, list[dict]]:
    """Mini-batch training with best-validation checkpointing; mutates and returns ``model``.

    Samples are masked with ``cfg.mask``; normalization statistics are fitted on
    the masked training set unless the model already has some (and
    ``cfg.refit_norm`` is false).
    """
    if len(train_set) == 0:
        raise EmptyInputError("training set is empty")
    _check_labels(model, train_set, val_set)
    model.mask = ChannelMask(cfg.mask)
    if model.norm is None or cfg.refit_norm:
        model.norm = fit_norm_stats(apply_channel_mask(train_set, model.mask))
    model.manifest.update({"train": cfg.to_dict(), "data": data_fingerprint(train_set)})
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history

    net = model.net
    x = model.prepare(train_set)
    y = model.class_indices(train_set.site_labels)
    vx = model.prepare(val_set) if len(val_set) else None
    vy = model.class_indices(val_set.site_labels) if len(val_set) else None

    for bn in net.batchnorms():
        bn.frozen = any(p.name in frozen for p in bn.params())
    params = [p for p in net.website_params() if p.trainable and p.name not in frozen]
    if hook is not None:
        params += hook.extra_params()
    opt = make_optimizer(params, cfg.optimizer, **cfg.optimizer_kwargs())
    g = rng(cfg.seed, 0x7A1)

    best_acc, best_state, best_epoch, stale = -1.0, net.state(), 0, 0
    step = 0
    n_steps = sum(1 for i in range(0, len(x), cfg.batch_size) if min(cfg.batch_size, len(x) - i) >= 2)
    try:
        for epoch in range(1, cfg.epochs + 1):
            if hook:
                hook.begin_epoch(epoch, n_steps)
            loss_sum, correct, seen = 0.0, 0, 0
            for idx in _batches(len(x), cfg.batch_size, g):
                opt.zero_grad()
                feats = net.features.forward(x[idx], train=True)
                logits = net.head.forward(net.trunk.forward(feats, train=True), train=True)
                loss, glogits = F.softmax_cross_entropy(logits, y[idx])
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                gfeat = net.trunk.backward(net.head.backward(glogits.astype(net.dtype)))
                if hook:
                    extra = hook.source_features(feats, idx, step)
                    if extra is not None:
                        gfeat = gfeat + extra
                net.features.backward(gfeat)
                if hook:
                    hook.after_backward(step)
                opt.step()
                step += 1
                loss_sum += loss * idx.size
                correct += int(np.sum(logits.argmax(axis=1) == y[idx]))
                seen += idx.size
            rec = {
                "epoch": epoch,
                "train_loss": loss_sum / max(seen, 1),
                "train_acc": correct / max(seen, 1),
                "val_acc": evaluate_accuracy(model, vx, vy) if vx is not None else float("nan"),
            }
            if hook:
                rec.update(hook.end_epoch(epoch))
            history.append(rec)
            log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, rec["train_loss"], rec["train_acc"], rec["val_acc"])
            score = rec["val_acc"] if vx is not None else rec["train_acc"]
            if score > best_acc:
                best_acc, best_state, best_epoch, stale = score, net.state(), epoch, 0
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    break
    finally:
        for bn in net.batchnorms():
            bn.frozen = False
    net.load_state(best_state)
    model.manifest.update({"best_epoch": best_epoch, "epochs_run": len(history)})
    return model, history


def train(model: TrainedModel, train_set: SampleSet, val_set: SampleSet, cfg: TrainConfig):
    """Supervised training on a copy of ``model``; returns ``(model, history)``."""
    return fit(model.clone(), train_set, val_set, cfg)


def predict(model: TrainedModel, samples: SampleSet, batch_size: int = 256):
    """``(site_labels, probabilities)``; ties go to the lower class index."""
    if len(samples) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, model.arch.class_count))
    idx, probs = _predict_arrays(model, model.prepare(samples), batch_size)
    return np.asarray(model.labels, dtype=np.int64)[idx], probs


# -- finetuning -------------------------------------------------------------------------

def freeze_mask(model: TrainedModel, spec: str | list | set) -> set[str]:
    """Resolve ``conv`` (extractor incl. BN), ``head``, ``all``, ``none`` or explicit names."""
    names = {p.name for p in model.net.all_params()}
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    out: set[str] = set()
    for s in spec:
        if s == "conv":
            out |= {p.name for p in model.net.extractor_params()}
        elif s == "head":
            out |= {p.name for p in model.net.head.all_params()}
        elif s == "all":
            out |= names
        elif s == "none":
            continue
        elif s in names:
            out.add(s)
        else:
            raise ConfigError(f"freeze mask names unknown parameter {s!r}")
    return out


def finetune(
    model: TrainedModel,
    train_set: SampleSet,
    val_set: SampleSet,
    mask: set[str],
    cfg: TrainConfig,
    new_head: bool = False,
    seed: int = 0,
) -> tuple[TrainedModel, list[dict]]:
    """Continue training with every parameter in ``mask`` (and its BN statistics) frozen.

    ``new_head`` swaps in a freshly initialized website head sized for the
    label set of ``train_set``.
    """
    names = {p.name for p in model.net.all_params()}
    unknown = set(mask) - names
    if unknown:
        raise ConfigError(f"freeze mask names unknown parameters: {sorted(unknown)[:5]}")
    out = model.clone()
    if new_head:
        labels = sorted(set(train_set.site_labels.tolist()) | set(val_set.site_labels.tolist()))
        arch = out.arch.with_(class_count=len(labels))
        fresh = WFNet(arch, out.net.dtype)
        _he_uniform(list(fresh.head.modules()), rng(seed, 0x4EAD))
        out.arch, out.net.arch, out.net.head, out.labels = arch, arch, fresh.head, labels
    cfg = replace(cfg, mask=out.mask.value)
    return fit(out, train_set, val_set, cfg, frozen=set(mask))


# -- checkpoints ------------------------------------------------------------------------

def save_model(model: TrainedModel, path, optimizer=None) -> None:
    meta = {
        "arch": model.arch.to_dict(),
        "norm": None if model.norm is None else model.norm.to_dict(),
        "labels": list(model.labels),
        "mask": model.mask.value,
        "manifest": model.manifest,
    }
    blobs = {p.name: p.value for p in model.net.all_params() if p.value is not None}
    opt = None
    if optimizer is not None:
        opt = {
            "meta": {"kind": optimizer.kind, "hyper": optimizer.hyper(), "step": optimizer.step_count},
            "blobs": optimizer.buffers(),
        }
    ckpt.write_checkpoint(path, model.fingerprint, meta, blobs, opt)


def load_model(path, expected_arch: ArchitectureConfig | None = None) -> TrainedModel:
    fp, meta, blobs, _ = ckpt.read_checkpoint(path)
    arch = ArchitectureConfig.from_dict(meta["arch"])
    if ckpt.fingerprint(arch.to_dict()) != fp:
        raise FingerprintMismatchError(f"{path}: stored fingerprint does not match its architecture block")
    if expected_arch is not None and ckpt.fingerprint(expected_arch.to_dict()) != fp:
        raise FingerprintMismatchError(f"{path}: checkpoint architecture differs from the requested one")
    net = WFNet(arch, np.float32)
    for p in net.all_params():
        if p.name not in blobs:
            if p.trainable:
                raise FingerprintMismatchError(f"{path}: missing parameter {p.name}")
            continue
        v = blobs.pop(p.name)
        if p.value is not None and v.shape != p.value.shape:
            raise FingerprintMismatchError(f"{path}: {p.name} has shape {v.shape}, expected {p.value.shape}")
        p.value = v
    if blobs:
        raise FingerprintMismatchError(f"{path}: unexpected parameters {sorted(blobs)[:5]}")
    norm = None if meta["norm"] is None else NormStats.from_dict(meta["norm"])
    return TrainedModel(arch, net, norm, meta["labels"], ChannelMask(meta["mask"]), meta["manifest"])
