"""Metrics and the experiment grid: cross-domain matrices, learning curves,
website-count scaling, channel ablations and defense sweeps.

Every grid cell retrains from scratch with seeds derived from the experiment
config, and every run returns a manifest (seeds, config hash, data
fingerprints) that is enough to repeat it bit for bit in single-worker mode.
Splits are made at trace level so windows of one trace never land on both
sides of a train/test boundary.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import DAConfig, da_train
from .defenses import InflationConfig, InjectionConfig, aggregate_overhead, defend_dataset, with_epoch
from .errors import ConfigError, DataError, EmptyInputError
from .model import (
    TrainConfig,
    TrainedModel,
    build_model,
    data_fingerprint,
    finetune,
    freeze_mask,
    predict,
    preset,
    train,
)
from .seeding import derive_seed, rng, text_key
from .traffic import WINDOW, SampleSet, Trace, windows_from_traces


# -- metrics ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EvalReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray  # rows: truth, columns: prediction
    labels: tuple = ()

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
            "labels": list(self.labels),
        }

    def table(self) -> str:
        lines = [f"accuracy {self.accuracy:.4f}", f"{'class':>6} {'prec':>6} {'recall':>6} {'f1':>6} {'n':>6}"]
        for i, lab in enumerate(self.labels):
            lines.append(f"{lab:>6} {self.precision[i]:6.3f} {self.recall[i]:6.3f} {self.f1[i]:6.3f} {self.support[i]:6d}")
        return "\n".join(lines)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def compute_metrics(predictions, truth, class_count: int, labels=None) -> EvalReport:
    """Accuracy, per-class precision/recall/F1 and the confusion matrix.

    ``predictions`` and ``truth`` are class indices in ``[0, class_count)``.
    Precision of a class that is never predicted is 0 (and likewise for the
    other ratios with a zero denominator).
    """
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise DataError(f"{pred.size} predictions for {true.size} labels")
    if class_count < 1:
        raise ConfigError("class_count must be >= 1")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise DataError(f"{name} outside [0, {class_count})")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    acc = float(tp.sum() / true.size) if true.size else 0.0
    labels = tuple(range(class_count)) if labels is None else tuple(int(x) for x in labels)
    return EvalReport(acc, precision, recall, f1, cm, labels)


def evaluate(model: TrainedModel, samples: SampleSet) -> EvalReport:
    """Score ``model`` on ``samples``; labels unknown to the model raise DataError."""
    if len(samples) == 0:
        raise EmptyInputError("nothing to evaluate")
    pred, _ = predict(model, samples)
    lut = {lab: i for i, lab in enumerate(model.labels)}
    try:
        truth = [lut[int(s)] for s in samples.site_labels]
    except KeyError as exc:
        raise DataError(f"site label {exc.args[0]} unknown to the model") from None
    return compute_metrics([lut[int(p)] for p in pred], truth, len(model.labels), model.labels)


# -- result containers ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CrossDomainMatrix:
    env_ids: tuple
    accuracy: np.ndarray  # row: train env, column: test env

    def margins(self) -> np.ndarray:
        """Per row: diagonal minus the best off-diagonal entry (inf for a 1x1 grid)."""
        out = []
        for i in range(len(self.env_ids)):
            off = np.delete(self.accuracy[i], i)
            out.append(self.accuracy[i, i] - off.max() if off.size else math.inf)
        return np.array(out)

    def to_dict(self) -> dict:
        return {"env_ids": list(self.env_ids), "accuracy": self.accuracy.tolist()}

    def table(self) -> str:
        head = "train\\test " + " ".join(f"{e:>7}" for e in self.env_ids)
        rows = [f"{e:>10} " + " ".join(f"{a:7.3f}" for a in row) for e, row in zip(self.env_ids, self.accuracy)]
        return "\n".join([head, *rows])


@dataclass(frozen=True)
class LearningCurve:
    mode: str
    points: tuple  # ((samples_per_class, accuracy), ...)

    def __post_init__(self):
        sizes = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise DataError("learning-curve sample counts must be strictly increasing")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "points": [list(p) for p in self.points]}


# -- experiment configuration and splits ------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "tiny"
    arch_overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: tuple = (0.5, 0.25, 0.25)
    seed: int = 0
    window: int = WINDOW
    stride: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        d["train"] = self.train.to_dict()
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TraceSplit:
    train: tuple
    validation: tuple
    test: tuple


def _segment(trace: Trace, lo: int, hi: int) -> Trace:
    return Trace(trace.timestamps[lo:hi], trace.sizes[lo:hi], trace.site_label, trace.env_id, trace.epoch_tag)


def split_traces(traces, ratios=(0.5, 0.25, 0.25), seed: int = 0) -> TraceSplit:
    """Split per (site, env) group.

    Groups with at least three traces are split by whole traces (shuffled with a
    per-group seed; validation and test get at least one trace each).  Smaller
    groups have every trace cut into contiguous train/validation/test segments.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError("split ratios must be three non-negative numbers summing to 1")
    groups: dict[tuple, list[Trace]] = {}
    for t in traces:
        groups.setdefault((t.site_label, t.env_id), []).append(t)
    out = ([], [], [])
    for (site, env), ts in sorted(groups.items()):
        n = len(ts)
        if n >= 3:
            perm = rng(seed, 0x5B1, site, env).permutation(n)
            n_val = max(1, int(math.floor(ratios[1] * n + 1e-9)))
            n_test = max(1, int(math.floor(ratios[2] * n + 1e-9)))
            n_train = n - n_val - n_test
            if n_train < 1:
                raise DataError(f"site {site} env {env}: too few traces for a trace-level split")
            for part, idx in zip(out, (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])):
                part.extend(ts[i] for i in sorted(idx))
        else:
            for t in ts:
                a = int(round(ratios[0] * len(t)))
                b = a + int(round(ratios[1] * len(t)))
                for part, (lo, hi) in zip(out, ((0, a), (a, b), (b, len(t)))):
                    if hi > lo:
                        part.append(_segment(t, lo, hi))
    return TraceSplit(tuple(out[0]), tuple(out[1]), tuple(out[2]))


@dataclass(frozen=True, eq=False)
class WindowSplit:
    train: SampleSet
    validation: SampleSet
    test: SampleSet


def window_split(split: TraceSplit, exp: ExperimentConfig) -> WindowSplit:
    w = lambda ts: windows_from_traces(ts, exp.window, exp.stride)  # noqa: E731
    return WindowSplit(w(split.train), w(split.validation), w(split.test))


def _cell_seed(exp: ExperimentConfig, *keys) -> int:
    # the top bits are cleared so derived seeds stay friendly to JSON and YAML
    ints = [text_key(k) if isinstance(k, str) else int(k) for k in keys]
    return derive_seed(exp.seed, *ints) & 0x7FFFFFFF


def fresh_model(exp: ExperimentConfig, labels, seed: int) -> TrainedModel:
    labels = sorted(int(x) for x in labels)
    arch = preset(exp.preset, len(labels), **exp.arch_overrides)
    return build_model(arch, seed=seed, labels=labels)


def train_cell(exp: ExperimentConfig, data: WindowSplit, cell_key: tuple, mask: str | None = None):
    """Train a fresh model on ``data.train`` and score it on ``data.test``."""
    seed = _cell_seed(exp, *cell_key)
    cfg = replace(exp.train, seed=seed, mask=mask or exp.train.mask)
    model = fresh_model(exp, np.unique(data.train.site_labels), seed)
    model, history = train(model, data.train, data.validation, cfg)
    report = evaluate(model, data.test)
    manifest = {
        "config_hash": exp.hash(),
        "cell": list(cell_key),
        "seed": seed,
        "train_data": data_fingerprint(data.train),
        "test_data": data_fingerprint(data.test),
    }
    return model, history, report, manifest


def _map(fn, items, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- grid procedures --------------------------------------------------------------------

def _by_env(split: TraceSplit, env: int) -> TraceSplit:
    keep = lambda ts: tuple(t for t in ts if t.env_id == env)  # noqa: E731
    return TraceSplit(keep(split.train), keep(split.validation), keep(split.test))


def _cross_row(args):
    exp, split, env, envs = args
    data = window_split(_by_env(split, env), exp)
    model, _, _, manifest = train_cell(exp, data, ("cross", env))
    row = [evaluate(model, window_split(_by_env(split, e), exp).test).accuracy for e in envs]
    return row, manifest


def cross_domain_run(traces, exp: ExperimentConfig, jobs: int = 1):
    """Train on each env's train split, test on every env's test split.

    Returns ``(CrossDomainMatrix, manifests)``.
    """
    split = split_traces(traces, exp.split, exp.seed)
    envs = sorted({t.env_id for t in traces})
    if not envs:
        raise EmptyInputError("empty corpus")
    results = _map(_cross_row, [(exp, split, e, envs) for e in envs], jobs)
    matrix = CrossDomainMatrix(tuple(envs), np.array([r[0] for r in results]))
    return matrix, [r[1] for r in results]


def stratified_subset(samples: SampleSet, per_class: int, seed: int) -> SampleSet:
    """``per_class`` samples of every site, drawn without replacement."""
    idx = []
    for c in np.unique(samples.site_labels):
        members = np.flatnonzero(samples.site_labels == c)
        if per_class > members.size:
            raise DataError(f"site {c}: {per_class} samples requested, {members.size} available")
        idx.append(np.sort(rng(seed, 0x5AB, int(c)).choice(members, size=per_class, replace=False)))
    return samples.subset(np.sort(np.concatenate(idx)))


def pretrain_other_envs(traces, exp: ExperimentConfig, target_env: int):
    """Model trained on every env except ``target_env`` (train/val splits pooled)."""
    split = split_traces(traces, exp.split, exp.seed)
    keep = lambda ts: tuple(t for t in ts if t.env_id != target_env)  # noqa: E731
    data = window_split(TraceSplit(keep(split.train), keep(split.validation), ()), exp)
    if len(data.train) == 0:
        raise DataError("no source environments to pretrain on")
    seed = _cell_seed(exp, 0x9E7, target_env)
    model = fresh_model(exp, np.unique(data.train.site_labels), seed)
    model, _ = train(model, data.train, data.validation, replace(exp.train, seed=seed))
    return model


def learning_curve_run(
    traces,
    exp: ExperimentConfig,
    target_env: int,
    sizes=(1000, 2000, 5000, 10000, 20000),
    mode: str = "scratch",
    freeze: str = "conv",
    finetune_cfg: TrainConfig | None = None,
    pretrained: TrainedModel | None = None,
):
    """Accuracy on ``target_env`` as the per-class training budget grows.

    ``pretrain-finetune`` first trains on all other envs (or uses
    ``pretrained``), then finetunes with ``freeze`` frozen and normalization
    refitted on the target subset.  Returns ``(LearningCurve, manifests)``.
    """
    if mode not in ("scratch", "pretrain-finetune"):
        raise ConfigError(f"unknown learning-curve mode {mode!r}")
    sizes = sorted(int(s) for s in sizes)
    split = split_traces(traces, exp.split, exp.seed)
    target = window_split(_by_env(split, target_env), exp)
    if len(target.train) == 0:
        raise DataError(f"env {target_env} has no training data")
    avail = np.bincount(target.train.site_labels).max(initial=0)
    least = min(int(np.sum(target.train.site_labels == c)) for c in np.unique(target.train.site_labels))
    if sizes and sizes[-1] > least:
        raise DataError(f"{sizes[-1]} samples per class requested, only {least} available (max {avail})")
    base = None
    if mode == "pretrain-finetune":
        base = pretrained if pretrained is not None else pretrain_other_envs(traces, exp, target_env)
    ft_cfg = finetune_cfg or exp.train
    points, manifests = [], []
    for n in sizes:
        seed = _cell_seed(exp, 0x1C, target_env, n)
        sub = stratified_subset(target.train, n, seed)
        if mode == "scratch":
            model = fresh_model(exp, np.unique(sub.site_labels), seed)
            model, _ = train(model, sub, target.validation, replace(exp.train, seed=seed))
        else:
            model, _ = finetune(base, sub, target.validation, freeze_mask(base, freeze),
                                replace(ft_cfg, seed=seed, refit_norm=True), seed=seed)
        acc = evaluate(model, target.test).accuracy
        points.append((n, acc))
        manifests.append({"config_hash": exp.hash(), "mode": mode, "size": n, "seed": seed,
                          "train_data": data_fingerprint(sub)})
    return LearningCurve(mode, tuple(points)), manifests


def website_scaling_run(traces, exp: ExperimentConfig, counts=(5, 10, 20, 40)):
    """``[(count, accuracy)]`` using the first ``count`` site labels of the corpus."""
    sites = sorted({t.site_label for t in traces})
    out = []
    for n in counts:
        if n < 1 or n > len(sites):
            raise ConfigError(f"cannot take {n} sites from a corpus of {len(sites)}")
        keep = set(sites[:n])
        data = window_split(split_traces([t for t in traces if t.site_label in keep], exp.split, exp.seed), exp)
        _, _, report, _ = train_cell(exp, data, ("sites", n))
        out.append((n, report.accuracy))
    return out


def ablation_run(traces, exp: ExperimentConfig, masks=("both", "jitter-only", "size-only"), data: WindowSplit | None = None):
    """``{mask: EvalReport}``; the mask is applied before normalization is fitted."""
    data = data or window_split(split_traces(traces, exp.split, exp.seed), exp)
    return {m: train_cell(exp, data, ("ablation",), mask=m)[2] for m in masks}


@dataclass(frozen=True)
class DefensePoint:
    label: str
    overhead: dict
    accuracy: float


def defense_label(cfg) -> str:
    if cfg is None:
        return "none"
    if isinstance(cfg, InflationConfig):
        return f"inflation a={cfg.a:g} {cfg.basis} {cfg.targets}"
    if isinstance(cfg, InjectionConfig):
        return f"injection k={cfg.k} {cfg.rotation}"
    raise ConfigError(f"not a defense config: {cfg!r}")


def defense_curve_run(traces, exp: ExperimentConfig, settings, days=("0", "1")):
    """Defend train and test traffic, retrain, evaluate; one point per setting.

    ``None`` in ``settings`` is the undefended baseline.  ``days`` stamps the
    training/validation traces and the test traces with collection-day tags
    (which drive daily trigger rotation); pass ``None`` to keep existing tags.
    """
    split = split_traces(traces, exp.split, exp.seed)
    if days is not None:
        split = TraceSplit(tuple(with_epoch(split.train, days[0])), tuple(with_epoch(split.validation, days[0])),
                           tuple(with_epoch(split.test, days[1])))
    points = []
    for cfg in settings:
        if cfg is None:
            tr, va, te, overhead = split.train, split.validation, split.test, aggregate_overhead([])
        else:
            tr, te, reps = defend_dataset(list(split.train), list(split.test), cfg, "train+test")
            va, _, vreps = defend_dataset(list(split.validation), [], cfg, "train+test")
            overhead = aggregate_overhead(reps + vreps)
        data = window_split(TraceSplit(tuple(tr), tuple(va), tuple(te)), exp)
        # every setting trains with the baseline seed so the points differ only in the data
        _, _, report, _ = train_cell(exp, data, ("defense",))
        points.append(DefensePoint(defense_label(cfg), overhead, report.accuracy))
    return points


def da_run(traces, exp: ExperimentConfig, da: DAConfig, source_envs, target_env: int):
    """Source-only versus domain-adversarial accuracy on the held-out ``target_env``.

    The target's training traces are used without labels; both models score
    on the target test split.  Returns ``(source_only_acc, da_acc, history)``.
    """
    split = split_traces(traces, exp.split, exp.seed)
    keep = lambda ts: tuple(t for t in ts if t.env_id in set(source_envs))  # noqa: E731
    src = window_split(TraceSplit(keep(split.train), keep(split.validation), ()), exp)
    tgt = window_split(_by_env(split, target_env), exp)
    seed = _cell_seed(exp, 0xDA, target_env)
    base = fresh_model(exp, np.unique(src.train.site_labels), seed)
    cfg = replace(exp.train, seed=seed)
    plain, _ = train(base, src.train, src.validation, cfg)
    adapted, history = da_train(base, src.train, src.validation, tgt.train, replace(da, train=cfg))
    return evaluate(plain, tgt.test).accuracy, evaluate(adapted, tgt.test).accuracy, history


# -- results files and rendering --------------------------------------------------------

def result_record(experiment: str, cell: dict, metrics: dict, cfg_hash: str) -> dict:
    return {"experiment": experiment, "cell": cell, "config_hash": cfg_hash, "metrics": metrics}


def write_results(path, records) -> None:
    """One JSON object per line, keys sorted, so equal results give equal bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def read_results(path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: {exc}") from None
    return out


def render_table(records) -> str:
    """Plain-text table: one row per record with its headline metric."""
    rows = [("experiment", "cell", "metric", "value")]
    for r in records:
        cell = ",".join(f"{k}={v}" for k, v in sorted(r.get("cell", {}).items()))
        for key in sorted(r.get("metrics", {})):
            v = r["metrics"][key]
            if isinstance(v, (int, float)):
                rows.append((str(r.get("experiment", "")), cell, key, f"{v:.4f}" if isinstance(v, float) else str(v)))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)


def gnuplot_columns(points, header=("x", "y")) -> str:
    """Whitespace-separated columns with a ``#`` header line."""
    lines = ["# " + " ".join(header)]
    lines += [" ".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in p) for p in points]
    return "\n".join(lines) + "\n"
