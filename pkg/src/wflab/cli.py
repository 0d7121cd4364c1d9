"""``wflab`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure
(non-finite loss).  Every command writes ``resolved_config.yaml`` beside its
outputs and never modifies its inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalkit
from .adapt import da_train, multi_domain_train
from .config import RunConfig
from .defenses import InflationConfig, InjectionConfig, defend_samples, make_trigger_pool
from .errors import ConfigError, DataError, NumericError
from .model import (
    build_model,
    data_fingerprint,
    finetune,
    freeze_mask,
    load_model,
    preset,
    save_model,
    train,
)
from .synth import SynthConfig, generate_corpus
from .traffic import SampleSet, extract_windows, ingest_csv, read_dataset, split_dataset, write_dataset

log = logging.getLogger("wflab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- helpers ----------------------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _ints(text: str | None):
    if text is None or text == "":
        return None
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _dataset_files(paths) -> list[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += sorted(p.glob("*.wfds"))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"{p}: no such file or directory")
    if not files:
        raise DataError(f"no .wfds files in {', '.join(map(str, paths))}")
    return files


def load_samples(paths, sites=None, envs=None) -> SampleSet:
    data = SampleSet.concat([read_dataset(f) for f in _dataset_files(paths)])
    if sites is not None or envs is not None:
        data = data.where(sites=sites, envs=envs)
    if len(data) == 0:
        raise DataError("selection contains no samples")
    return data


def _split(samples: SampleSet, cfg: RunConfig):
    return split_dataset(samples, tuple(cfg.train.split), cfg.seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=evalkit._jsonable) + "\n")


def _write_history(path: Path, history) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _final_record(model, split) -> dict:
    rec = {"final": True, "test_acc": evalkit.evaluate(model, split.test).accuracy if len(split.test) else float("nan")}
    rec["val_acc"] = evalkit.evaluate(model, split.validation).accuracy if len(split.validation) else float("nan")
    return rec


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag, section, key in (
        ("preset", "model", "preset"),
        ("epochs", "train", "epochs"),
        ("batch_size", "train", "batch_size"),
        ("lr", "train", "lr"),
        ("optimizer", "train", "optimizer"),
        ("mask", "train", "mask"),
        ("lambda_d", "da", "lambda_d"),
        ("domain_mode", "da", "domain_mode"),
        ("split_block", "da", "split_block"),
        ("n_sites", "synth", "n_sites"),
        ("n_envs", "synth", "n_envs"),
        ("packets", "synth", "packets_per_trace"),
        ("traces", "synth", "traces_per_site_env"),
        ("kind", "defense", "kind"),
        ("a", "defense", "a"),
        ("basis", "defense", "basis"),
        ("targets", "defense", "targets"),
        ("k", "defense", "k"),
        ("rotation", "defense", "rotation"),
        ("mode", "defense", "mode"),
        ("epoch_tag", "defense", "epoch_tag"),
        ("experiment", "experiment", "kind"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    ramp = getattr(args, "lambda_ramp", None)
    if ramp is not None:
        if ramp == "constant":
            cfg.da.schedule = "constant"
        else:
            parts = ramp.split(",")
            if len(parts) != 3:
                raise ConfigError("--lambda-ramp takes 'constant' or 'start,end,epochs'")
            try:
                cfg.da.schedule, cfg.da.ramp_start, cfg.da.ramp_end, cfg.da.ramp_epochs = (
                    "ramp", float(parts[0]), float(parts[1]), int(parts[2]))
            except ValueError:
                raise ConfigError(f"bad --lambda-ramp {ramp!r}") from None
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _start(args) -> tuple[RunConfig, Path]:
    cfg = _resolve(args)
    out = _out_dir(cfg.out)
    cfg.dump(out / "resolved_config.yaml")
    return cfg, out


def _new_model(cfg: RunConfig, labels):
    labels = sorted(int(x) for x in labels)
    return build_model(preset(cfg.model.preset, len(labels), **cfg.model.overrides), seed=cfg.seed, labels=labels)


# -- commands ---------------------------------------------------------------------------

def _synth(cfg: RunConfig, args):
    # an edited synth_config.yaml replaces the generated site and env profiles
    path = getattr(args, "synth_config", None)
    return SynthConfig.load(path) if path else cfg.synth_config()


def cmd_synth(args) -> int:
    cfg, out = _start(args)
    synth = _synth(cfg, args)
    traces = generate_corpus(synth, jobs=args.jobs)
    files = []
    for site in synth.sites:
        for env in synth.envs:
            group = [t for t in traces if t.site_label == site.site_label and t.env_id == env.env_id]
            windows = SampleSet.concat([extract_windows(t, cfg.synth.window, cfg.synth.stride) for t in group])
            name = f"site{site.site_label:03d}_env{env.env_id:02d}.wfds"
            write_dataset(out / name, windows)
            files.append({"file": name, "windows": len(windows)})
    synth.save(out / "synth_config.yaml")
    _write_json(out / "manifest.json", {"seed": cfg.seed, "files": files})
    print(f"wrote {len(files)} dataset files to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg, out = _start(args)
    trace = ingest_csv(args.csv, args.site, args.env, args.epoch_tag or "")
    windows = extract_windows(trace, cfg.synth.window, cfg.synth.stride)
    name = args.name or f"site{args.site:03d}_env{args.env:02d}.wfds"
    write_dataset(out / name, windows)
    print(f"{args.csv}: {len(trace)} packets -> {len(windows)} windows in {out / name}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _start(args)
    data = load_samples(args.data, _ints(args.sites), _ints(args.envs))
    split = _split(data, cfg)
    model = _new_model(cfg, np.unique(data.site_labels))
    model, history = train(model, split.train, split.validation, cfg.train_config())
    model.manifest["split"] = {"ratios": list(cfg.train.split), "seed": cfg.seed, "data": data_fingerprint(data)}
    history.append(_final_record(model, split))
    save_model(model, out / "model.wfck")
    _write_history(out / "history.jsonl", history)
    print(f"test accuracy {history[-1]['test_acc']:.4f}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg, out = _start(args)
    source_envs = _ints(args.source_envs)
    source = load_samples(args.data, _ints(args.sites), source_envs)
    split = _split(source, cfg)
    model = _new_model(cfg, np.unique(source.site_labels))
    da = cfg.da_config()
    if args.target_env is not None:
        target = load_samples(args.data, _ints(args.sites), [args.target_env])
        # the target's website labels are dropped inside da_train
        model, history = da_train(model, split.train, split.validation, target, da)
    else:
        envs = sorted(set(split.train.env_ids.tolist()))
        domains = [split.train.where(envs=[e]) for e in envs]
        model, history = multi_domain_train(model, domains, split.validation, da)
    model.manifest["split"] = {"ratios": list(cfg.train.split), "seed": cfg.seed, "data": data_fingerprint(source)}
    history.append(_final_record(model, split))
    save_model(model, out / "model.wfck")
    _write_history(out / "history.jsonl", history)
    print(f"source test accuracy {history[-1]['test_acc']:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, out = _start(args)
    base = load_model(args.checkpoint)
    data = load_samples(args.data, _ints(args.sites), _ints(args.envs))
    split = _split(data, cfg)
    train_set = split.train
    if args.samples_per_class:
        train_set = evalkit.stratified_subset(train_set, args.samples_per_class, cfg.seed)
    mask = freeze_mask(base, args.freeze)
    tcfg = replace(cfg.train_config(), refit_norm=args.refit_norm)
    model, history = finetune(base, train_set, split.validation, mask, tcfg, new_head=args.new_head, seed=cfg.seed)
    model.manifest["split"] = {"ratios": list(cfg.train.split), "seed": cfg.seed, "data": data_fingerprint(data)}
    history.append(_final_record(model, split))
    save_model(model, out / "model.wfck")
    _write_history(out / "history.jsonl", history)
    print(f"test accuracy {history[-1]['test_acc']:.4f}")
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg, out = _start(args)
    if cfg.defense.kind == "none":
        raise ConfigError("choose a defense with --kind inflation|injection")
    if cfg.defense.mode != "both":
        raise ConfigError("dataset files carry no split; the test-only mode belongs to experiments")
    dcfg = cfg.defense_config()
    records = []
    for f in _dataset_files(args.data):
        samples = read_dataset(f)
        defended, report = defend_samples(samples, dcfg, cfg.defense.epoch_tag)
        if defended is samples:  # identity setting: copy the input verbatim
            (out / f.name).write_bytes(f.read_bytes())
        else:
            write_dataset(out / f.name, defended)
        records.append({"file": f.name, "windows_in": len(samples), "windows_out": len(defended), **report.to_dict()})
    _write_json(out / "manifest.json", {"defense": evalkit.defense_label(dcfg), "seed": cfg.seed, "files": records})
    print(f"defended {len(records)} files into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _start(args)
    model = load_model(args.checkpoint)
    data = load_samples(args.data, _ints(args.sites), _ints(args.envs))
    if args.split == "all":
        target = data
    else:
        meta = model.manifest.get("split", {})
        ratios = tuple(meta.get("ratios", cfg.train.split))
        seed = meta.get("seed", cfg.seed)
        target = getattr(split_dataset(data, ratios, seed), "test" if args.split == "test" else "validation")
    report = evalkit.evaluate(model, target)
    # the output directory is left out of the hash so reruns elsewhere match
    settings = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    record = evalkit.result_record("eval", {"split": args.split}, {"accuracy": report.accuracy}, evalkit.config_hash(settings))
    evalkit.write_results(out / "results.jsonl", [record])
    _write_json(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.results)
    if not path.exists():
        raise DataError(f"{path}: no such results file")
    records = evalkit.read_results(path)
    if args.format == "gnuplot":
        pts = [(r.get("cell", {}).get(args.x, i), r.get("metrics", {}).get(args.y, float("nan"))) for i, r in enumerate(records)]
        text = evalkit.gnuplot_columns(pts, (args.x, args.y))
    else:
        text = evalkit.render_table(records) + "\n"
    if args.out:
        out = _out_dir(args.out)
        (out / ("report.dat" if args.format == "gnuplot" else "report.txt")).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg, out = _start(args)
    traces = generate_corpus(_synth(cfg, args), jobs=args.jobs)
    exp = cfg.experiment_config()
    e = cfg.experiment
    h = exp.hash()
    records = []
    if e.kind == "cross-domain":
        matrix, _ = evalkit.cross_domain_run(traces, exp, jobs=args.jobs)
        for i, a in enumerate(matrix.env_ids):
            for j, b in enumerate(matrix.env_ids):
                records.append(evalkit.result_record(e.kind, {"train_env": a, "test_env": b}, {"accuracy": float(matrix.accuracy[i, j])}, h))
        text = "synthetic cross-domain analogue\n" + matrix.table()
    elif e.kind == "learning-curve":
        curve, _ = evalkit.learning_curve_run(traces, exp, e.target_env, e.sizes, e.curve_mode)
        records = [evalkit.result_record(e.kind, {"mode": curve.mode, "size": n}, {"accuracy": a}, h) for n, a in curve.points]
        text = evalkit.gnuplot_columns(curve.points, ("samples_per_class", "accuracy"))
    elif e.kind == "scaling":
        pts = evalkit.website_scaling_run(traces, exp, e.counts)
        records = [evalkit.result_record(e.kind, {"sites": n}, {"accuracy": a}, h) for n, a in pts]
        text = evalkit.gnuplot_columns(pts, ("sites", "accuracy"))
    elif e.kind == "ablation":
        reports = evalkit.ablation_run(traces, exp, e.masks)
        records = [evalkit.result_record(e.kind, {"mask": m}, {"accuracy": r.accuracy}, h) for m, r in reports.items()]
        text = evalkit.render_table(records)
    else:
        settings = [None]
        if cfg.defense.kind in ("inflation", "none"):
            settings += [InflationConfig(a, cfg.defense.basis, cfg.defense.targets, cfg.seed) for a in e.inflation_levels]
        if cfg.defense.kind in ("injection", "none"):
            pool = make_trigger_pool(cfg.defense.pool_size, cfg.defense.pattern_packets, seed=cfg.seed)
            settings += [InjectionConfig(k, pool, cfg.defense.rotation, cfg.seed) for k in e.injection_levels]
        pts = evalkit.defense_curve_run(traces, exp, settings)
        records = [evalkit.result_record(e.kind, {"setting": p.label}, {"accuracy": p.accuracy, **p.overhead}, h) for p in pts]
        text = evalkit.render_table(records)
    evalkit.write_results(out / "results.jsonl", records)
    (out / "report.txt").write_text(text.rstrip("\n") + "\n")
    print(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int, help="global seed (falls back to WFLAB_SEED, then the config)")
    p.add_argument("--out", required=out_required, help="output directory (created if missing)")


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", nargs="+", required=True, help="WFDS files or directories")
    p.add_argument("--sites", help="comma-separated site labels to keep")
    p.add_argument("--preset", choices=["tiny", "base", "large"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--mask", choices=["both", "jitter-only", "size-only"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wflab", description="Seamless website-fingerprinting lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus as WFDS files")
    _common(p)
    p.add_argument("--n-sites", type=int)
    p.add_argument("--n-envs", type=int)
    p.add_argument("--packets", type=int, help="packets per trace")
    p.add_argument("--traces", type=int, help="traces per (site, env)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--synth-config", help="SynthConfig YAML (as written by a previous synth run)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="convert a timestamp,size CSV into a WFDS file")
    _common(p)
    p.add_argument("--csv", required=True)
    p.add_argument("--site", type=int, required=True)
    p.add_argument("--env", type=int, default=0)
    p.add_argument("--epoch-tag")
    p.add_argument("--name", help="output file name")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="supervised training")
    _common(p)
    _train_flags(p)
    p.add_argument("--envs", help="comma-separated env ids to keep")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="domain-adversarial training")
    _common(p)
    _train_flags(p)
    p.add_argument("--source-envs", help="comma-separated labelled env ids")
    p.add_argument("--target-env", type=int, help="unlabelled target env (omit for multi-index over source envs)")
    p.add_argument("--lambda-d", type=float)
    p.add_argument("--domain-mode", choices=["binary", "multi-index"])
    p.add_argument("--lambda-ramp", help="'constant' or 'start,end,epochs'")
    p.add_argument("--split-block", type=int)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("finetune", help="continue training a checkpoint with frozen layers")
    _common(p)
    _train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--envs")
    p.add_argument("--freeze", default="conv", help="conv, head, all, none or parameter names")
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--new-head", action="store_true")
    p.add_argument("--refit-norm", action="store_true", help="refit normalization on the finetuning data")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("defend", help="apply a defense to WFDS files")
    _common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--kind", choices=["inflation", "injection"])
    p.add_argument("--a", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--basis", choices=["mean", "stddev"])
    p.add_argument("--targets", choices=["jitter", "size", "both"])
    p.add_argument("--rotation", choices=["per-trace", "per-day"])
    p.add_argument("--mode", choices=["both", "test-only"])
    p.add_argument("--epoch-tag")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("eval", help="score a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--sites")
    p.add_argument("--envs")
    p.add_argument("--split", choices=["test", "validation", "all"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--format", choices=["table", "gnuplot"], default="table")
    p.add_argument("--x", default="size")
    p.add_argument("--y", default="accuracy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="run an experiment grid on a generated corpus")
    _common(p)
    p.add_argument("--synth-config", help="SynthConfig YAML (as written by a previous synth run)")
    p.add_argument("--experiment", choices=["cross-domain", "learning-curve", "scaling", "ablation", "defense"])
    p.add_argument("--n-sites", type=int)
    p.add_argument("--n-envs", type=int)
    p.add_argument("--packets", type=int)
    p.add_argument("--traces", type=int)
    p.add_argument("--preset", choices=["tiny", "base", "large"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--kind", choices=["inflation", "injection"])
    p.add_argument("--jobs", type=int, default=1, help="parallel grid cells (results stay seed-determined)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"wflab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"wflab: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"wflab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
