import json

import numpy as np
import pytest
import yaml

from wflab.cli import main
from wflab.model import freeze_mask, load_model, predict
from wflab.traffic import read_dataset

W = 64


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("cfg")
    cfg = {
        "seed": 5,
        "synth": {"n_sites": 2, "n_envs": 2, "packets_per_trace": W * 40, "traces_per_site_env": 2, "window": W},
        "model": {"overrides": {"input_length": W}},
        "train": {"epochs": 2, "batch_size": 16},
    }
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def corpus_dir(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(cfg_path, corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", str(cfg_path), "--data", str(corpus_dir), "--envs", "0", "--out", str(out)]) == 0
    return out


def blobs(path, names=None):
    return {p.name: p.value.tobytes() for p in load_model(path).net.all_params()
            if p.value is not None and (names is None or p.name in names)}


def history(path):
    return [json.loads(line) for line in (path / "history.jsonl").read_text().splitlines()]


def test_synth_writes_one_file_per_site_env(corpus_dir):
    files = sorted(corpus_dir.glob("*.wfds"))
    assert len(files) == 4
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert len(manifest["files"]) == 4
    assert (corpus_dir / "resolved_config.yaml").exists()
    assert len(read_dataset(files[0])) == manifest["files"][0]["windows"]


def test_synth_default_cardinality(tmp_path):
    assert main(["synth", "--packets", "600", "--traces", "1", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.wfds"))) == 160


def test_synth_is_byte_reproducible(cfg_path, corpus_dir, tmp_path):
    assert main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "again")]) == 0
    for f in corpus_dir.glob("*.wfds"):
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_unwritable_output_is_a_data_error(cfg_path, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--config", str(cfg_path), "--out", str(blocker / "sub")]) == 3
    assert str(blocker) in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, corpus_dir):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {epochs: 1, colour: blue}\n")
    assert main(["train", "--config", str(bad), "--data", str(corpus_dir), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(corpus_dir), "--epochs", "-1", "--out", str(tmp_path / "o")]) == 2


def test_missing_data_exits_3(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 3


def test_train_then_eval_matches_history(cfg_path, corpus_dir, trained, tmp_path):
    final = history(trained)[-1]
    assert final["final"] and 0 <= final["test_acc"] <= 1
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(trained / "model.wfck"),
                 "--data", str(corpus_dir), "--envs", "0", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["accuracy"] == final["test_acc"]


def test_rerun_from_resolved_config(corpus_dir, trained, tmp_path):
    assert main(["train", "--config", str(trained / "resolved_config.yaml"), "--data", str(corpus_dir),
                 "--envs", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.wfck").read_bytes() == (trained / "model.wfck").read_bytes()
    assert (tmp_path / "history.jsonl").read_bytes() == (trained / "history.jsonl").read_bytes()


def test_adapt_at_zero_lambda_matches_train(cfg_path, corpus_dir, trained, tmp_path):
    assert main(["adapt", "--config", str(cfg_path), "--data", str(corpus_dir), "--source-envs", "0",
                 "--target-env", "1", "--lambda-d", "0", "--out", str(tmp_path)]) == 0
    probe = read_dataset(sorted(corpus_dir.glob("*env01.wfds"))[0])
    a = predict(load_model(tmp_path / "model.wfck"), probe)[1]
    b = predict(load_model(trained / "model.wfck"), probe)[1]
    assert a.tobytes() == b.tobytes()


def test_finetune_keeps_frozen_blobs(cfg_path, corpus_dir, trained, tmp_path):
    ck = trained / "model.wfck"
    assert main(["finetune", "--config", str(cfg_path), "--checkpoint", str(ck), "--data", str(corpus_dir),
                 "--envs", "1", "--freeze", "conv", "--samples-per-class", "10", "--out", str(tmp_path)]) == 0
    frozen = freeze_mask(load_model(ck), "conv")
    assert blobs(tmp_path / "model.wfck", frozen) == blobs(ck, frozen)
    assert blobs(tmp_path / "model.wfck") != blobs(ck)


def test_defend_identity_and_inputs_untouched(cfg_path, corpus_dir, tmp_path):
    before = {f.name: f.read_bytes() for f in corpus_dir.glob("*.wfds")}
    assert main(["defend", "--config", str(cfg_path), "--data", str(corpus_dir), "--kind", "injection",
                 "--k", "0", "--out", str(tmp_path / "k0")]) == 0
    for name, data in before.items():
        assert (tmp_path / "k0" / name).read_bytes() == data
    assert main(["defend", "--config", str(cfg_path), "--data", str(corpus_dir), "--kind", "inflation",
                 "--a", "20", "--out", str(tmp_path / "a20")]) == 0
    name = sorted(before)[0]
    assert (tmp_path / "a20" / name).read_bytes() != before[name]
    assert {f.name: f.read_bytes() for f in corpus_dir.glob("*.wfds")} == before
    manifest = json.loads((tmp_path / "a20" / "manifest.json").read_text())
    assert all(r["delay_multiplier"] > 1 for r in manifest["files"])


def test_report_rendering(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["report", "--results", str(empty)]) == 0
    results = tmp_path / "curve.jsonl"
    results.write_text("".join(json.dumps({"experiment": "learning-curve", "cell": {"size": n},
                                           "metrics": {"accuracy": a}, "config_hash": "h"}) + "\n"
                               for n, a in ((200, 0.5), (400, 0.75))))
    capsys.readouterr()
    assert main(["report", "--results", str(results), "--format", "gnuplot"]) == 0
    assert capsys.readouterr().out.splitlines()[1:] == ["200 0.5", "400 0.75"]
    assert main(["report", "--results", str(tmp_path / "missing.jsonl")]) == 3


def test_experiment_ablation(cfg_path, tmp_path):
    assert main(["experiment", "--config", str(cfg_path), "--experiment", "ablation", "--n-envs", "1",
                 "--epochs", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "results.jsonl").read_text().splitlines()
    assert sorted(json.loads(x)["cell"]["mask"] for x in lines) == ["both", "jitter-only", "size-only"]
    assert np.isfinite([json.loads(x)["metrics"]["accuracy"] for x in lines]).all()


def test_synth_config_file_reproduces_corpus(cfg_path, corpus_dir, tmp_path):
    assert main(["synth", "--config", str(cfg_path), "--synth-config", str(corpus_dir / "synth_config.yaml"),
                 "--out", str(tmp_path)]) == 0
    for f in corpus_dir.glob("*.wfds"):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()
    (tmp_path / "broken.yaml").write_text("- a list\n")
    assert main(["synth", "--synth-config", str(tmp_path / "broken.yaml"), "--out", str(tmp_path / "x")]) == 2
