import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wflab.defenses import InflationConfig
from wflab.errors import ConfigError, DataError
from wflab.evalkit import (
    CrossDomainMatrix,
    ExperimentConfig,
    LearningCurve,
    ablation_run,
    compute_metrics,
    cross_domain_run,
    defense_curve_run,
    gnuplot_columns,
    learning_curve_run,
    read_results,
    render_table,
    result_record,
    split_traces,
    stratified_subset,
    train_cell,
    website_scaling_run,
    window_split,
    write_results,
)
from wflab.model import TrainConfig
from wflab.synth import default_corpus, generate_corpus

W = 64


def small_exp(epochs=1, **kw):
    return ExperimentConfig(arch_overrides={"input_length": W}, train=TrainConfig(epochs=epochs, batch_size=16),
                            window=W, **kw)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(default_corpus(3, 2, 0, packets_per_trace=W * 24, traces_per_site_env=3))


# -- metrics ----------------------------------------------------------------------------

def test_metric_examples():
    r = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert r.accuracy == 0.75
    assert r.precision[1] == pytest.approx(2 / 3) and r.recall[1] == 1.0
    assert r.confusion.tolist() == [[1, 1], [0, 2]]
    perfect = compute_metrics([2, 0, 1], [2, 0, 1], 3)
    assert perfect.accuracy == 1.0 and (perfect.confusion == np.diag([1, 1, 1])).all()
    never = compute_metrics([0, 0], [0, 1], 2)
    assert never.precision[1] == 0.0 and never.f1[1] == 0.0


def test_metric_errors():
    with pytest.raises(DataError):
        compute_metrics([0], [0, 1], 2)
    with pytest.raises(DataError):
        compute_metrics([2], [0], 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=60))))
def test_metric_identities(case):
    c, pairs = case
    pred, true = zip(*pairs)
    r = compute_metrics(pred, true, c)
    assert r.confusion.sum() == len(pairs)
    assert r.accuracy == pytest.approx(np.trace(r.confusion) / len(pairs))
    np.testing.assert_array_equal(r.support, np.bincount(true, minlength=c))
    assert r.accuracy == pytest.approx(float(np.sum(r.recall * r.support)) / len(pairs))
    # micro-averaged precision equals accuracy for single-label predictions
    tp = np.trace(r.confusion)
    assert tp / r.confusion.sum() == pytest.approx(r.accuracy)


def test_report_containers():
    m = CrossDomainMatrix((0, 1), np.array([[0.9, 0.3], [0.2, 0.8]]))
    np.testing.assert_allclose(m.margins(), [0.6, 0.6])
    assert "train\\test" in m.table()
    with pytest.raises(DataError):
        LearningCurve("scratch", ((10, 0.5), (10, 0.6)))


# -- splits -----------------------------------------------------------------------------

def test_trace_split_keeps_traces_whole(corpus):
    sp = split_traces(corpus, seed=3)
    assert len(sp.train) + len(sp.validation) + len(sp.test) == len(corpus)
    ids = lambda ts: {id(t) for t in ts}  # noqa: E731
    assert not ids(sp.train) & ids(sp.test)
    assert split_traces(corpus, seed=3) == sp


def test_small_groups_split_into_segments():
    traces = generate_corpus(default_corpus(2, 1, 0, packets_per_trace=400, traces_per_site_env=1))
    sp = split_traces(traces)
    assert [len(t) for t in sp.train] == [200, 200]
    assert [len(t) for t in sp.validation] == [100, 100]
    assert sp.test[0].timestamps[0] == traces[0].timestamps[300]
    with pytest.raises(ConfigError):
        split_traces(traces, (0.5, 0.5, 0.5))


def test_stratified_subset(corpus):
    data = window_split(split_traces(corpus), small_exp()).train
    sub = stratified_subset(data, 5, seed=1)
    assert np.bincount(sub.site_labels).tolist() == [5, 5, 5]
    with pytest.raises(DataError):
        stratified_subset(data, 10_000, seed=1)


# -- grid procedures --------------------------------------------------------------------

def test_cross_domain_single_env(corpus):
    one = [t for t in corpus if t.env_id == 1]
    exp = small_exp()
    matrix, manifests = cross_domain_run(one, exp)
    assert matrix.accuracy.shape == (1, 1)
    _, _, report, _ = train_cell(exp, window_split(split_traces(one, exp.split, exp.seed), exp), ("cross", 1))
    assert matrix.accuracy[0, 0] == report.accuracy
    again, manifests2 = cross_domain_run(one, exp)
    assert again.accuracy.tobytes() == matrix.accuracy.tobytes() and manifests == manifests2


def test_cross_domain_shape(corpus):
    matrix, manifests = cross_domain_run(corpus, small_exp())
    assert matrix.accuracy.shape == (2, 2) and len(manifests) == 2
    assert {"config_hash", "seed", "train_data", "test_data"} <= set(manifests[0])


def test_scaling_and_errors(corpus):
    out = website_scaling_run(corpus, small_exp(), counts=(1, 3))
    assert out[0] == (1, 1.0) and out[1][0] == 3
    with pytest.raises(ConfigError):
        website_scaling_run(corpus, small_exp(), counts=(4,))


def test_learning_curve(corpus):
    curve, manifests = learning_curve_run(corpus, small_exp(), 0, sizes=(4, 8), mode="scratch")
    assert [p[0] for p in curve.points] == [4, 8] and len(manifests) == 2
    ft, _ = learning_curve_run(corpus, small_exp(), 0, sizes=(4,), mode="pretrain-finetune")
    assert ft.mode == "pretrain-finetune"
    with pytest.raises(DataError):
        learning_curve_run(corpus, small_exp(), 0, sizes=(10_000,))
    with pytest.raises(ConfigError):
        learning_curve_run(corpus, small_exp(), 0, sizes=(4,), mode="other")


def test_ablation_masks(corpus):
    reports = ablation_run([t for t in corpus if t.env_id == 0], small_exp())
    assert set(reports) == {"both", "jitter-only", "size-only"}
    assert all(0 <= r.accuracy <= 1 for r in reports.values())


def test_defense_baseline_point(corpus):
    traces = [t for t in corpus if t.env_id == 0]
    exp = small_exp()
    pts = defense_curve_run(traces, exp, [None, InflationConfig(a=15)])
    baseline = defense_curve_run(traces, exp, [None])[0]
    assert pts[0] == baseline and pts[0].overhead["traces"] == 0
    assert pts[1].overhead["delay_multiplier"] > 1
    assert pts[1].label == "inflation a=15 mean both"


# -- results files ----------------------------------------------------------------------

def test_results_roundtrip(tmp_path):
    recs = [result_record("ablation", {"mask": "both"}, {"accuracy": np.float64(0.5)}, "abc")]
    write_results(tmp_path / "r.jsonl", recs)
    back = read_results(tmp_path / "r.jsonl")
    assert back[0]["metrics"]["accuracy"] == 0.5
    first = (tmp_path / "r.jsonl").read_bytes()
    write_results(tmp_path / "r.jsonl", recs)
    assert (tmp_path / "r.jsonl").read_bytes() == first
    assert "mask=both" in render_table(back)
    (tmp_path / "bad.jsonl").write_text("{oops\n")
    with pytest.raises(DataError):
        read_results(tmp_path / "bad.jsonl")


def test_gnuplot_columns():
    text = gnuplot_columns([(1000, 0.5), (2000, 0.75)], ("samples", "accuracy"))
    assert text.splitlines() == ["# samples accuracy", "1000 0.5", "2000 0.75"]
