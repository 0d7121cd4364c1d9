import numpy as np
import pytest
from conftest import toy_samples
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from wflab.errors import BuildError, ConfigError, DataError, EmptyInputError, FingerprintMismatchError
from wflab.model import (
    ArchitectureConfig,
    BlockConfig,
    TrainConfig,
    build_model,
    finetune,
    freeze_mask,
    load_model,
    predict,
    preset,
    save_model,
    train,
)
from wflab.traffic import apply_channel_mask

W = 64


def tiny(classes=2, **kw):
    return build_model(preset("tiny", classes, input_length=W, **kw), seed=0)


def blobs(model, names=None):
    return {p.name: p.value.tobytes() for p in model.net.all_params()
            if p.value is not None and (names is None or p.name in names)}


def test_parameter_budgets():
    base = preset("base", 20)
    large = preset("large", 20)
    assert 8e6 <= build_model(base).param_count() <= 12e6
    assert 18e6 <= build_model(large).param_count() <= 28e6
    assert build_model(preset("tiny", 20)).param_count() <= 1e5


def test_preset_shapes():
    base, large, small = preset("base"), preset("large"), preset("tiny")
    assert base.conv_layers == 17 and len(base.blocks) == 5 and base.fc_layers == 3
    assert large.conv_layers == 23
    assert sum(b.channels for b in large.blocks) > sum(b.channels for b in base.blocks)
    assert small.conv_layers <= 6
    with pytest.raises(ConfigError):
        preset("huge")
    with pytest.raises(ConfigError):
        ArchitectureConfig(domain_count=1)
    arch = ArchitectureConfig.from_dict(base.to_dict())
    assert arch == base


def test_inconsistent_stack_fails_at_build():
    # the stem leaves 4 positions, fewer than the pool width
    arch = ArchitectureConfig(input_length=8, stem_kernel=7, stem_stride=2, stem_pool=8,
                              blocks=(BlockConfig(2, 8, 5, 2),))
    with pytest.raises(BuildError):
        build_model(arch)


def test_build_is_deterministic():
    assert blobs(tiny()) == blobs(tiny())
    other = build_model(preset("tiny", 2, input_length=W), seed=1)
    assert blobs(other) != blobs(tiny())


def test_epochs_zero_leaves_parameters():
    m = tiny()
    out, hist = train(m, toy_samples(), toy_samples(seed=1), TrainConfig(epochs=0))
    assert hist == [] and blobs(out) == blobs(m)


def test_overfit_and_predict():
    data = toy_samples(32)
    model, hist = train(tiny(), data, toy_samples(8, seed=1), TrainConfig(epochs=20, batch_size=16))
    assert len(hist) == 20
    labels, probs = predict(model, data)
    assert np.mean(labels == data.site_labels) >= 0.99
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
    empty_labels, empty_probs = predict(model, data.subset([]))
    assert empty_labels.shape == (0,) and empty_probs.shape == (0, 2)


def test_training_is_deterministic():
    data, val = toy_samples(16), toy_samples(4, seed=1)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
    a, ha = train(tiny(), data, val, cfg)
    b, hb = train(tiny(), data, val, cfg)
    assert blobs(a) == blobs(b) and ha == hb


def test_bad_labels_and_empty_data():
    with pytest.raises(DataError):
        train(tiny(), toy_samples(classes=3), toy_samples(4), TrainConfig(epochs=1))
    with pytest.raises(EmptyInputError):
        train(tiny(), toy_samples().subset([]), toy_samples(4), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)


def test_best_validation_checkpoint_is_kept():
    data = toy_samples(16)
    model, hist = train(tiny(), data, toy_samples(8, seed=2), TrainConfig(epochs=4, batch_size=8))
    best = max(range(len(hist)), key=lambda i: (hist[i]["val_acc"], -i))
    assert model.manifest["best_epoch"] == best + 1


def test_channel_mask_consistency():
    data = toy_samples(16)
    model, _ = train(tiny(), data, toy_samples(4, seed=1), TrainConfig(epochs=1, batch_size=8, mask="jitter-only"))
    probe = toy_samples(4, seed=9)
    a = predict(model, probe)[1]
    b = predict(model, apply_channel_mask(probe, "jitter-only"))[1]
    assert a.tobytes() == b.tobytes()


# -- finetune ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pretrained():
    model, _ = train(build_model(preset("tiny", 2, input_length=W)), toy_samples(16), toy_samples(4, seed=1),
                     TrainConfig(epochs=2, batch_size=8))
    return model


def test_finetune_all_frozen_is_identity(pretrained):
    out, _ = finetune(pretrained, toy_samples(8, seed=5, shift=1.0), toy_samples(4, seed=6),
                      freeze_mask(pretrained, "all"), TrainConfig(epochs=2, batch_size=8))
    assert blobs(out) == blobs(pretrained)


def test_finetune_conv_frozen(pretrained):
    conv = freeze_mask(pretrained, "conv")
    out, _ = finetune(pretrained, toy_samples(8, seed=5, shift=1.0), toy_samples(4, seed=6),
                      conv, TrainConfig(epochs=5, batch_size=8))
    assert blobs(out, conv) == blobs(pretrained, conv)
    head = {p.name for p in out.net.head.all_params()}
    assert blobs(out, head) != blobs(pretrained, head)
    assert any("running_mean" in n for n in conv)


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_freeze_invariance_property(pretrained, data):
    names = sorted(p.name for p in pretrained.net.all_params())
    mask = set(data.draw(st.lists(st.sampled_from(names), max_size=12)))
    seed = data.draw(st.integers(0, 1000))
    out, _ = finetune(pretrained, toy_samples(4, seed=seed, shift=0.5), toy_samples(2, seed=seed + 1),
                      mask, TrainConfig(epochs=1, batch_size=4, seed=seed))
    assert blobs(out, mask) == blobs(pretrained, mask)


def test_finetune_mask_errors(pretrained):
    with pytest.raises(ConfigError):
        freeze_mask(pretrained, "nonexistent.weight")
    with pytest.raises(ConfigError):
        finetune(pretrained, toy_samples(4), toy_samples(2), {"bogus"}, TrainConfig(epochs=1))


def test_finetune_new_head(pretrained):
    data = toy_samples(8, classes=3, seed=4)
    out, _ = finetune(pretrained, data, toy_samples(2, classes=3, seed=5), freeze_mask(pretrained, "conv"),
                      TrainConfig(epochs=1, batch_size=8), new_head=True)
    assert out.arch.class_count == 3 and out.labels == [0, 1, 2]


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, pretrained):
    save_model(pretrained, tmp_path / "m.wfck")
    loaded = load_model(tmp_path / "m.wfck")
    probe = toy_samples(4, seed=7)
    assert predict(loaded, probe)[1].tobytes() == predict(pretrained, probe)[1].tobytes()
    assert loaded.labels == pretrained.labels and loaded.norm == pretrained.norm


def test_untrained_checkpoint_and_mismatch(tmp_path):
    m = tiny()
    save_model(m, tmp_path / "u.wfck")
    assert blobs(load_model(tmp_path / "u.wfck")) == blobs(m)
    with pytest.raises(FingerprintMismatchError):
        load_model(tmp_path / "u.wfck", expected_arch=preset("tiny", 3, input_length=W))


@pytest.mark.slow
def test_base_capacity_not_below_tiny():
    window = 256
    data = toy_samples(48, classes=4, window=window)
    val = toy_samples(16, classes=4, window=window, seed=1)
    cfg = TrainConfig(epochs=10, batch_size=16)
    accs = {}
    for name in ("tiny", "base"):
        model, hist = train(build_model(preset(name, 4, input_length=window)), data, val, cfg)
        accs[name] = max(h["val_acc"] for h in hist)
    assert accs["base"] >= accs["tiny"] - 0.02
