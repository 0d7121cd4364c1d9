import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wflab.errors import BuildError, DimensionError, UninitializedStatsError
from wflab.model import WFNet, build_model, preset
from wflab.nn import (
    SGD,
    Adam,
    BatchNorm,
    Conv1D,
    GlobalAvgPool,
    GradientReversal,
    LayerSpec,
    Linear,
    MaxPool1D,
    ReLU,
    ResidualBlock,
    Sequential,
    batchnorm_backward,
    batchnorm_forward,
    build_stack,
    conv1d_backward,
    conv1d_forward,
    grad_check,
    grl_backward,
    grl_forward,
    maxpool1d_backward,
    maxpool1d_forward,
    relu_forward,
    softmax,
    softmax_cross_entropy,
)
from wflab.nn.gradcheck import rel_error
from wflab.nn.layers import Param

TOL = 1e-4


def init(module, g):
    for p in module.all_params():
        if p.trainable:
            p.value = g.standard_normal(p.value.shape)
    return module


def random_module(kind, g):
    """A small random layer of ``kind`` and an input for it, in float64."""
    B = int(g.integers(2, 4))
    C = int(g.integers(1, 4))
    L = int(g.integers(4, 12))
    x = g.standard_normal((B, C, L))
    if kind == "conv":
        k = int(g.integers(1, min(L, 5) + 1))
        m = Conv1D("c", C, int(g.integers(1, 4)), k, int(g.integers(1, 3)), int(g.integers(0, k)), np.float64)
    elif kind == "bn":
        m = BatchNorm("bn", C, dtype=np.float64)
    elif kind == "fc":
        x = g.standard_normal((B, L))
        m = Linear("fc", L, int(g.integers(1, 6)), np.float64)
    elif kind == "pool":
        w = int(g.integers(1, 4))
        m = MaxPool1D("p", w, int(g.integers(1, 3)))
    elif kind == "relu":
        m = ReLU()
    elif kind == "gap":
        m = GlobalAvgPool()
    else:  # residual block with projection
        main = Sequential("m", [Conv1D("m.c", C, 3, 3, 2, 1, np.float64), BatchNorm("m.bn", 3, dtype=np.float64)])
        proj = Sequential("p", [Conv1D("p.c", C, 3, 1, 2, 0, np.float64)])
        m = ResidualBlock("r", main, proj)
    return init(m, g), x


KINDS = ["conv", "bn", "fc", "pool", "relu", "gap", "residual"]
CASES = [(k, s) for k in KINDS for s in range(16)]


def test_case_count():
    assert len(CASES) >= 100


@pytest.mark.parametrize("kind,seed", CASES)
def test_layer_gradients(kind, seed):
    g = np.random.default_rng(1000 + seed)
    m, x = random_module(kind, g)
    report = grad_check(m, x, max_coords=None, seed=seed)
    assert report.max_rel_error < TOL, report


@pytest.mark.parametrize("seed", range(8))
def test_softmax_ce_gradient(seed):
    g = np.random.default_rng(seed)
    B, C = int(g.integers(1, 6)), int(g.integers(2, 8))
    logits = g.standard_normal((B, C)) * 3
    labels = g.integers(0, C, B)
    _, grad = softmax_cross_entropy(logits, labels)
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        h = 1e-5 * max(abs(logits[idx]), 1.0)
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (softmax_cross_entropy(up, labels)[0] - softmax_cross_entropy(dn, labels)[0]) / (2 * h)
    assert rel_error(grad, num) < TOL


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
def test_grl_against_finite_differences(lam):
    # the numeric derivative of the identity forward, reversed and scaled
    g = np.random.default_rng(3)
    x = g.standard_normal((3, 4))
    up = g.standard_normal((3, 4))
    grl = GradientReversal(lam=lam)
    h = 1e-5
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        a, b = x.copy(), x.copy()
        a[idx] += h
        b[idx] -= h
        num[idx] = (np.sum(grl.forward(a) * up) - np.sum(grl.forward(b) * up)) / (2 * h)
    grl.forward(x)
    np.testing.assert_allclose(grl.backward(up), -lam * num, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
def test_grl_is_exact(lam):
    g = np.random.default_rng(11)
    up = g.standard_normal((5, 7))
    out = grl_backward(up, lam)
    assert out.tobytes() == ((-lam) * up).tobytes()
    x = g.standard_normal(4)
    assert grl_forward(x, lam) is x


def test_full_tiny_wfnet_gradient():
    arch = preset("tiny", class_count=4, input_length=48)
    model = build_model(arch, seed=2, dtype=np.float64)
    g = np.random.default_rng(0)
    x = g.standard_normal((4, 2, 48))
    report = grad_check(model.net, x, labels=np.array([0, 1, 2, 3]), max_coords=20)
    assert report.max_rel_error < TOL, report
    assert len(report.param_rel_errors) == len([p for p in model.net.all_params() if p.trainable])


def test_single_fc_is_essentially_exact():
    g = np.random.default_rng(4)
    m = init(Linear("fc", 5, 3, np.float64), g)
    assert grad_check(m, g.standard_normal((4, 5)), max_coords=None).max_rel_error < 1e-8


def test_grl_reverses_extractor_gradient_in_a_model():
    g = np.random.default_rng(5)
    x = g.standard_normal((3, 2, 8))
    stacks = {}
    for lam in (None, 1.0):
        gg = np.random.default_rng(9)
        conv = init(Conv1D("c", 2, 3, 3, 1, 1, np.float64), gg)
        head = init(Linear("fc", 3, 2, np.float64), gg)
        mid = [GradientReversal(lam=lam)] if lam is not None else []
        net = Sequential("s", [conv, *mid, GlobalAvgPool(), head])
        _, grad = softmax_cross_entropy(net.forward(x, True), np.array([0, 1, 1]))
        net.backward(grad)
        stacks[lam] = (conv.weight.grad.copy(), head.weight.grad.copy())
    np.testing.assert_array_equal(stacks[1.0][0], -stacks[None][0])
    np.testing.assert_array_equal(stacks[1.0][1], stacks[None][1])


# -- forward examples -------------------------------------------------------------------

def test_conv_examples():
    out, _ = conv1d_forward(np.array([[[1.0, 2, 3]]]), np.array([[[1.0, 0, -1]]]), np.zeros(1))
    assert out.tolist() == [[[-2.0]]]
    x = np.random.default_rng(0).standard_normal((2, 3, 5))
    out, _ = conv1d_forward(x, np.eye(3)[:, :, None], np.zeros(3))
    np.testing.assert_array_equal(out, x)
    out, cache = conv1d_forward(np.zeros((1, 2, 6)), np.ones((4, 2, 3)), np.arange(4.0), 2, 1)
    assert out.shape == (1, 4, 3) and (out == np.arange(4.0)[None, :, None]).all()
    gx, gw, gb = conv1d_backward(np.zeros_like(out), cache)
    assert not gx.any() and not gw.any() and not gb.any()
    # single element: d out / d w = x
    _, cache = conv1d_forward(np.array([[[2.5]]]), np.array([[[4.0]]]), np.zeros(1))
    assert conv1d_backward(np.ones((1, 1, 1)), cache)[1].item() == 2.5


def test_conv_errors():
    with pytest.raises(DimensionError):
        conv1d_forward(np.zeros((1, 2, 5)), np.zeros((1, 3, 3)), np.zeros(1))
    with pytest.raises(DimensionError):
        conv1d_forward(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)), np.zeros(1))


def test_batchnorm_examples():
    x = np.array([[[1.0]], [[3.0]]])
    out, rm, rv, cache = batchnorm_forward(x, np.ones(1), np.zeros(1), None, None, True, eps=0.0)
    assert out.ravel().tolist() == [-1.0, 1.0]
    out, *_ = batchnorm_forward(np.full((2, 1, 3), 7.0), np.ones(1), np.full(1, 5.0), None, None, True)
    assert (out == 5).all()
    x = np.random.default_rng(0).standard_normal((4, 2, 3))
    out, *_ = batchnorm_forward(x, np.zeros(2), np.array([1.0, -2.0]), None, None, True)
    assert (out[:, 0] == 1).all() and (out[:, 1] == -2).all()
    out, _, _, cache = batchnorm_forward(x, np.ones(2), np.zeros(2), None, None, True)
    gx, gg, gb = batchnorm_backward(np.zeros_like(x), cache)
    assert not gx.any() and not gg.any() and not gb.any()
    up = np.random.default_rng(1).standard_normal(x.shape)
    np.testing.assert_allclose(batchnorm_backward(up, cache)[2], up.sum(axis=(0, 2)))


def test_batchnorm_running_stats():
    bn = BatchNorm("bn", 1, momentum=0.1, dtype=np.float64)
    with pytest.raises(UninitializedStatsError):
        bn.forward(np.zeros((2, 1, 2)))
    bn.forward(np.array([[[1.0, 3.0]]]), train=True)
    assert bn.running_mean.value.tolist() == [2.0] and bn.running_var.value.tolist() == [1.0]
    bn.forward(np.array([[[5.0, 5.0]]]), train=True)
    assert bn.running_mean.value[0] == pytest.approx(0.9 * 2 + 0.1 * 5)
    assert bn.running_var.value[0] == pytest.approx(0.9 * 1 + 0.1 * 0)
    x = np.random.default_rng(0).standard_normal((3, 1, 4))
    np.testing.assert_array_equal(bn.forward(x), bn.forward(x))


def test_relu_pool_fc_examples():
    assert relu_forward(np.array([-1.0, 2.0]))[0].tolist() == [0.0, 2.0]
    out, cache = maxpool1d_forward(np.array([[[1.0, 3, 2, 2]]]), 2, 2)
    assert out.tolist() == [[[3.0, 2.0]]]
    assert maxpool1d_backward(np.ones((1, 1, 2)), cache).tolist() == [[[0.0, 1.0, 1.0, 0.0]]]
    fc = Linear("fc", 3, 3, np.float64)
    fc.weight.value = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(fc.forward(x), x)


def test_softmax_ce_examples():
    loss, grad = softmax_cross_entropy(np.zeros((2, 20)), np.array([3, 7]))
    assert loss == pytest.approx(np.log(20), abs=1e-12)
    logits = np.zeros((1, 5))
    logits[0, 2] = 50
    assert softmax_cross_entropy(logits, np.array([2]))[0] < 1e-20
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)
    with pytest.raises(DimensionError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_softmax_rows_and_loss_sign(b, c, seed):
    logits = np.random.default_rng(seed).standard_normal((b, c)) * 30
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1, atol=1e-9)
    loss, grad = softmax_cross_entropy(logits, np.zeros(b, dtype=int))
    assert loss >= 0
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)


# -- optimizers -------------------------------------------------------------------------

def test_sgd_steps():
    p = Param("w", np.array([1.0]))
    p.grad = np.array([2.0])
    SGD([p], lr=0.1, momentum=0.0).step()
    assert p.value[0] == pytest.approx(0.8)
    q = Param("q", np.array([1.0, -1.0]))
    q.grad = np.zeros(2)
    SGD([q], lr=0.1).step()
    assert q.value.tolist() == [1.0, -1.0]


def test_adam_first_step_is_sign():
    p = Param("w", np.array([1.0, 1.0, 1.0]))
    p.grad = np.array([3.0, -0.5, 20.0])
    Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.value, 1 - 0.01 * np.sign([3.0, -0.5, 20.0]), rtol=1e-6)


def test_optimizer_ignores_buffers():
    buf = Param("bn.running_mean", np.array([4.0]), trainable=False)
    buf.grad = np.array([1.0])
    w = Param("w", np.array([0.0]))
    w.grad = np.array([1.0])
    opt = Adam([w, buf])
    opt.step()
    assert buf.value[0] == 4.0 and w.value[0] != 0.0


# -- build-time checks ------------------------------------------------------------------

def test_build_rejects_inconsistent_stack():
    specs = [
        LayerSpec("conv1d", "c", dict(in_ch=2, out_ch=4, kernel=3)),
        LayerSpec("batchnorm", "bn", dict(channels=5)),
    ]
    with pytest.raises(BuildError):
        build_stack("s", specs, (2, 10))
    with pytest.raises(BuildError):
        LayerSpec("attention")
    with pytest.raises(BuildError):
        build_stack("s", [LayerSpec("fc", "f", dict(n_in=3, n_out=2))], (4,))


def test_wfnet_forward_is_deterministic():
    model = build_model(preset("tiny", 3, input_length=64), seed=1)
    x = np.random.default_rng(0).standard_normal((2, 2, 64)).astype(np.float32)
    model.net.forward(x, train=True)
    a, b = model.net.forward(x), model.net.forward(x)
    assert a.tobytes() == b.tobytes()
    assert isinstance(model.net, WFNet)
