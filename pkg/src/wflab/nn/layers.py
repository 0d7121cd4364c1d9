"""Stateful layer modules built on :mod:`wflab.nn.functional`.

A module caches what its backward pass needs during ``forward`` and adds
parameter gradients into ``Param.grad`` during ``backward``.  Layer stacks are
described declaratively with :class:`LayerSpec` and shape-checked at build time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BuildError
from . import functional as F


class Param:
    """A named array.  ``trainable=False`` marks buffers such as BN running stats."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = None
        self.trainable = trainable

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"Param({self.name!r}, shape={shape}, trainable={self.trainable})"


class Module:
    name = ""

    def params(self) -> list[Param]:
        return []

    def children(self) -> list[Module]:
        return []

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)

    def modules(self):
        yield self
        for c in self.children():
            yield from c.modules()

    def all_params(self) -> list[Param]:
        out = []
        for m in self.modules():
            out.extend(m.params())
        return out


class Conv1D(Module):
    def __init__(self, name, in_ch, out_ch, kernel, stride=1, padding=0, dtype=np.float32):
        self.name = name
        self.in_ch, self.out_ch, self.kernel, self.stride, self.padding = in_ch, out_ch, kernel, stride, padding
        self.weight = Param(f"{name}.weight", np.zeros((out_ch, in_ch, kernel), dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_ch, dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        out, self._cache = F.conv1d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)
        return out

    def backward(self, grad):
        gx, gw, gb = F.conv1d_backward(grad, self._cache)
        _accumulate(self.weight, gw)
        _accumulate(self.bias, gb)
        return gx

    def out_shape(self, shape):
        if len(shape) != 2 or shape[0] != self.in_ch:
            raise BuildError(f"{self.name}: expects ({self.in_ch}, L), got {shape}")
        if shape[1] + 2 * self.padding < self.kernel:
            raise BuildError(f"{self.name}: length {shape[1]} too short for kernel {self.kernel}")
        return (self.out_ch, F.conv_out_len(shape[1], self.kernel, self.stride, self.padding))


class BatchNorm(Module):
    """Batch norm over (batch, length).  ``frozen`` forces inference behaviour in training."""

    def __init__(self, name, channels, momentum=0.1, epsilon=1e-5, dtype=np.float32):
        self.name = name
        self.channels, self.momentum, self.epsilon = channels, momentum, epsilon
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype))
        self.running_mean = Param(f"{name}.running_mean", None, trainable=False)
        self.running_var = Param(f"{name}.running_var", None, trainable=False)
        self.frozen = False
        self.update_stats = True
        self._cache = None

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def forward(self, x, train=False):
        train = train and not self.frozen
        out, rm, rv, self._cache = F.batchnorm_forward(
            x,
            self.gamma.value,
            self.beta.value,
            self.running_mean.value,
            self.running_var.value,
            train,
            self.momentum,
            self.epsilon,
        )
        if train and self.update_stats:
            self.running_mean.value = rm.astype(x.dtype)
            self.running_var.value = rv.astype(x.dtype)
        return out

    def backward(self, grad):
        gx, gg, gb = F.batchnorm_backward(grad, self._cache)
        _accumulate(self.gamma, gg)
        _accumulate(self.beta, gb)
        return gx

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise BuildError(f"{self.name}: expects {self.channels} channels, got {shape}")
        return shape


class ReLU(Module):
    def __init__(self, name="relu"):
        self.name = name
        self._mask = None

    def forward(self, x, train=False):
        out, self._mask = F.relu_forward(x)
        return out

    def backward(self, grad):
        return F.relu_backward(grad, self._mask)


class MaxPool1D(Module):
    def __init__(self, name, width, stride=None):
        self.name = name
        self.width = width
        self.stride = stride or width
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.maxpool1d_forward(x, self.width, self.stride)
        return out

    def backward(self, grad):
        return F.maxpool1d_backward(grad, self._cache)

    def out_shape(self, shape):
        if len(shape) != 2 or shape[1] < self.width:
            raise BuildError(f"{self.name}: cannot pool {shape} with width {self.width}")
        return (shape[0], (shape[1] - self.width) // self.stride + 1)


class GlobalAvgPool(Module):
    def __init__(self, name="gap"):
        self.name = name
        self._shape = None

    def forward(self, x, train=False):
        out, self._shape = F.global_avgpool_forward(x)
        return out

    def backward(self, grad):
        return F.global_avgpool_backward(grad, self._shape)

    def out_shape(self, shape):
        if len(shape) != 2:
            raise BuildError(f"{self.name}: expects (C, L), got {shape}")
        return (shape[0],)


class Linear(Module):
    def __init__(self, name, n_in, n_out, dtype=np.float32):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.weight = Param(f"{name}.weight", np.zeros((n_out, n_in), dtype))
        self.bias = Param(f"{name}.bias", np.zeros(n_out, dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        out, self._cache = F.fc_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, grad):
        gx, gw, gb = F.fc_backward(grad, self._cache)
        _accumulate(self.weight, gw)
        _accumulate(self.bias, gb)
        return gx

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise BuildError(f"{self.name}: expects ({self.n_in},), got {shape}")
        return (self.n_out,)


class GradientReversal(Module):
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""

    def __init__(self, name="grl", lam=1.0):
        self.name = name
        self.lam = lam

    def forward(self, x, train=False):
        return F.grl_forward(x, self.lam)

    def backward(self, grad):
        return F.grl_backward(grad, self.lam)


class Sequential(Module):
    def __init__(self, name, layers):
        self.name = name
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape


class ResidualBlock(Module):
    """``relu(main(x) + skip(x))`` where skip is identity or a projection."""

    def __init__(self, name, main: Sequential, projection: Sequential | None = None):
        self.name = name
        self.main = main
        self.projection = projection
        self._mask = None

    def children(self):
        return [self.main] + ([self.projection] if self.projection else [])

    def forward(self, x, train=False):
        skip = self.projection.forward(x, train) if self.projection else x
        out, self._mask = F.relu_forward(self.main.forward(x, train) + skip)
        return out

    def backward(self, grad):
        g = F.relu_backward(grad, self._mask)
        gx = self.main.backward(g)
        return gx + (self.projection.backward(g) if self.projection else g)

    def out_shape(self, shape):
        out = self.main.out_shape(shape)
        skip = self.projection.out_shape(shape) if self.projection else shape
        if out != skip:
            raise BuildError(f"{self.name}: main path gives {out} but skip path gives {skip}")
        return out


def _accumulate(p: Param, g):
    if p.grad is None:
        p.grad = g.astype(p.value.dtype, copy=True)
    else:
        p.grad += g


# -- declarative stacks -----------------------------------------------------------------

LAYER_KINDS = {
    "conv1d", "batchnorm", "relu", "maxpool1d", "fc", "gap",
    "residual_start", "residual_end", "grl", "softmax_ce",
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise BuildError(f"unknown layer kind {self.kind!r}")


def _make_layer(spec: LayerSpec, dtype) -> Module:
    a = spec.args
    try:
        if spec.kind == "conv1d":
            return Conv1D(spec.name, a["in_ch"], a["out_ch"], a["kernel"], a.get("stride", 1), a.get("padding", 0), dtype)
        if spec.kind == "batchnorm":
            return BatchNorm(spec.name, a["channels"], a.get("momentum", 0.1), a.get("epsilon", 1e-5), dtype)
        if spec.kind == "relu":
            return ReLU(spec.name)
        if spec.kind == "maxpool1d":
            return MaxPool1D(spec.name, a["width"], a.get("stride"))
        if spec.kind == "fc":
            return Linear(spec.name, a["n_in"], a["n_out"], dtype)
        if spec.kind == "gap":
            return GlobalAvgPool(spec.name)
        if spec.kind == "grl":
            return GradientReversal(spec.name, a.get("lam", 1.0))
    except KeyError as exc:
        raise BuildError(f"{spec.name or spec.kind}: missing argument {exc}") from None
    raise BuildError(f"{spec.kind} cannot appear here")


def build_stack(name: str, specs: list[LayerSpec], in_shape: tuple, dtype=np.float32) -> tuple[Sequential, tuple]:
    """Turn a spec list into a module tree; returns the stack and its output shape.

    ``residual_start``/``residual_end`` bracket a block's main path.  When the
    block changes shape, ``residual_start`` must carry ``projection`` specs
    (typically a strided 1x1 conv and a batch norm) for the skip path.
    ``softmax_ce`` is a loss marker and may only close the stack.
    """
    layers: list[Module] = []
    shape = tuple(in_shape)
    i = 0
    while i < len(specs):
        spec = specs[i]
        if spec.kind == "residual_start":
            depth, j = 1, i + 1
            while j < len(specs) and depth:
                depth += {"residual_start": 1, "residual_end": -1}.get(specs[j].kind, 0)
                j += 1
            if depth:
                raise BuildError(f"{spec.name}: residual_start without residual_end")
            main, _ = build_stack(f"{spec.name}.main", specs[i + 1 : j - 1], shape, dtype)
            proj_specs = spec.args.get("projection")
            proj = build_stack(f"{spec.name}.proj", list(proj_specs), shape, dtype)[0] if proj_specs else None
            block = ResidualBlock(spec.name, main, proj)
            shape = block.out_shape(shape)
            layers.append(block)
            i = j
            continue
        if spec.kind == "residual_end":
            raise BuildError("residual_end without residual_start")
        if spec.kind == "softmax_ce":
            if i != len(specs) - 1:
                raise BuildError("softmax_ce must be the last layer")
            if len(shape) != 1:
                raise BuildError(f"softmax_ce needs flat logits, got {shape}")
            break
        layer = _make_layer(spec, dtype)
        shape = layer.out_shape(shape)
        layers.append(layer)
        i += 1
    return Sequential(name, layers), shape
