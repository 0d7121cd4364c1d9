"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .layers import Module


@dataclass
class GradCheckReport:
    max_rel_error: float
    input_rel_error: float
    param_rel_errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a, b, floor=1e-6) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _coords(shape, limit, g: np.random.Generator):
    n = int(np.prod(shape))
    if limit is None or n <= limit:
        return np.arange(n)
    return np.sort(g.choice(n, size=limit, replace=False))


def grad_check(
    module: Module,
    x: np.ndarray,
    labels=None,
    tolerance: float = 1e-4,
    train: bool = True,
    max_coords: int | None = 24,
    h_scale: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients with central differences for the input and every parameter.

    With ``labels`` the loss is mean softmax cross-entropy on the module
    output; otherwise it is ``sum(out * R)`` for a fixed random ``R``.  At most
    ``max_coords`` coordinates per tensor are probed (``None`` = all), with
    step ``h = h_scale * max(|theta|, 1)``; relative errors use an absolute
    floor of ``floor`` times the largest analytic gradient (at least 1).  BN running statistics are
    restored afterwards.  Run it in float64.
    """
    g = np.random.default_rng(seed)
    buffers = [p for p in module.all_params() if not p.trainable]
    saved = [None if p.value is None else p.value.copy() for p in buffers]
    x = np.array(x, dtype=np.float64)

    proj = None

    def loss_and_grad(inp):
        nonlocal proj
        out = module.forward(inp, train)
        if labels is not None:
            return F.softmax_cross_entropy(out, labels)
        if proj is None:
            proj = g.standard_normal(out.shape)
        return float(np.sum(out * proj)), proj

    def loss_only(inp):
        return loss_and_grad(inp)[0]

    params = [p for p in module.all_params() if p.trainable]
    for p in params:
        p.grad = None
    _, gout = loss_and_grad(x)
    gx = module.backward(gout)
    analytic = {p.name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy()) for p in params}

    def numeric(arr, coords, evaluate):
        flat = arr.reshape(-1)
        out = np.empty(len(coords))
        for i, c in enumerate(coords):
            orig = flat[c]
            h = h_scale * max(abs(orig), 1.0)
            flat[c] = orig + h
            lp = evaluate()
            flat[c] = orig - h
            lm = evaluate()
            flat[c] = orig
            out[i] = (lp - lm) / (2 * h)
        return out

    # a gradient that is exactly zero (a conv bias feeding train-mode BN) is
    # compared against difference noise that scales with the loss, so the
    # absolute floor scales with the largest analytic gradient
    scale = max([1.0, float(np.abs(gx).max(initial=0))] + [float(np.abs(a).max(initial=0)) for a in analytic.values()])
    floor = floor * scale
    report = GradCheckReport(0.0, 0.0, {}, tolerance)
    cx = _coords(x.shape, max_coords, g)
    nx = numeric(x, cx, lambda: loss_only(x))
    report.input_rel_error = rel_error(gx.reshape(-1)[cx], nx, floor)
    for p in params:
        c = _coords(p.value.shape, max_coords, g)
        n = numeric(p.value, c, lambda: loss_only(x))
        report.param_rel_errors[p.name] = rel_error(analytic[p.name].reshape(-1)[c], n, floor)
    report.max_rel_error = max([report.input_rel_error, *report.param_rel_errors.values()])

    for p, v in zip(buffers, saved):
        p.value = v
    return report
