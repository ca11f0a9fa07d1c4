"""Central finite-difference checks for the reverse-mode engine."""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import nn, ops
from .tensor import Tensor, precision

REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _scalar(f: Callable[[], Tensor], tape) -> float:
    if tape is not None:
        tape.rewind()
    return float(f().data)


def _analytic(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> tuple:
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = f()
    loss.backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    return float(loss.data), grads


def check_entries(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4,
                  max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                  freeze: bool = False) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``tensors``;
    entries are perturbed in place.  With ``max_entries`` only a random subset
    of each tensor is probed.  ``freeze`` replays the base point's relu/abs
    branches during the perturbed passes.
    """
    with ops.frozen_branches() if freeze else nullcontext() as tape:
        base, analytic = _analytic(f, tensors)
        floor = REL_FLOOR * max(1.0, abs(base))
        worst = 0.0
        rng = rng or np.random.default_rng(0)
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            num = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f, tape)
                flat[i] = orig - h
                fm = _scalar(f, tape)
                flat[i] = orig
                num[k] = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(ga.reshape(-1)[idx], num, floor))
    return worst


def check_directional(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4,
                      rng: Optional[np.random.Generator] = None, freeze: bool = False,
                      names: Optional[Sequence[str]] = None) -> dict:
    """Compare ∇f·v against a central difference along a random unit direction, per tensor.

    Returns tensor label → relative error.
    """
    labels = list(names) if names is not None else [str(i) for i in range(len(tensors))]
    with ops.frozen_branches() if freeze else nullcontext() as tape:
        base, analytic = _analytic(f, tensors)
        floor = REL_FLOOR * max(1.0, abs(base))
        rng = rng or np.random.default_rng(0)
        errors = {}
        for label, t, ga in zip(labels, tensors, analytic):
            direction = rng.standard_normal(t.shape)
            direction /= np.linalg.norm(direction)
            orig = t.data.copy()
            t.data[...] = orig + h * direction
            fp = _scalar(f, tape)
            t.data[...] = orig - h * direction
            fm = _scalar(f, tape)
            t.data[...] = orig
            errors[label] = relative_error(float((ga * direction).sum()), (fp - fm) / (2 * h), floor)
    return errors


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights, dtype=out.data.dtype)))


@dataclass
class OpCase:
    name: str
    build: Callable[[np.random.Generator], tuple]


def _away(rng, shape, lo=0.2, hi=1.5):
    """Random values with magnitude in [lo, hi] so kinks are never crossed."""
    mag = rng.uniform(lo, hi, shape)
    return mag * rng.choice([-1.0, 1.0], shape)


def _unary(fn, shape=(3, 4), positive=False, away=False):
    def build(rng):
        if positive:
            x = Tensor(rng.uniform(0.5, 2.0, shape))
        elif away:
            x = Tensor(_away(rng, shape))
        else:
            x = Tensor(rng.standard_normal(shape))
        return (lambda: fn(x)), [x]
    return build


def _binary(fn, sa=(3, 4), sb=(3, 4), positive_b=False):
    def build(rng):
        a = Tensor(rng.standard_normal(sa))
        b = Tensor(rng.uniform(0.5, 2.0, sb) if positive_b else rng.standard_normal(sb))
        return (lambda: fn(a, b)), [a, b]
    return build


def _conv_case(stride, padding, dilation, pad_mode="zeros"):
    def build(rng):
        x = Tensor(rng.standard_normal((2, 3, 7, 6)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        b = Tensor(rng.standard_normal(4))
        return (lambda: ops.conv2d(x, w, b, stride, padding, dilation, pad_mode)), [x, w, b]
    return build


def _spectral_case(rng):
    p = nn.Parameter(rng.standard_normal((5, 3, 2, 2)), name="probe")
    nn.spectral_normalize(p, iters=30)
    return (lambda: nn.spectral_normalize(p, update=False)), [p]


def _concat_case(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((2, 2)))
    return (lambda: ops.concat([a, b], axis=1)), [a, b]


def _stack_case(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((2, 3)))
    return (lambda: ops.stack([a, b], axis=1)), [a, b]


def _adain_case(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    g = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((2, 3)))
    return (lambda: ops.adain(x, g, b)), [x, g, b]


OP_CASES: list = [
    OpCase("add", _binary(ops.add, (3, 4), (4,))),
    OpCase("sub", _binary(ops.sub, (3, 4), (3, 1))),
    OpCase("mul", _binary(ops.mul, (3, 4), (1, 4))),
    OpCase("div", _binary(ops.div, (3, 4), (3, 4), positive_b=True)),
    OpCase("neg", _unary(ops.neg)),
    OpCase("power", _unary(lambda x: ops.power(x, 3.0))),
    OpCase("exp", _unary(ops.exp)),
    OpCase("log", _unary(ops.log, positive=True)),
    OpCase("sqrt", _unary(ops.sqrt, positive=True)),
    OpCase("abs", _unary(ops.abs, away=True)),
    OpCase("relu", _unary(ops.relu, away=True)),
    OpCase("leaky_relu", _unary(lambda x: ops.leaky_relu(x, 0.2), away=True)),
    OpCase("sigmoid", _unary(ops.sigmoid)),
    OpCase("tanh", _unary(ops.tanh)),
    OpCase("softplus", _unary(ops.softplus)),
    OpCase("softmax", _unary(lambda x: ops.softmax(x, axis=1))),
    OpCase("sum", _unary(lambda x: ops.sum(x, axis=0))),
    OpCase("mean", _unary(lambda x: ops.mean(x, axis=1, keepdims=True))),
    OpCase("exchangeable_mean", _unary(lambda x: ops.exchangeable_mean(x, axis=0))),
    OpCase("reshape", _unary(lambda x: ops.reshape(x, (2, 6)))),
    OpCase("transpose", _unary(lambda x: ops.transpose(x, (1, 0)))),
    OpCase("getitem", _unary(lambda x: ops.getitem(x, (slice(None), slice(1, 3))))),
    OpCase("concat", _concat_case),
    OpCase("stack", _stack_case),
    OpCase("matmul", _binary(ops.matmul, (3, 4), (4, 2))),
    OpCase("conv2d", _conv_case(1, 1, 1)),
    OpCase("conv2d_strided", _conv_case(2, 1, 1)),
    OpCase("conv2d_dilated", _conv_case(1, 2, 2)),
    OpCase("conv2d_circular", _conv_case(2, 2, 2, "circular")),
    OpCase("instance_norm", _unary(ops.instance_norm, (2, 3, 4, 4))),
    OpCase("adain", _adain_case),
    OpCase("upsample_nearest", _unary(lambda x: ops.upsample_nearest(x, 2), (1, 2, 3, 3))),
    OpCase("avg_pool2", _unary(ops.avg_pool2, (1, 2, 4, 4))),
    OpCase("time_shift", _unary(lambda x: ops.time_shift(x, 1, 1), (1, 4, 3, 2, 2))),
    OpCase("spectral_normalize", _spectral_case),
]


def run_op_suite(cases: Iterable[OpCase] = OP_CASES, h: float = 1e-4, seed: int = 0) -> dict:
    """Gradient-check every registered primitive at 64-bit; returns name → max rel error."""
    results = {}
    with precision(np.float64):
        for case in cases:
            rng = np.random.default_rng(seed)
            out_fn, inputs = case.build(rng)
            weights = rng.standard_normal(out_fn().shape)
            results[case.name] = check_entries(lambda: _weighted_sum(out_fn(), weights), inputs, h=h)
    return results
