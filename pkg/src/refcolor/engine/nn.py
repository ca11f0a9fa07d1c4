"""Parameters, a small module tree, and spectral normalisation."""

from __future__ import annotations

import zlib
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A trainable leaf tensor with an optional power-iteration vector."""

    __slots__ = ("name", "spectral_u")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.spectral_u: Optional[np.ndarray] = None


def _l2normalize(v: np.ndarray, eps: float) -> np.ndarray:
    return v / (np.linalg.norm(v) + eps)


def spectral_normalize(p: Parameter, iters: int = 1, update: bool = True, eps: float = 1e-12) -> Tensor:
    """Return ``p / sigma`` where sigma estimates the top singular value of ``p``.

    The weight is viewed as (out_dim × rest).  ``p.spectral_u`` is the
    persistent left vector; when ``update`` is true it is refined by ``iters``
    power iterations before sigma is computed.  The vectors are constants for
    differentiation, so sigma = uᵀWv contributes the usual uvᵀ term.
    """
    if iters < 1:
        raise ValueError("spectral_normalize needs at least one iteration")
    w2d = p.data.reshape(p.shape[0], -1)
    if p.spectral_u is None:
        rng = np.random.default_rng(zlib.crc32(p.name.encode()))
        p.spectral_u = _l2normalize(rng.standard_normal(w2d.shape[0]), eps).astype(p.data.dtype)
    u = p.spectral_u
    if update:
        for _ in range(iters):
            v = _l2normalize(w2d.T @ u, eps)
            u = _l2normalize(w2d @ v, eps)
        p.spectral_u = u.astype(p.data.dtype)
        u = p.spectral_u
    v = _l2normalize(w2d.T @ u, eps)
    u_t = Tensor(u.reshape(1, -1), dtype=p.data.dtype)
    v_t = Tensor(v.reshape(-1, 1), dtype=p.data.dtype)
    sigma = ops.matmul(ops.matmul(u_t, ops.reshape(p, w2d.shape)), v_t)
    sigma_data = float(sigma.data.item())
    if sigma_data < eps:
        # zero (or numerically null) weight: sigma floored, result is p/eps
        return ops.div(p, eps)
    return ops.div(p, ops.reshape(sigma, (1,) * p.ndim))


class Module:
    """Minimal container: attributes that are Parameters or Modules form a tree."""

    training: bool = True

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_init(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float) -> np.ndarray:
    return rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: Optional[int] = None, dilation: int = 1, bias: bool = True,
                 spectral: bool = False, gain: float = 1.0):
        dtype = get_default_dtype()
        self.weight = Parameter(_he_init(rng, (cout, cin, k, k), cin * k * k, gain), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        self.spectral = spectral
        if spectral:
            u = rng.standard_normal(cout)
            self.weight.spectral_u = (u / np.linalg.norm(u)).astype(dtype)

    def effective_weight(self) -> Tensor:
        if self.spectral:
            return spectral_normalize(self.weight, 1, update=self.training)
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding, self.dilation)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fin: int, fout: int, gain: float = 1.0):
        dtype = get_default_dtype()
        self.weight = Parameter(_he_init(rng, (fin, fout), fin, gain), dtype=dtype)
        self.bias = Parameter(np.zeros(fout), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)
