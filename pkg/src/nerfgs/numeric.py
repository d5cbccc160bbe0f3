"""Differentiable building blocks shared by both branches.

Parameters live in :class:`ParamBlock` objects that carry their own gradient
buffer and Adam moments. Gradients are accumulated additively; only
:func:`adam_step` zeroes them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from numba import njit

DEFAULT_DTYPE = np.float64


class DimensionMismatchError(ValueError):
    def __init__(self, layer: int, expected: int, got: int):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"layer {layer}: expected input width {expected}, got {got}")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str, index: int):
        self.block = block
        self.index = index
        super().__init__(f"non-finite gradient in block {block!r} at flat index {index}")


class NonFiniteValueError(FloatingPointError):
    pass


@dataclass
class ParamBlock:
    name: str
    values: np.ndarray
    grads: np.ndarray = None  # type: ignore[assignment]
    adam_m: np.ndarray = None  # type: ignore[assignment]
    adam_v: np.ndarray = None  # type: ignore[assignment]
    step_count: int = 0
    trainable: bool = True

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        for attr in ("grads", "adam_m", "adam_v"):
            if getattr(self, attr) is None:
                setattr(self, attr, np.zeros_like(self.values))

    @classmethod
    def zeros(cls, name: str, shape: Sequence[int], dtype=DEFAULT_DTYPE) -> "ParamBlock":
        return cls(name, np.zeros(tuple(shape), dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    # Row edits are used by the per-Gaussian blocks during densify/prune.
    def keep_rows(self, mask: np.ndarray) -> None:
        self.values = np.ascontiguousarray(self.values[mask])
        self.grads = np.ascontiguousarray(self.grads[mask])
        self.adam_m = np.ascontiguousarray(self.adam_m[mask])
        self.adam_v = np.ascontiguousarray(self.adam_v[mask])

    def append_rows(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=self.values.dtype).reshape((-1,) + self.values.shape[1:])
        z = np.zeros_like(rows)
        self.values = np.concatenate([self.values, rows])
        self.grads = np.concatenate([self.grads, z])
        self.adam_m = np.concatenate([self.adam_m, z])
        self.adam_v = np.concatenate([self.adam_v, z])


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("Adam eps must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@njit(cache=True)
def _adam_kernel(x, g, m, v, lr, b1, b2, eps, c1, c2):
    for i in range(x.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        x[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        g[i] = 0.0


def adam_step(block: ParamBlock, cfg: AdamConfig) -> ParamBlock:
    """Apply one bias-corrected Adam update in place and zero the gradients."""
    g = block.grads.reshape(-1)
    finite = np.isfinite(g)
    if not finite.all():
        raise NonFiniteGradientError(block.name, int(np.flatnonzero(~finite)[0]))
    t = block.step_count + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    _adam_kernel(
        block.values.reshape(-1), g, block.adam_m.reshape(-1), block.adam_v.reshape(-1),
        float(cfg.lr), float(cfg.beta1), float(cfg.beta2), float(cfg.eps), c1, c2,
    )
    block.step_count = t
    return block


# --------------------------------------------------------------------------- MLP

Activation = Literal["none", "sigmoid", "exp", "softplus"]


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activation: Literal["relu"] = "relu"
    output_activation: Activation = "none"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all MLP widths must be >= 1, got {dims}")
        if self.output_activation not in ("none", "sigmoid", "exp", "softplus"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


def _apply_output(kind: str, z):
    if kind == "none":
        return z
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "exp":
        return np.exp(z)
    return softplus(z)


def _output_grad(kind: str, z, y):
    if kind == "none":
        return np.ones_like(z)
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "exp":
        return y
    return sigmoid(z)


def _check_weights(spec: MlpSpec, weights) -> None:
    if len(weights) != len(spec.layer_dims):
        raise DimensionMismatchError(len(weights), len(spec.layer_dims), len(weights))
    for i, ((W, b), (din, dout)) in enumerate(zip(weights, spec.layer_dims)):
        if W.shape != (din, dout) or b.shape != (dout,):
            raise DimensionMismatchError(i, din, W.shape[0])


def mlp_forward(spec: MlpSpec, weights, x: np.ndarray, return_cache: bool = False):
    """Evaluate the MLP on a vector ``(in,)`` or a batch ``(N, in)``.

    ``weights`` is a sequence of ``(W, b)`` pairs with ``W`` of shape
    ``(fan_in, fan_out)``.
    """
    _check_weights(spec, weights)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != spec.input_dim:
        raise DimensionMismatchError(0, spec.input_dim, h.shape[-1])
    acts = [h]
    pre = []
    last = len(weights) - 1
    for i, (W, b) in enumerate(weights):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else _apply_output(spec.output_activation, z)
        acts.append(h)
    y = h[0] if squeeze else h
    if return_cache:
        return y, (acts, pre, squeeze)
    return y


def mlp_backward(spec: MlpSpec, weights, x: np.ndarray, grad_output: np.ndarray, cache=None):
    """Return ``(grad_weights, grad_input)`` for a scalar loss with the given output gradient."""
    if cache is None:
        _, cache = mlp_forward(spec, weights, x, return_cache=True)
    acts, pre, squeeze = cache
    g = grad_output[None, :] if squeeze else grad_output
    if g.shape[-1] != spec.output_dim:
        raise DimensionMismatchError(len(weights) - 1, spec.output_dim, g.shape[-1])
    last = len(weights) - 1
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(weights)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        z = pre[i]
        if i == last:
            g = g * _output_grad(spec.output_activation, z, acts[i + 1])
        else:
            g = g * (z > 0.0)
        W = weights[i][0]
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        g = g @ W.T
    gx = g[0] if squeeze else g
    return grads, gx


class Mlp:
    """An MLP whose weights live in :class:`ParamBlock` objects."""

    def __init__(self, name: str, spec: MlpSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.name = name
        self.spec = spec
        self.blocks: list[ParamBlock] = []
        for i, (din, dout) in enumerate(spec.layer_dims):
            bound = np.sqrt(6.0 / (din + dout))
            W = rng.uniform(-bound, bound, size=(din, dout)).astype(dtype)
            self.blocks.append(ParamBlock(f"{name}.W{i}", W))
            self.blocks.append(ParamBlock(f"{name}.b{i}", np.zeros(dout, dtype=dtype)))

    @property
    def weights(self):
        return [(self.blocks[2 * i].values, self.blocks[2 * i + 1].values)
                for i in range(len(self.blocks) // 2)]

    def forward(self, x: np.ndarray):
        return mlp_forward(self.spec, self.weights, x, return_cache=True)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.spec, self.weights, x)

    def backward(self, cache, grad_output: np.ndarray) -> np.ndarray:
        """Accumulate weight gradients into the blocks and return the input gradient."""
        grads, gx = mlp_backward(self.spec, self.weights, None, grad_output, cache=cache)
        for i, (gW, gb) in enumerate(grads):
            self.blocks[2 * i].grads += gW
            self.blocks[2 * i + 1].grads += gb
        return gx


# ------------------------------------------------------------ gradient checking

def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    h: float = 1e-4,
    analytic: np.ndarray | None = None,
    coords: Sequence[int] | None = None,
) -> float:
    """Largest relative error between an analytic gradient and central differences.

    ``f`` maps a flat vector to a scalar; if ``analytic`` is omitted, ``f`` must
    return ``(value, gradient)``. The step for coordinate ``i`` is
    ``h * max(1, |x_i|)`` and errors are normalised by ``max(1, |analytic_i|)``.
    """
    x0 = np.array(point, dtype=np.float64).reshape(-1)

    def value(x):
        out = f(x)
        v = out[0] if isinstance(out, tuple) else out
        v = float(v)
        if not np.isfinite(v):
            raise NonFiniteValueError(f"objective is non-finite at perturbed point ({v})")
        return v

    if analytic is None:
        out = f(x0.copy())
        if not isinstance(out, tuple):
            raise TypeError("f must return (value, grad) when no analytic gradient is given")
        analytic = out[1]
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteValueError("analytic gradient is non-finite")
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        step = h * max(1.0, abs(x0[i]))
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        numeric = (value(xp) - value(xm)) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
