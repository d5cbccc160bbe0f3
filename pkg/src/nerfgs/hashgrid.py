"""Multiresolution hash feature grid with analytic gradients.

Level ``l`` has ``R_l`` vertices per axis over the scene AABB; the normalised
coordinate is scaled by ``R_l - 1`` and the eight surrounding vertices are
blended trilinearly. Levels whose dense vertex grid fits in the table are
indexed directly, the rest through the XOR-prime spatial hash.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import instrument
from .numeric import DEFAULT_DTYPE, NonFiniteValueError, ParamBlock

PRIMES = (1, 2654435761, 805459861)


@dataclass
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size_log2: int | list[int] = 15
    base_resolution: int = 16
    finest_resolution: int = 512
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.5,) * 3, (1.5,) * 3)

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        sizes = self.table_sizes_log2
        if len(sizes) != self.levels:
            raise ValueError("table_size_log2 list must have one entry per level")
        res = self.resolutions
        if self.levels > 1 and np.any(np.diff(res) <= 0):
            raise ValueError(f"level resolutions must be strictly increasing, got {res.tolist()}")
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        if np.any(hi <= lo):
            raise ValueError("bounds must have positive extent on every axis")

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def table_sizes_log2(self) -> list[int]:
        s = self.table_size_log2
        return [int(s)] * self.levels if np.isscalar(s) else [int(v) for v in s]

    @property
    def per_level_scale(self) -> float:
        if self.levels == 1:
            return 1.0
        return float(np.exp(np.log(self.finest_resolution / self.base_resolution) / (self.levels - 1)))

    @property
    def resolutions(self) -> np.ndarray:
        b = self.per_level_scale
        return np.array([int(np.floor(self.base_resolution * b**l + 1e-9)) for l in range(self.levels)],
                        dtype=np.int64)

    @property
    def dense(self) -> np.ndarray:
        sizes = np.array([1 << s for s in self.table_sizes_log2], dtype=np.int64)
        return self.resolutions**3 <= sizes


@njit(cache=True)
def _index(ci, cj, ck, R, dense, mask):
    if dense:
        return ci * R * R + cj * R + ck
    return ((ci * 1) ^ (cj * 2654435761) ^ (ck * 805459861)) & mask


def hash_index(level: int, cell, cfg: HashGridConfig) -> int:
    """Table slot of an integer vertex at the given level."""
    ci, cj, ck = (int(c) for c in cell)
    if min(ci, cj, ck) < 0:
        raise ValueError("cell components must be non-negative")
    R = int(cfg.resolutions[level])
    mask = (1 << cfg.table_sizes_log2[level]) - 1
    if cfg.dense[level]:
        return ci * R * R + cj * R + ck
    return ((ci * PRIMES[0]) ^ (cj * PRIMES[1]) ^ (ck * PRIMES[2])) & mask


@njit(cache=True)
def _locate(u, R):
    s = R - 1
    pos = u * s
    c = np.int64(np.floor(pos))
    if c > R - 2:
        c = R - 2
    if c < 0:
        c = 0
    return c, pos - c, s


@njit(cache=True)
def _encode_kernel(xn, tables, res, dense, masks, out):
    N = xn.shape[0]
    L = tables.shape[0]
    F = tables.shape[2]
    # level-major order keeps one level's table hot in cache
    for l in range(L):
        R = res[l]
        for n in range(N):
            ci, fx, _ = _locate(xn[n, 0], R)
            cj, fy, _ = _locate(xn[n, 1], R)
            ck, fz, _ = _locate(xn[n, 2], R)
            for corner in range(8):
                a = corner >> 2
                b = (corner >> 1) & 1
                c = corner & 1
                wx = fx if a else 1.0 - fx
                wy = fy if b else 1.0 - fy
                wz = fz if c else 1.0 - fz
                w = wx * wy * wz
                idx = _index(ci + a, cj + b, ck + c, R, dense[l], masks[l])
                for f in range(F):
                    out[n, l * F + f] += w * tables[l, idx, f]


@njit(cache=True)
def _encode_backward_kernel(xn, tables, res, dense, masks, grad_f, grad_tables, grad_u, want_x):
    N = xn.shape[0]
    L = tables.shape[0]
    F = tables.shape[2]
    for l in range(L):
        R = res[l]
        for n in range(N):
            ci, fx, s = _locate(xn[n, 0], R)
            cj, fy, _ = _locate(xn[n, 1], R)
            ck, fz, _ = _locate(xn[n, 2], R)
            for corner in range(8):
                a = corner >> 2
                b = (corner >> 1) & 1
                c = corner & 1
                wx = fx if a else 1.0 - fx
                wy = fy if b else 1.0 - fy
                wz = fz if c else 1.0 - fz
                w = wx * wy * wz
                idx = _index(ci + a, cj + b, ck + c, R, dense[l], masks[l])
                dot = 0.0
                for f in range(F):
                    g = grad_f[n, l * F + f]
                    grad_tables[l, idx, f] += w * g
                    dot += g * tables[l, idx, f]
                if want_x:
                    sx = 1.0 if a else -1.0
                    sy = 1.0 if b else -1.0
                    sz = 1.0 if c else -1.0
                    grad_u[n, 0] += dot * sx * wy * wz * s
                    grad_u[n, 1] += dot * wx * sy * wz * s
                    grad_u[n, 2] += dot * wx * wy * sz * s


class HashGrid:
    """Learnable multiresolution feature table ``x -> f``.

    The per-level :class:`ParamBlock` objects are views into one stacked
    ``(levels, table_size, features)`` array so the kernels see a single buffer.
    """

    def __init__(self, cfg: HashGridConfig, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE, init_range: float = 1e-4):
        self.cfg = cfg
        sizes = [1 << s for s in cfg.table_sizes_log2]
        T = max(sizes)
        self.table = np.zeros((cfg.levels, T, cfg.features_per_level), dtype=dtype)
        if rng is not None:
            self.table[...] = rng.uniform(-init_range, init_range, size=self.table.shape)
        self.table_grad = np.zeros_like(self.table)
        self._res = cfg.resolutions
        self._dense = cfg.dense
        self._masks = np.array([s - 1 for s in sizes], dtype=np.int64)
        self._lo = np.asarray(cfg.bounds[0], dtype=np.float64)
        self._hi = np.asarray(cfg.bounds[1], dtype=np.float64)
        self.blocks = [
            ParamBlock(f"hash.level{l}", self.table[l, : sizes[l]], grads=self.table_grad[l, : sizes[l]])
            for l in range(cfg.levels)
        ]

    def __deepcopy__(self, memo):
        # per-level blocks must stay views of the copied table, not independent arrays
        new = HashGrid.__new__(HashGrid)
        memo[id(self)] = new
        for k, v in self.__dict__.items():
            if k != "blocks":
                setattr(new, k, copy.deepcopy(v, memo))
        new.blocks = []
        for l, b in enumerate(self.blocks):
            n = b.values.shape[0]
            nb = ParamBlock(b.name, new.table[l, :n], grads=new.table_grad[l, :n], adam_m=b.adam_m.copy(),
                            adam_v=b.adam_v.copy(), step_count=b.step_count, trainable=b.trainable)
            memo[id(b)] = nb
            new.blocks.append(nb)
        return new

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def load_table(self, table: np.ndarray) -> None:
        self.table[...] = table

    def normalize(self, x: np.ndarray):
        """Map world points into ``[0, 1]^3``; points outside are clamped to the box."""
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NonFiniteValueError("hash grid query with non-finite position")
        ext = self._hi - self._lo
        u = (x.reshape(-1, 3) - self._lo) / ext
        inside = (u >= 0.0) & (u <= 1.0)
        return np.clip(u, 0.0, 1.0), inside, ext

    def encode(self, x: np.ndarray, table: np.ndarray | None = None) -> np.ndarray:
        """Features for world points ``x`` of shape ``(3,)`` or ``(N, 3)``."""
        instrument.count("hash_encode", int(np.asarray(x).size // 3))
        u, _, _ = self.normalize(x)
        t = self.table if table is None else table
        out = np.zeros((u.shape[0], self.feature_dim), dtype=t.dtype)
        _encode_kernel(u, t, self._res, self._dense, self._masks, out)
        return out[0] if np.asarray(x).ndim == 1 else out

    def encode_backward(self, x: np.ndarray, grad_f: np.ndarray, want_x: bool = True,
                        grad_tables: np.ndarray | None = None):
        """Scatter ``grad_f`` into table gradients and return ``dL/dx``.

        Table gradients accumulate into ``grad_tables`` (default: this grid's
        own gradient buffer shared with its ParamBlocks).
        """
        u, inside, ext = self.normalize(x)
        g = np.ascontiguousarray(np.asarray(grad_f, dtype=self.table.dtype).reshape(u.shape[0], -1))
        gt = self.table_grad if grad_tables is None else grad_tables
        gu = np.zeros((u.shape[0], 3), dtype=self.table.dtype)
        _encode_backward_kernel(u, self.table, self._res, self._dense, self._masks, g, gt, gu, want_x)
        gx = np.where(inside, gu / ext, 0.0)
        return gx[0] if np.asarray(x).ndim == 1 else gx

    # linear maps in the table entries, used for adjointness checks
    def encode_jvp(self, x: np.ndarray, table_tangent: np.ndarray) -> np.ndarray:
        return self.encode(x, table=table_tangent)

    def encode_vjp(self, x: np.ndarray, grad_f: np.ndarray) -> np.ndarray:
        gt = np.zeros_like(self.table)
        self.encode_backward(x, grad_f, want_x=False, grad_tables=gt)
        return gt
