"""NeRF branch: ray sampling, field queries from shared hash features, volume rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .camera import Ray
from .hashgrid import HashGrid
from .numeric import DEFAULT_DTYPE, Mlp, MlpSpec
from .sh import sh_basis

DIR_EMBED_DEGREE = 3
DIR_EMBED_DIM = 16


@dataclass
class NerfConfig:
    sigma_hidden: tuple[int, ...] = (64,)
    color_hidden: tuple[int, ...] = (64,)
    n_samples: int = 64
    entropy_mask: float = 1e-3


class NerfField:
    """Density and colour decoders on top of a (shared) hash grid."""

    def __init__(self, grid: HashGrid, cfg: NerfConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.grid = grid
        self.cfg = cfg
        D = grid.feature_dim
        self.sigma_net = Mlp("nerf.sigma", MlpSpec(D, tuple(cfg.sigma_hidden), 1, output_activation="softplus"),
                             rng, dtype)
        self.color_net = Mlp("nerf.color",
                             MlpSpec(D + DIR_EMBED_DIM, tuple(cfg.color_hidden), 3, output_activation="sigmoid"),
                             rng, dtype)

    @property
    def decoder_blocks(self):
        return self.sigma_net.blocks + self.color_net.blocks

    def query(self, x: np.ndarray, d: np.ndarray):
        """Return ``(sigma (N,), rgb (N, 3), f (N, D), cache)`` for points and unit directions."""
        x = np.asarray(x).reshape(-1, 3)
        d = np.asarray(d).reshape(-1, 3)
        f = self.grid.encode(x)
        instrument.count("nerf_decoder", x.shape[0])
        sig, cs = self.sigma_net.forward(f)
        emb = sh_basis(d, DIR_EMBED_DEGREE)
        rgb, cc = self.color_net.forward(np.concatenate([f, emb], axis=1))
        return sig[:, 0], rgb, f, (x, cs, cc)

    def query_backward(self, cache, g_sigma: np.ndarray, g_rgb: np.ndarray) -> None:
        x, cs, cc = cache
        D = self.grid.feature_dim
        g_f = self.sigma_net.backward(cs, g_sigma[:, None])
        g_f = g_f + self.color_net.backward(cc, g_rgb)[:, :D]
        self.grid.encode_backward(x, g_f, want_x=False)


# ------------------------------------------------------------------ sampling

@dataclass
class RaySampleSet:
    ts: np.ndarray
    deltas: np.ndarray
    xs: np.ndarray


def sample_ts(near, far, n: int, rng: np.random.Generator | None = None, mode: str = "stratified"):
    """Sample distances ``(R, n)`` between per-ray ``near``/``far``; returns ``(ts, deltas)``."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    span = (far - near)[:, None] / n
    base = np.arange(n, dtype=np.float64)[None, :]
    if mode == "uniform":
        u = np.full((near.size, n), 0.5)
    elif mode == "stratified":
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((near.size, n))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    ts = near[:, None] + (base + u) * span
    deltas = np.empty_like(ts)
    deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
    deltas[:, -1] = far - ts[:, -1]
    return ts, deltas


def sample_ray(ray: Ray, n: int, rng: np.random.Generator | None = None, mode: str = "stratified") -> RaySampleSet:
    ts, deltas = sample_ts(ray.near, ray.far, n, rng, mode)
    xs = ray.origin + ts[0, :, None] * ray.direction
    return RaySampleSet(ts[0], deltas[0], xs)


# ----------------------------------------------------------------- rendering

def point_opacity(sigma, delta):
    """Per-sample opacity ``1 - exp(-sigma * delta)``."""
    return -np.expm1(-np.asarray(sigma) * np.asarray(delta))


@dataclass
class NerfOutputs:
    color: np.ndarray       # (R, 3)
    weights: np.ndarray     # (R, N)
    alphas: np.ndarray      # (R, N)
    trans: np.ndarray       # (R, N) transmittance before each sample
    final_trans: np.ndarray  # (R,)
    ts: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray         # (R, N, 3)
    background: np.ndarray
    cache: object = field(default=None, repr=False)

    @property
    def accumulated(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def median_depth(self, far=None) -> np.ndarray:
        return median_depth(self.weights, self.ts, self.ts[:, -1] + self.deltas[:, -1] if far is None else far)


def composite(sigma, rgb, deltas, background):
    """Quadrature of the emission-absorption integral for ``(R, N)`` samples."""
    tau = sigma * deltas
    alphas = -np.expm1(-tau)
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    final = np.exp(-cum[:, -1])
    weights = trans * alphas
    color = np.einsum("rn,rnc->rc", weights, rgb) + final[:, None] * background
    return color, weights, alphas, trans, final


def render_rays(nerf: NerfField, origins, dirs, near, far, n: int | None = None,
                rng: np.random.Generator | None = None, mode: str = "stratified",
                background=(0.0, 0.0, 0.0), samples=None) -> NerfOutputs:
    """Volume-render a batch of rays. ``samples=(ts, deltas)`` reuses fixed sample positions."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = nerf.cfg.n_samples if n is None else n
    if samples is None:
        ts, deltas = sample_ts(near, far, n, rng, mode)
    else:
        ts, deltas = samples
    R, N = ts.shape
    xs = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    dd = np.broadcast_to(dirs[:, None, :], xs.shape)
    sigma, rgb, _, qcache = nerf.query(xs.reshape(-1, 3), dd.reshape(-1, 3))
    sigma = sigma.reshape(R, N)
    rgb = rgb.reshape(R, N, 3)
    bg = np.asarray(background, dtype=np.float64)
    color, weights, alphas, trans, final = composite(sigma, rgb, deltas, bg)
    return NerfOutputs(color, weights, alphas, trans, final, ts, deltas, sigma, rgb, bg, qcache)


def composite_backward(out: NerfOutputs, g_color: np.ndarray, g_alpha: np.ndarray | None = None):
    """Gradients w.r.t. per-sample density and colour."""
    g_rgb = out.weights[..., None] * g_color[:, None, :]
    cg = np.einsum("rnc,rc->rn", out.rgb, g_color)
    wc = out.weights * cg
    # suffix sums of later contributions plus the background term
    after = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    after = after + (out.final_trans * (g_color @ out.background))[:, None]
    t_next = out.trans - out.weights
    g_tau = t_next * cg - after
    if g_alpha is not None:
        g_tau = g_tau + g_alpha * (1.0 - out.alphas)
    return g_tau * out.deltas, g_rgb


def render_backward(nerf: NerfField, out: NerfOutputs, g_color: np.ndarray, g_alpha: np.ndarray | None = None,
                    g_sigma_extra: np.ndarray | None = None) -> None:
    """Backpropagate colour/opacity gradients into the hash tables and decoders."""
    g_sigma, g_rgb = composite_backward(out, g_color, g_alpha)
    if g_sigma_extra is not None:
        g_sigma = g_sigma + g_sigma_extra
    nerf.query_backward(out.cache, g_sigma.reshape(-1), g_rgb.reshape(-1, 3))


def render_ray(nerf: NerfField, ray: Ray, n: int | None = None, rng=None, mode: str = "stratified",
               background=(0.0, 0.0, 0.0)) -> NerfOutputs:
    return render_rays(nerf, ray.origin[None], ray.direction[None], ray.near, ray.far, n, rng, mode, background)


def median_depth(weights: np.ndarray, ts: np.ndarray, far) -> np.ndarray:
    """Smallest sample distance at which the cumulative weight reaches half its total.

    Rays with no weight at all fall back to ``far``.
    """
    weights = np.atleast_2d(weights)
    ts = np.atleast_2d(ts)
    total = weights.sum(axis=1)
    cum = np.cumsum(weights, axis=1)
    idx = np.argmax(cum >= 0.5 * total[:, None], axis=1)
    z = ts[np.arange(ts.shape[0]), idx]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), z.shape)
    return np.where(total > 0.0, z, far)


def ray_entropy(alphas: np.ndarray, mask_threshold: float = 1e-3, with_grad: bool = False):
    """Shannon entropy of the normalised opacity distribution along each ray.

    Rays whose summed opacity is below ``mask_threshold`` are masked to zero.
    Accepts ``(N,)`` or ``(R, N)``.
    """
    a = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
    s = a.sum(axis=1, keepdims=True)
    keep = s[:, 0] >= mask_threshold
    safe_s = np.where(s > 0, s, 1.0)
    p = a / safe_s
    logp = np.log(np.where(p > 0, p, 1.0))
    H = np.where(keep, -(p * logp).sum(axis=1), 0.0)
    if np.ndim(alphas) == 1:
        H_out = H[0]
    else:
        H_out = H
    if not with_grad:
        return H_out
    grad = -(logp + H[:, None]) / safe_s
    grad = np.where(keep[:, None], grad, 0.0)
    if np.ndim(alphas) == 1:
        grad = grad[0]
    return H_out, grad
