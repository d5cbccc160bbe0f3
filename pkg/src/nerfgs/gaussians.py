"""GS branch: residual-carrying Gaussian storage, attribute decoding, covariance and projection.

Attributes are decoded by a small MLP from the (residual-shifted) position and
the shared hash feature. The hash feature is always queried at the Gaussian's
initial position ``p``; the residual position only enters the decoder input
and the projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .numeric import DEFAULT_DTYPE, Mlp, ParamBlock, sigmoid
from .raster import Splats, screen_radius
from .sh import eval_sh_backward, eval_sh_with_cache, num_coeffs

SCALE_MIN = 1e-4
DILATION = 0.3
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class GaussianSet:
    """Per-Gaussian state: fixed anchor ``p``, trainable ``dp``/``df`` and bookkeeping."""

    def __init__(self, p: np.ndarray, feature_dim: int, dtype=DEFAULT_DTYPE, own_features: bool = False,
                 rng: np.random.Generator | None = None):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        n = p.shape[0]
        self.p = p.copy()
        self.dp = ParamBlock("gs.dp", np.zeros((n, 3), dtype=dtype))
        self.df = ParamBlock("gs.df", np.zeros((n, feature_dim), dtype=dtype))
        self.scale_offset = np.zeros(n)
        self.ids = np.arange(n, dtype=np.int64)
        self.next_id = n
        self.feature_dim = feature_dim
        self.feat: ParamBlock | None = None
        if own_features:
            rng = rng or np.random.default_rng(0)
            self.feat = ParamBlock("gs.feat", rng.uniform(-1e-4, 1e-4, size=(n, feature_dim)).astype(dtype))

    def __len__(self) -> int:
        return self.p.shape[0]

    @property
    def p_eff(self) -> np.ndarray:
        return self.p + self.dp.values

    @property
    def blocks(self) -> list[ParamBlock]:
        out = [self.dp, self.df]
        if self.feat is not None:
            out.append(self.feat)
        return out

    def append(self, p: np.ndarray, df: np.ndarray | None = None, scale_offset: np.ndarray | None = None,
               feat: np.ndarray | None = None) -> np.ndarray:
        """Add Gaussians with zero position residual; returns their new ids."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        n = p.shape[0]
        self.p = np.concatenate([self.p, p])
        self.dp.append_rows(np.zeros((n, 3)))
        self.df.append_rows(np.zeros((n, self.feature_dim)) if df is None else df)
        self.scale_offset = np.concatenate([self.scale_offset, np.zeros(n) if scale_offset is None else scale_offset])
        if self.feat is not None:
            self.feat.append_rows(np.zeros((n, self.feature_dim)) if feat is None else feat)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.ids = np.concatenate([self.ids, new_ids])
        self.next_id += n
        return new_ids

    def keep(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        self.p = self.p[mask]
        self.scale_offset = self.scale_offset[mask]
        self.ids = self.ids[mask]
        for b in self.blocks:
            b.keep_rows(mask)


@dataclass
class GaussianAttributes:
    sh: np.ndarray        # (G, K, 3)
    opacity: np.ndarray   # (G,)
    rotation: np.ndarray  # (G, 4) unit quaternions (w, x, y, z)
    scale: np.ndarray     # (G, 3)

    def __len__(self) -> int:
        return self.opacity.shape[0]


def gs_output_dim(sh_degree: int) -> int:
    return num_coeffs(sh_degree) * 3 + 1 + 4 + 3


def _normalize_position(x, bounds):
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    return 2.0 * (x - lo) / (hi - lo) - 1.0, 2.0 / (hi - lo)


def decode_attributes(net: Mlp, p, dp, f, df, bounds, sh_degree: int, scale_max: float,
                      scale_offset=None, with_cache: bool = False):
    """Decode SH, opacity, rotation and scale from ``(p + dp, f + df)``.

    The decoder sees the position mapped affinely from the scene box to
    ``[-1, 1]^3``. ``scale_offset`` is a per-Gaussian additive shift in log-scale
    (zero unless the Gaussian came from a split).
    """
    p = np.atleast_2d(p)
    pos, pos_scale = _normalize_position(p + np.atleast_2d(dp), bounds)
    feat = np.atleast_2d(f) + np.atleast_2d(df)
    raw, mcache = net.forward(np.concatenate([pos, feat], axis=1))
    K = num_coeffs(sh_degree)
    G = raw.shape[0]
    n_sh = 3 * K
    sh = raw[:, :n_sh].reshape(G, K, 3)
    opacity = sigmoid(raw[:, n_sh])
    q_raw = raw[:, n_sh + 1 : n_sh + 5]
    q_norm = np.linalg.norm(q_raw, axis=1)
    degenerate = q_norm < 1e-12
    rotation = np.where(degenerate[:, None], IDENTITY_QUAT, q_raw / np.where(degenerate, 1.0, q_norm)[:, None])
    s_raw = raw[:, n_sh + 5 : n_sh + 8]
    if scale_offset is not None:
        s_raw = s_raw + np.asarray(scale_offset)[:, None]
    s_unclamped = np.exp(s_raw)
    scale = np.clip(s_unclamped, SCALE_MIN, scale_max)
    attrs = GaussianAttributes(sh.copy(), opacity, rotation, scale)
    if not with_cache:
        return attrs
    cache = (mcache, pos_scale, K, q_norm, degenerate, rotation, opacity, scale,
             (s_unclamped >= SCALE_MIN) & (s_unclamped <= scale_max))
    return attrs, cache


def decode_backward(net: Mlp, cache, g_sh=None, g_opacity=None, g_rotation=None, g_scale=None):
    """Accumulate decoder weight gradients; return ``(grad_position, grad_feature)``."""
    mcache, pos_scale, K, q_norm, degenerate, rotation, opacity, scale, s_live = cache
    G = opacity.shape[0]
    n_sh = 3 * K
    g_raw = np.zeros((G, n_sh + 8))
    if g_sh is not None:
        g_raw[:, :n_sh] = g_sh.reshape(G, n_sh)
    if g_opacity is not None:
        g_raw[:, n_sh] = g_opacity * opacity * (1.0 - opacity)
    if g_rotation is not None:
        proj = g_rotation - rotation * np.sum(rotation * g_rotation, axis=1, keepdims=True)
        g_raw[:, n_sh + 1 : n_sh + 5] = np.where(degenerate[:, None], 0.0,
                                                   proj / np.where(degenerate, 1.0, q_norm)[:, None])
    if g_scale is not None:
        g_raw[:, n_sh + 5 : n_sh + 8] = g_scale * scale * s_live
    g_in = net.backward(mcache, g_raw)
    return g_in[:, :3] * pos_scale, g_in[:, 3:]


# ----------------------------------------------------------------- covariance

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_grad_to_quat(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def covariance(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``R S S^T R^T`` for unit quaternions ``(G, 4)`` and scales ``(G, 3)`` (single rows allowed)."""
    single = np.ndim(r) == 1
    R = quat_to_rotmat(r)
    M = R * np.atleast_2d(s)[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    return cov[0] if single else cov


def covariance_backward(r: np.ndarray, s: np.ndarray, g_cov: np.ndarray):
    """Return ``(grad_quaternion, grad_scale)`` treating ``r`` as the rotation's own parameters."""
    r = np.atleast_2d(r)
    s = np.atleast_2d(s)
    R = quat_to_rotmat(r)
    M = R * s[:, None, :]
    gM = (g_cov + np.swapaxes(g_cov, 1, 2)) @ M
    g_s = np.sum(gM * R, axis=1)
    g_R = gM * s[:, None, :]
    return _rotmat_grad_to_quat(r, g_R), g_s


# ----------------------------------------------------------------- projection

@dataclass
class ProjectionCache:
    visible: np.ndarray  # row indices of the projected Gaussians
    t: np.ndarray
    J: np.ndarray
    T: np.ndarray
    cov3d: np.ndarray
    view_dir_raw: np.ndarray
    view_norm: np.ndarray
    sh_cache: tuple
    camera: Camera
    n_total: int


def project_gaussians(p_eff: np.ndarray, cov3d: np.ndarray, sh: np.ndarray, opacity: np.ndarray,
                      ids: np.ndarray, camera: Camera):
    """EWA-project Gaussians into ``camera``; returns ``(Splats, ProjectionCache)``.

    Gaussians with depth outside ``(near, far)`` or whose 3-sigma footprint lies
    entirely outside the image are culled.
    """
    p_eff = np.atleast_2d(p_eff)
    G = p_eff.shape[0]
    t = camera.world_to_camera(p_eff)
    depth_ok = (t[:, 2] > camera.near) & (t[:, 2] < camera.far)
    idx = np.flatnonzero(depth_ok)
    tv = t[idx]
    tz = tv[:, 2]
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * tv[:, 0] / tz**2
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * tv[:, 1] / tz**2
    T = J @ camera.R
    cov2 = T @ cov3d[idx] @ np.swapaxes(T, 1, 2)
    cov2[:, 0, 0] += DILATION
    cov2[:, 1, 1] += DILATION
    mean2d = np.stack([camera.fx * tv[:, 0] / tz + camera.cx, camera.fy * tv[:, 1] / tz + camera.cy], axis=1)
    rad = screen_radius(cov2)
    on_screen = ((mean2d[:, 0] + rad > 0) & (mean2d[:, 0] - rad < camera.width)
                 & (mean2d[:, 1] + rad > 0) & (mean2d[:, 1] - rad < camera.height))
    keep = np.flatnonzero(on_screen)
    idx, tv, J, T, cov2, mean2d = idx[keep], tv[keep], J[keep], T[keep], cov2[keep], mean2d[keep]

    v = p_eff[idx] - camera.center
    vn = np.linalg.norm(v, axis=1)
    dirs = v / vn[:, None]
    color, sh_cache = eval_sh_with_cache(sh[idx], dirs)
    splats = Splats(mean2d, cov2, tv[:, 2].copy(), color, np.asarray(opacity)[idx].copy(),
                    np.asarray(ids)[idx].copy(), idx)
    cache = ProjectionCache(idx, tv, J, T, cov3d[idx], v, vn, sh_cache, camera, G)
    return splats, cache


def project_backward(cache: ProjectionCache, g_mean2d, g_cov2d, g_color, g_opacity):
    """Map splat gradients back to ``(grad_p_eff, grad_cov3d, grad_sh, grad_opacity)`` for all Gaussians."""
    cam = cache.camera
    G = cache.n_total
    idx = cache.visible
    tv = cache.t
    tx, ty, tz = tv[:, 0], tv[:, 1], tv[:, 2]

    g_t = np.zeros_like(tv)
    g_t[:, 0] = g_mean2d[:, 0] * cam.fx / tz
    g_t[:, 1] = g_mean2d[:, 1] * cam.fy / tz
    g_t[:, 2] = -(g_mean2d[:, 0] * cam.fx * tx + g_mean2d[:, 1] * cam.fy * ty) / tz**2

    # cov2d = T cov3d T^T with T = J W
    Gs = g_cov2d
    T = cache.T
    S3 = cache.cov3d
    g_cov3d_v = np.swapaxes(T, 1, 2) @ Gs @ T
    g_T = (Gs + np.swapaxes(Gs, 1, 2)) @ T @ S3
    g_J = g_T @ cam.R.T
    g_t[:, 0] += g_J[:, 0, 2] * (-cam.fx / tz**2)
    g_t[:, 1] += g_J[:, 1, 2] * (-cam.fy / tz**2)
    g_t[:, 2] += (g_J[:, 0, 0] * (-cam.fx / tz**2) + g_J[:, 0, 2] * (2 * cam.fx * tx / tz**3)
                  + g_J[:, 1, 1] * (-cam.fy / tz**2) + g_J[:, 1, 2] * (2 * cam.fy * ty / tz**3))
    g_p = g_t @ cam.R

    g_sh_v, g_dir = eval_sh_backward(cache.sh_cache, g_color)
    d = cache.view_dir_raw / cache.view_norm[:, None]
    g_p += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / cache.view_norm[:, None]

    K = g_sh_v.shape[1]
    g_p_all = np.zeros((G, 3))
    g_cov_all = np.zeros((G, 3, 3))
    g_sh_all = np.zeros((G, K, 3))
    g_op_all = np.zeros(G)
    g_p_all[idx] = g_p
    g_cov_all[idx] = g_cov3d_v
    g_sh_all[idx] = g_sh_v
    g_op_all[idx] = g_opacity
    return g_p_all, g_cov_all, g_sh_all, g_op_all


def project_points(p: np.ndarray, camera: Camera):
    """Camera-space depth and pixel coordinates of world points."""
    t = camera.world_to_camera(np.atleast_2d(p))
    tz = t[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([camera.fx * t[:, 0] / tz + camera.cx, camera.fy * t[:, 1] / tz + camera.cy], axis=1)
    return tz, uv


def in_frustum(p: np.ndarray, camera: Camera) -> np.ndarray:
    tz, uv = project_points(p, camera)
    return ((tz > camera.near) & (tz < camera.far) & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height))


def visible_high_opacity(p_eff: np.ndarray, opacity: np.ndarray, ids: np.ndarray, camera: Camera,
                         tau_op: float) -> np.ndarray:
    """Ids of Gaussians whose centre lies in the view frustum and whose opacity is at least ``tau_op``."""
    mask = in_frustum(p_eff, camera) & (np.asarray(opacity) >= tau_op)
    return np.asarray(ids)[mask]
