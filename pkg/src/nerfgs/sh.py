"""Real spherical harmonics (bands 0-3) with the usual splatting sign convention."""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
      0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(d: np.ndarray, degree: int, with_jacobian: bool = False):
    """Basis values ``(N, K)`` for directions ``(N, 3)``; optionally ``d Y / d d`` as ``(N, K, 3)``.

    The Jacobian treats the basis as a polynomial in the direction components;
    callers handle the normalisation of ``d`` themselves.
    """
    if degree > 3:
        raise ValueError("SH degree above 3 is not supported")
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    n = d.shape[:-1]
    K = num_coeffs(degree)
    Y = np.empty(n + (K,))
    J = np.zeros(n + (K, 3)) if with_jacobian else None
    Y[..., 0] = C0
    if degree >= 1:
        Y[..., 1] = -C1 * y
        Y[..., 2] = C1 * z
        Y[..., 3] = -C1 * x
        if with_jacobian:
            J[..., 1, 1] = -C1
            J[..., 2, 2] = C1
            J[..., 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        Y[..., 4] = C2[0] * x * y
        Y[..., 5] = C2[1] * y * z
        Y[..., 6] = C2[2] * (2 * zz - xx - yy)
        Y[..., 7] = C2[3] * x * z
        Y[..., 8] = C2[4] * (xx - yy)
        if with_jacobian:
            J[..., 4, 0], J[..., 4, 1] = C2[0] * y, C2[0] * x
            J[..., 5, 1], J[..., 5, 2] = C2[1] * z, C2[1] * y
            J[..., 6, 0], J[..., 6, 1], J[..., 6, 2] = -2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z
            J[..., 7, 0], J[..., 7, 2] = C2[3] * z, C2[3] * x
            J[..., 8, 0], J[..., 8, 1] = 2 * C2[4] * x, -2 * C2[4] * y
    if degree >= 3:
        Y[..., 9] = C3[0] * y * (3 * xx - yy)
        Y[..., 10] = C3[1] * x * y * z
        Y[..., 11] = C3[2] * y * (4 * zz - xx - yy)
        Y[..., 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        Y[..., 13] = C3[4] * x * (4 * zz - xx - yy)
        Y[..., 14] = C3[5] * z * (xx - yy)
        Y[..., 15] = C3[6] * x * (xx - 3 * yy)
        if with_jacobian:
            J[..., 9, 0], J[..., 9, 1] = C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy)
            J[..., 10, 0], J[..., 10, 1], J[..., 10, 2] = C3[1] * y * z, C3[1] * x * z, C3[1] * x * y
            J[..., 11, 0] = C3[2] * (-2 * x * y)
            J[..., 11, 1] = C3[2] * (4 * zz - xx - 3 * yy)
            J[..., 11, 2] = C3[2] * 8 * y * z
            J[..., 12, 0] = C3[3] * (-6 * x * z)
            J[..., 12, 1] = C3[3] * (-6 * y * z)
            J[..., 12, 2] = C3[3] * (6 * zz - 3 * xx - 3 * yy)
            J[..., 13, 0] = C3[4] * (4 * zz - 3 * xx - yy)
            J[..., 13, 1] = C3[4] * (-2 * x * y)
            J[..., 13, 2] = C3[4] * 8 * x * z
            J[..., 14, 0], J[..., 14, 1], J[..., 14, 2] = (C3[5] * 2 * x * z, -C3[5] * 2 * y * z,
                                                           C3[5] * (xx - yy))
            J[..., 15, 0], J[..., 15, 1] = C3[6] * (3 * xx - 3 * yy), -C3[6] * 6 * x * y
    return (Y, J) if with_jacobian else Y


def eval_sh(coeffs: np.ndarray, d: np.ndarray, degree: int | None = None) -> np.ndarray:
    """RGB from SH coefficients ``(..., K, 3)`` seen along unit direction ``d``, clamped to [0, 1]."""
    return eval_sh_with_cache(coeffs, d, degree)[0]


def eval_sh_with_cache(coeffs, d, degree=None):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    K = coeffs.shape[-2]
    if degree is None:
        degree = int(round(np.sqrt(K))) - 1
    if num_coeffs(degree) != K:
        raise ValueError(f"{K} coefficients do not match SH degree {degree}")
    Y = sh_basis(d, degree)
    raw = np.einsum("...k,...kc->...c", Y, coeffs) + 0.5
    rgb = np.clip(raw, 0.0, 1.0)
    return rgb, (Y, raw, coeffs, np.asarray(d, dtype=np.float64), degree)


def eval_sh_backward(cache, grad_rgb: np.ndarray, want_dir: bool = True):
    """Return ``(grad_coeffs, grad_dir)``; the clamp passes no gradient outside (0, 1)."""
    Y, raw, coeffs, d, degree = cache
    g = grad_rgb * ((raw > 0.0) & (raw < 1.0))
    g_coeffs = Y[..., :, None] * g[..., None, :]
    g_dir = None
    if want_dir:
        _, J = sh_basis(d, degree, with_jacobian=True)
        # dRGB_c/dd = sum_k coeff_kc * J_k
        g_dir = np.einsum("...c,...kc,...kj->...j", g, coeffs, J)
    return g_coeffs, g_dir
