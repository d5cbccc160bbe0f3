"""Edge-weighted Gaussian initialization from a pretrained NeRF branch.

Rays are drawn through high-gradient pixels (plus a uniform remainder), each is
rendered by the NeRF branch, and a Gaussian is placed at the ray's median depth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import Camera, Ray, ray_box_interval
from .instrument import count
from .nerf import NerfField, median_depth, render_rays

ACC_FLOOR = 0.1
LUMA = np.array([0.299, 0.587, 0.114])


class InitializationError(RuntimeError):
    pass


@dataclass
class EdgeMask:
    mask: np.ndarray
    view_id: int
    threshold: float


@dataclass
class InitBudget:
    total_points: int = 5000
    edge_ratio: float = 0.8

    def __post_init__(self):
        if self.total_points < 0:
            raise ValueError("total_points must be >= 0")
        if not 0.0 <= self.edge_ratio <= 1.0:
            raise ValueError("edge_ratio must lie in [0, 1]")

    @property
    def n_edge(self) -> int:
        return int(np.floor(self.edge_ratio * self.total_points))


def detect_edges(image: np.ndarray, threshold: float | None = None, view_id: int = 0) -> EdgeMask:
    """Sobel gradient magnitude on luminance; marks pixels strictly above ``threshold``.

    The default threshold is the 80th percentile of the image's magnitudes.
    """
    lum = np.asarray(image, dtype=np.float64)[..., :3] @ LUMA
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    if threshold is None:
        threshold = float(np.percentile(mag, 80.0))
    return EdgeMask(mag > threshold, view_id, float(threshold))


@dataclass
class InitRays:
    """Drawn initialization rays as parallel arrays; ``is_edge`` marks edge-pool draws."""

    view_ids: np.ndarray
    pixels: np.ndarray      # (N, 2) integer (x, y)
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    is_edge: np.ndarray

    def __len__(self) -> int:
        return int(self.view_ids.shape[0])

    def as_list(self) -> list[tuple[int, tuple[int, int], Ray]]:
        return [(int(v), (int(px[0]), int(px[1])), Ray(o, d, float(n), float(f)))
                for v, px, o, d, n, f in zip(self.view_ids, self.pixels, self.origins, self.dirs, self.near, self.far)
                if f > n]


def sample_init_rays(cameras: list[Camera], masks: list[EdgeMask], budget: InitBudget,
                     rng: np.random.Generator, bounds=None) -> InitRays:
    """Draw ``floor(ratio * total)`` edge rays and the rest uniformly over all pixels.

    Edge draws are without replacement unless the edge pool is smaller than the
    request. When no view has any edge pixel, every draw comes from the uniform
    pool. ``near``/``far`` are clipped to ``bounds`` when given.
    """
    if not cameras:
        raise ValueError("sample_init_rays needs at least one view")
    if len(masks) != len(cameras):
        raise ValueError("one edge mask per view is required")
    sizes = np.array([c.width * c.height for c in cameras], dtype=np.int64)
    for c, m in zip(cameras, masks):
        if m.mask.shape != (c.height, c.width):
            raise ValueError(f"edge mask for view {m.view_id} does not match its camera")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    edge_pool = np.concatenate([starts[i] + np.flatnonzero(m.mask.ravel()) for i, m in enumerate(masks)])
    n_edge = budget.n_edge if edge_pool.size else 0
    n_rand = budget.total_points - n_edge
    if n_edge:
        edge = rng.choice(edge_pool, size=n_edge, replace=edge_pool.size < n_edge)
    else:
        edge = np.zeros(0, dtype=np.int64)
    rand = rng.integers(0, starts[-1], size=n_rand)
    flat = np.concatenate([edge, rand]).astype(np.int64)
    views = np.searchsorted(starts, flat, side="right") - 1
    local = flat - starts[views]
    origins = np.zeros((flat.size, 3))
    dirs = np.zeros((flat.size, 3))
    near = np.zeros(flat.size)
    far = np.zeros(flat.size)
    pixels = np.zeros((flat.size, 2), dtype=np.int64)
    for v in np.unique(views):
        sel = views == v
        cam = cameras[v]
        px, py = local[sel] % cam.width, local[sel] // cam.width
        o, d = cam.pixel_rays(px, py)
        origins[sel], dirs[sel] = o, d
        pixels[sel, 0], pixels[sel, 1] = px, py
        if bounds is None:
            near[sel], far[sel] = cam.near, cam.far
        else:
            t0, t1 = ray_box_interval(o, d, bounds[0], bounds[1], near=cam.near)
            near[sel], far[sel] = t0, np.minimum(t1, cam.far)
    is_edge = np.zeros(flat.size, dtype=bool)
    is_edge[:n_edge] = True
    count("init_edge_draws", n_edge)
    count("init_random_draws", n_rand)
    return InitRays(views.astype(np.int64), pixels, origins, dirs, near, far, is_edge)


@dataclass
class InitResult:
    points: np.ndarray
    ray_index: np.ndarray     # which drawn ray produced each point
    depth: np.ndarray
    accumulated: np.ndarray   # per drawn ray
    n_dropped: int


def init_gaussians(nerf: NerfField, rays: InitRays, n_samples: int | None = None, chunk: int = 1024,
                   acc_floor: float = ACC_FLOOR) -> InitResult:
    """Place one point per ray at its NeRF median depth; drop rays with accumulated opacity below the floor.

    Sampling is deterministic (uniform midpoints) so the result is a pure
    function of the ray set and the network.
    """
    n = len(rays)
    acc = np.zeros(n)
    depth = np.zeros(n)
    valid = rays.far > rays.near
    idx = np.flatnonzero(valid)
    for s in range(0, idx.size, chunk):
        sel = idx[s : s + chunk]
        out = render_rays(nerf, rays.origins[sel], rays.dirs[sel], rays.near[sel], rays.far[sel],
                          n_samples, mode="uniform")
        acc[sel] = out.accumulated
        depth[sel] = median_depth(out.weights, out.ts, rays.far[sel])
    keep = valid & (acc >= acc_floor)
    if n and not keep.any():
        raise InitializationError(f"all {n} initialization rays were dropped (accumulated opacity < {acc_floor}); "
                                  "is the NeRF branch trained?")
    if n == 0:
        raise InitializationError("no initialization rays were drawn (0 rays)")
    kept = np.flatnonzero(keep)
    pts = rays.origins[kept] + rays.dirs[kept] * depth[kept, None]
    return InitResult(pts, kept, depth[kept], acc, int(n - kept.size))
