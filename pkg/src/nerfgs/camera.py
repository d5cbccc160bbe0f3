"""Pinhole cameras and rays (x right, y down, z forward in camera space)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world-to-camera rotation (3, 3)
    t: np.ndarray  # world-to-camera translation (3,)
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), width=64, height=64, fov_deg=45.0,
                near=0.05, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f /= np.linalg.norm(f)
        r = np.cross(f, np.asarray(up, dtype=np.float64))
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        R = np.stack([r, d, f])
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(focal, focal, width / 2.0, height / 2.0, R, -R @ eye, width, height, near, far)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_camera(self, x: np.ndarray) -> np.ndarray:
        return x @ self.R.T + self.t

    def pixel_rays(self, px: np.ndarray, py: np.ndarray):
        """Unit world-space rays through pixel centres ``(px + 0.5, py + 0.5)``."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        dc = np.stack([(px + 0.5 - self.cx) / self.fx, (py + 0.5 - self.cy) / self.fy,
                       np.ones_like(px)], axis=-1)
        d = dc @ self.R
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def all_rays(self):
        py, px = np.mgrid[0 : self.height, 0 : self.width]
        return self.pixel_rays(px.reshape(-1), py.reshape(-1))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.R.tolist(), "t": self.t.tolist(), "width": self.width,
                "height": self.height, "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.array(d["R"]), np.array(d["t"]), int(d["width"]), int(d["height"]),
                   float(d.get("near", 0.05)), float(d.get("far", 100.0)))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError("ray near must be < far")


def ray_box_interval(o: np.ndarray, d: np.ndarray, lo, hi, near: float = 0.0):
    """Entry/exit distances of rays ``(N, 3)`` against an AABB; misses get ``t0 >= t1``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    ta = np.where(np.isnan(ta), -np.inf, ta)
    tb = np.where(np.isnan(tb), np.inf, tb)
    t0 = np.max(np.minimum(ta, tb), axis=-1)
    t1 = np.min(np.maximum(ta, tb), axis=-1)
    return np.maximum(t0, near), t1
