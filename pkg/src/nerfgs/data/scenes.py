"""Procedural analytic scenes, camera rigs and the dense-quadrature reference renderer."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numba import njit

from ..camera import Camera, ray_box_interval
from .images import read_image, write_image

SCENE_NAMES = ("tri-sphere", "box-room", "sparse-test")
SHELL_FRACTION = 0.05


class UnknownSceneError(ValueError):
    pass


@dataclass
class Primitive:
    kind: str                  # "sphere" or "box"
    center: tuple[float, float, float]
    size: float | tuple[float, float, float]  # radius, or box half-extents
    albedo: tuple[float, float, float]
    density: float

    def shell_width(self) -> float:
        # boxes use their largest half-extent so thin slabs still get a resolvable shell
        return SHELL_FRACTION * float(np.max(self.size))

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)) + self.shell_width()
        return c - h, c + h

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(x - c, axis=-1) - float(self.size)
        if self.kind == "box":
            q = np.abs(x - c) - np.asarray(self.size, dtype=np.float64)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(np.max(q, axis=-1), 0.0)
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def sigma(self, x: np.ndarray) -> np.ndarray:
        """Constant inside, raised-cosine falloff over a shell just outside the surface."""
        s = self.signed_distance(x)
        w = self.shell_width()
        u = np.clip(s / w, 0.0, 1.0)
        return self.density * 0.5 * (1.0 + np.cos(np.pi * u))


@dataclass
class AnalyticScene:
    name: str
    primitives: list[Primitive]
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.5,) * 3, (1.5,) * 3)
    n_train: int = 20
    n_heldout: int = 5

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        for p in self.primitives:
            plo, phi = p.extent()
            if np.any(plo < lo) or np.any(phi > hi):
                raise ValueError(f"primitive at {p.center} leaves the scene bounds")
            if np.any(np.asarray(p.albedo) < 0) or np.any(np.asarray(p.albedo) > 1):
                raise ValueError("albedo must lie in [0, 1]")
            if p.density < 0:
                raise ValueError("density must be non-negative")

    def field(self, x: np.ndarray):
        """Density ``(...)`` and density-weighted albedo ``(..., 3)`` at points ``x``."""
        sig = np.zeros(x.shape[:-1])
        rgb = np.zeros(x.shape[:-1] + (3,))
        for p in self.primitives:
            s = p.sigma(x)
            sig += s
            rgb += s[..., None] * np.asarray(p.albedo, dtype=np.float64)
        rgb = np.where(sig[..., None] > 0, rgb / np.where(sig > 0, sig, 1.0)[..., None], 0.0)
        return sig, rgb

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        prims = [Primitive(p["kind"], tuple(p["center"]),
                           p["size"] if np.isscalar(p["size"]) else tuple(p["size"]),
                           tuple(p["albedo"]), float(p["density"])) for p in d["primitives"]]
        return cls(d["name"], prims, tuple(d["background"]), tuple(tuple(b) for b in d["bounds"]),
                   int(d.get("n_train", 20)), int(d.get("n_heldout", 5)))


def _tri_sphere() -> AnalyticScene:
    return AnalyticScene("tri-sphere", [
        Primitive("sphere", (-0.55, 0.05, 0.0), 0.45, (0.9, 0.25, 0.2), 25.0),
        Primitive("sphere", (0.5, 0.3, 0.05), 0.4, (0.2, 0.8, 0.35), 25.0),
        Primitive("sphere", (0.05, -0.5, -0.15), 0.35, (0.25, 0.4, 0.95), 25.0),
    ])


def _box_room() -> AnalyticScene:
    return AnalyticScene("box-room", [
        Primitive("box", (0.0, 0.0, -1.0), (1.2, 1.2, 0.12), (0.75, 0.7, 0.6), 25.0),
        Primitive("box", (0.0, 1.1, -0.2), (1.2, 0.12, 0.7), (0.55, 0.6, 0.75), 25.0),
        Primitive("sphere", (-0.35, -0.2, -0.4), 0.4, (0.9, 0.3, 0.25), 25.0),
        Primitive("box", (0.45, -0.1, -0.55), (0.25, 0.25, 0.3), (0.3, 0.75, 0.4), 25.0),
    ])


def _sparse_test() -> AnalyticScene:
    return AnalyticScene("sparse-test", [
        Primitive("sphere", (-0.4, 0.0, 0.0), 0.5, (0.85, 0.6, 0.2), 25.0),
        Primitive("box", (0.55, 0.1, -0.1), (0.3, 0.3, 0.3), (0.3, 0.5, 0.9), 25.0),
    ], n_train=8)


def _random_scene(seed: int) -> AnalyticScene:
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(int(rng.integers(2, 5))):
        r = float(rng.uniform(0.2, 0.45))
        c = rng.uniform(-1.0 + r, 1.0 - r, size=3)
        prims.append(Primitive("sphere", tuple(c.tolist()), r, tuple(rng.uniform(0.1, 0.95, 3).tolist()), 25.0))
    return AnalyticScene(f"seed-{seed}", prims)


def generate_scene(spec: str | int) -> AnalyticScene:
    """Build a named fixture scene, or a random sphere scene from an integer seed."""
    if isinstance(spec, (int, np.integer)) or (isinstance(spec, str) and spec.isdigit()):
        return _random_scene(int(spec))
    builders = {"tri-sphere": _tri_sphere, "box-room": _box_room, "sparse-test": _sparse_test}
    if spec not in builders:
        raise UnknownSceneError(f"unknown scene spec {spec!r}; known specs: {', '.join(SCENE_NAMES)}")
    return builders[spec]()


def camera_rig(n_train: int, n_heldout: int = 5, width: int = 64, height: int = 64, radius: float = 4.0,
               fov_deg: float = 45.0) -> tuple[list[Camera], list[int], list[int]]:
    """Cameras on a ring around the origin looking inward (z up).

    Training views alternate between two elevations; held-out views sit at an
    intermediate elevation and at azimuths between training views.
    """
    cams = []
    train, held = [], []
    for i in range(n_train):
        az = 2 * np.pi * i / n_train
        el = np.radians(20.0 if i % 2 == 0 else 38.0)
        cams.append(_ring_camera(az, el, radius, width, height, fov_deg))
        train.append(len(cams) - 1)
    for j in range(n_heldout):
        az = 2 * np.pi * (j + 0.5) / n_heldout + np.radians(9.0)
        cams.append(_ring_camera(az, np.radians(28.0), radius, width, height, fov_deg))
        held.append(len(cams) - 1)
    return cams, train, held


def _ring_camera(az, el, radius, width, height, fov_deg) -> Camera:
    eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), width, height, fov_deg)


def _pack(scene: AnalyticScene):
    n = len(scene.primitives)
    kinds = np.zeros(n, dtype=np.int64)
    geo = np.zeros((n, 8))  # center(3), size(3), density, shell width
    albedo = np.zeros((n, 3))
    for i, p in enumerate(scene.primitives):
        kinds[i] = 0 if p.kind == "sphere" else 1
        geo[i, :3] = p.center
        geo[i, 3:6] = np.broadcast_to(np.asarray(p.size, dtype=np.float64), (3,))
        geo[i, 6] = p.density
        geo[i, 7] = p.shell_width()
        albedo[i] = p.albedo
    return kinds, geo, albedo


@njit(cache=True)
def _march(o, d, t0, t1, n, kinds, geo, albedo, bg, out):
    for r in range(o.shape[0]):
        if not t1[r] > t0[r]:
            out[r] = bg
            continue
        dt = (t1[r] - t0[r]) / n
        T = 1.0
        acc0 = acc1 = acc2 = 0.0
        for i in range(n):
            t = t0[r] + (i + 0.5) * dt
            sig = c0 = c1 = c2 = 0.0
            for k in range(kinds.shape[0]):
                q0 = o[r, 0] + t * d[r, 0] - geo[k, 0]
                q1 = o[r, 1] + t * d[r, 1] - geo[k, 1]
                q2 = o[r, 2] + t * d[r, 2] - geo[k, 2]
                if kinds[k] == 0:
                    sd = np.sqrt(q0 * q0 + q1 * q1 + q2 * q2) - geo[k, 3]
                else:
                    a0 = abs(q0) - geo[k, 3]
                    a1 = abs(q1) - geo[k, 4]
                    a2 = abs(q2) - geo[k, 5]
                    m0, m1, m2 = max(a0, 0.0), max(a1, 0.0), max(a2, 0.0)
                    sd = np.sqrt(m0 * m0 + m1 * m1 + m2 * m2) + min(max(a0, max(a1, a2)), 0.0)
                if sd >= geo[k, 7]:
                    continue
                if sd <= 0.0:
                    s = geo[k, 6]
                else:
                    s = geo[k, 6] * 0.5 * (1.0 + np.cos(np.pi * sd / geo[k, 7]))
                sig += s
                c0 += s * albedo[k, 0]
                c1 += s * albedo[k, 1]
                c2 += s * albedo[k, 2]
            if sig > 0.0:
                alpha = -np.expm1(-sig * dt)
                w = T * alpha / sig
                acc0 += w * c0
                acc1 += w * c1
                acc2 += w * c2
                T *= 1.0 - alpha
        out[r, 0] = acc0 + T * bg[0]
        out[r, 1] = acc1 + T * bg[1]
        out[r, 2] = acc2 + T * bg[2]


def render_reference(scene: AnalyticScene, camera: Camera, samples_per_ray: int = 1024) -> np.ndarray:
    """Ground truth by uniform midpoint quadrature of the analytic field inside the scene box."""
    if samples_per_ray < 64:
        raise ValueError("reference rendering needs at least 64 samples per ray")
    o, d = camera.all_rays()
    t0, t1 = ray_box_interval(o, d, scene.bounds[0], scene.bounds[1], near=camera.near)
    bg = np.asarray(scene.background, dtype=np.float64)
    out = np.empty((o.shape[0], 3))
    kinds, geo, albedo = _pack(scene)
    _march(np.ascontiguousarray(o), np.ascontiguousarray(d), t0, t1, int(samples_per_ray), kinds, geo, albedo,
           bg, out)
    return out.reshape(camera.height, camera.width, 3)


@dataclass
class Dataset:
    scene: AnalyticScene
    cameras: list[Camera]
    images: list[np.ndarray]
    train: list[int]
    heldout: list[int]

    def __post_init__(self):
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError("image size does not match its camera")

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.scene.background, dtype=np.float64)

    def subset(self, n_train: int) -> "Dataset":
        """Keep the first ``n_train`` training views (evenly spread) and all held-out views."""
        idx = np.linspace(0, len(self.train), n_train, endpoint=False).astype(int)
        return Dataset(self.scene, self.cameras, self.images, [self.train[i] for i in idx], list(self.heldout))


def build_dataset(spec: str | int, n_train: int | None = None, n_heldout: int | None = None,
                  width: int = 64, height: int = 64, spp: int = 1024) -> Dataset:
    scene = generate_scene(spec)
    n_train = scene.n_train if n_train is None else n_train
    n_heldout = scene.n_heldout if n_heldout is None else n_heldout
    cams, train, held = camera_rig(n_train, n_heldout, width, height)
    images = [render_reference(scene, c, spp) for c in cams]
    return Dataset(scene, cams, images, train, held)


def save_dataset(ds: Dataset, out: str | Path) -> None:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(ds.images):
        name = f"images/{'train' if i in ds.train else 'heldout'}_{i:03d}.png"
        write_image(out / name, img)
        names.append(name)
    cams = {"cameras": [c.to_dict() for c in ds.cameras], "images": names,
            "train": list(map(int, ds.train)), "heldout": list(map(int, ds.heldout))}
    (out / "cameras.json").write_text(json.dumps(cams, indent=1))
    (out / "scene.json").write_text(json.dumps(ds.scene.to_dict(), indent=1))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not (path / "cameras.json").is_file() or not (path / "scene.json").is_file():
        raise FileNotFoundError(f"{path} is not a dataset directory (cameras.json/scene.json missing)")
    meta = json.loads((path / "cameras.json").read_text())
    scene = AnalyticScene.from_dict(json.loads((path / "scene.json").read_text()))
    cams = [Camera.from_dict(c) for c in meta["cameras"]]
    images = [read_image(path / n) for n in meta["images"]]
    return Dataset(scene, cams, images, meta["train"], meta["heldout"])
