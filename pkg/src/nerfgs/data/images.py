"""8-bit PNG / binary PPM image IO with float images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class UnsupportedImageFormat(ValueError):
    pass


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"\x89PNG"):
        fmt = "PNG"
    elif head.startswith(b"P6"):
        fmt = "PPM"
    else:
        raise UnsupportedImageFormat(f"{path}: only 8-bit PNG and binary PPM (P6) are supported")
    with Image.open(path) as im:
        if fmt == "PNG" and im.mode not in ("RGB", "RGBA", "L"):
            raise UnsupportedImageFormat(f"{path}: unsupported PNG mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".png", ".ppm"):
        raise UnsupportedImageFormat(f"{path}: write .png or .ppm")
    q = np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG" if suffix == ".png" else "PPM")
