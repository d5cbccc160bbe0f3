"""Model <-> checkpoint conversion."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from .camera import Camera
from .data.checkpoint import ShapeMismatchError, load_checkpoint, save_checkpoint
from .hashgrid import HashGridConfig
from .model import BakedGaussians, BranchFlags, GSConfig, NerfGSModel
from .nerf import NerfConfig


def _tupled(d: dict, keys) -> dict:
    return {k: (tuple(v) if k in keys and isinstance(v, list) else v) for k, v in d.items()}


def model_config(model: NerfGSModel) -> dict:
    return {"grid": asdict(model.grid_cfg), "nerf": asdict(model.nerf.cfg), "gs": asdict(model.gs_cfg),
            "flags": asdict(model.flags), "background": model.background.tolist()}


def model_arrays(model: NerfGSModel, include_baked: bool = True) -> dict[str, np.ndarray]:
    arrays = {"hash.table": model.grid.table}
    for b in model.nerf.decoder_blocks + model.gs_net.blocks:
        arrays[b.name] = b.values
    gs = model.gaussians
    if gs is not None:
        arrays["gs.p"] = gs.p
        arrays["gs.ids"] = gs.ids
        arrays["gs.scale_offset"] = gs.scale_offset
        for b in gs.blocks:
            arrays[b.name] = b.values
        if include_baked and len(gs):
            baked = model.bake()
            for k in ("p_eff", "sh", "opacity", "rotation", "scale"):
                arrays[f"baked.{k}"] = getattr(baked, k)
    return arrays


def save_model(path: str | Path, model: NerfGSModel, meta: dict | None = None, precision: str = "float32",
               cameras: list[Camera] | None = None) -> None:
    m = dict(meta or {})
    m["model"] = model_config(model)
    if model.gaussians is not None:
        m["next_id"] = int(model.gaussians.next_id)
    if cameras is not None:
        m["cameras"] = [c.to_dict() for c in cameras]
    save_checkpoint(path, model_arrays(model), m, precision)


def build_model(cfg: dict, dtype=np.float64) -> NerfGSModel:
    grid = _tupled(cfg["grid"], ())
    grid["bounds"] = tuple(tuple(b) for b in grid["bounds"])
    if isinstance(grid["table_size_log2"], list):
        grid["table_size_log2"] = list(grid["table_size_log2"])
    return NerfGSModel(HashGridConfig(**grid),
                       NerfConfig(**_tupled(cfg["nerf"], ("sigma_hidden", "color_hidden"))),
                       GSConfig(**_tupled(cfg["gs"], ("hidden",))),
                       np.random.default_rng(0), BranchFlags(**cfg["flags"]), dtype,
                       tuple(cfg["background"]))


def _assign(block_values: np.ndarray, arr: np.ndarray, name: str) -> None:
    if block_values.shape != arr.shape:
        raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {block_values.shape}")
    block_values[...] = arr


def load_model(path: str | Path, dtype=np.float64) -> tuple[NerfGSModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns ``(model, header_meta, raw_arrays)``."""
    arrays, header = load_checkpoint(path)
    meta = header["meta"]
    model = build_model(meta["model"], dtype)
    _assign(model.grid.table, arrays["hash.table"], "hash.table")
    for b in model.nerf.decoder_blocks + model.gs_net.blocks:
        _assign(b.values, arrays[b.name], b.name)
    if "gs.p" in arrays:
        model.gaussians = None
        gs_bias = model.gs_net.blocks[-1].values.copy()
        model.set_gaussians(arrays["gs.p"], np.random.default_rng(0), init_scale=1.0)
        model.gs_net.blocks[-1].values[...] = gs_bias  # set_gaussians re-biases; restore the trained head
        gs = model.gaussians
        gs.ids = arrays["gs.ids"].astype(np.int64)
        gs.scale_offset = arrays["gs.scale_offset"].astype(np.float64)
        gs.next_id = int(meta.get("next_id", int(gs.ids.max(initial=-1)) + 1))
        for b in gs.blocks:
            _assign(b.values, arrays[b.name], b.name)
    return model, meta, arrays


def load_baked(path: str | Path) -> tuple[BakedGaussians, dict]:
    """Read only the frozen GS attributes; no network is constructed."""
    arrays, header = load_checkpoint(path)
    if "baked.p_eff" not in arrays:
        raise KeyError("checkpoint holds no Gaussians")
    baked = BakedGaussians(arrays["baked.p_eff"].astype(np.float64), arrays["baked.sh"].astype(np.float64),
                           arrays["baked.opacity"].astype(np.float64), arrays["baked.rotation"].astype(np.float64),
                           arrays["baked.scale"].astype(np.float64), arrays["gs.ids"].astype(np.int64))
    return baked, header["meta"]


def cameras_from_meta(meta: dict) -> list[Camera]:
    return [Camera.from_dict(c) for c in meta.get("cameras", [])]
