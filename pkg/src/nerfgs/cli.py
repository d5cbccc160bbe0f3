"""``nerfgs`` command line: scene generation, the training stages, rendering, evaluation and ablations.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import instrument
from .camera import Camera
from .config import ABLATION_NAMES, RunConfig, default_config_json, load_config
from .data.checkpoint import CheckpointError
from .data.images import UnsupportedImageFormat, write_image
from .data.metrics import psnr, ssim
from .data.scenes import UnknownSceneError, build_dataset, load_dataset, save_dataset
from .initializer import InitBudget, InitializationError
from .model import render_baked
from .nerf import render_rays
from .numeric import NonFiniteGradientError, NonFiniteValueError
from .pipeline import joint_stage, pretrain_stage, run_ablation, summarize
from .serialize import cameras_from_meta, load_baked, load_model, save_model
from .trainer import DivergenceError, initialize_gaussians, stage_rngs

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(click.ClickException):
    exit_code = EXIT_INPUT


class NumericalError(click.ClickException):
    exit_code = EXIT_NUMERIC


def _guard(fn):
    """Map library exceptions onto the documented exit codes."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (DivergenceError, NonFiniteGradientError, NonFiniteValueError) as exc:
            raise NumericalError(f"numerical failure: {exc}") from None
        except (UnknownSceneError, CheckpointError, UnsupportedImageFormat, InitializationError,
                FileNotFoundError, NotADirectoryError, PermissionError, KeyError, ValueError) as exc:
            raise InputError(str(exc)) from None

    return wrapper


def _threads(n: int | None) -> int:
    if n is None:
        n = int(os.environ.get("NERFGS_THREADS", "1"))
    if n < 1:
        raise InputError("--threads must be >= 1")
    return n


def _config(path, seed=None) -> RunConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


@click.group()
@click.option("--threads", type=int, default=None, help="Worker count (falls back to NERFGS_THREADS).")
@click.pass_context
def main(ctx, threads):
    """Hybrid NeRF / Gaussian-splatting reconstruction on procedural scenes."""
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


@main.command("default-config")
def default_config():
    """Print the complete default run configuration as JSON."""
    click.echo(default_config_json())


@main.command("gen-scene")
@click.option("--spec", required=True, help="tri-sphere, box-room, sparse-test, or an integer seed.")
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--views", type=int, default=None, help="Training views (default: the scene's own).")
@click.option("--heldout", type=int, default=None)
@click.option("--res", default="64x64", help="WxH")
@click.option("--spp", type=int, default=1024, help="Reference samples per ray.")
@_guard
def gen_scene(spec, out, views, heldout, res, spp):
    """Render a procedural scene with the reference ray marcher and write a dataset."""
    try:
        w, h = (int(v) for v in res.lower().split("x"))
    except ValueError:
        raise InputError(f"--res must look like 64x64, got {res!r}") from None
    ds = build_dataset(spec, views, heldout, w, h, spp)
    try:
        save_dataset(ds, out)
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from None
    click.echo(json.dumps({"out": str(out), "train": len(ds.train), "heldout": len(ds.heldout)}))


@main.command("pretrain-nerf")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--data", required=True, type=click.Path())
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@click.option("--iters", type=int, default=None, help="Override the epoch-derived iteration count.")
@click.option("--seed", type=int, default=None)
@click.pass_context
@_guard
def pretrain_nerf_cmd(ctx, config_path, data, out, iters, seed):
    """Fit the NeRF branch and write a checkpoint (plus a JSON-lines loss log next to it)."""
    threads = _threads(ctx.obj["threads"])
    cfg = _config(config_path, seed)
    ds = load_dataset(data)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = out.with_suffix(".loss.jsonl")
    if log.exists():
        log.unlink()
    model, curve = pretrain_stage(cfg, ds, iters, log)
    save_model(out, model, {"stage": "pretrain", "iteration": len(curve), "seed": cfg.seed, "threads": threads,
                            "config": json.loads(cfg.model_dump_json())},
               cfg.checkpoint_precision, ds.cameras)
    click.echo(json.dumps({"checkpoint": str(out), "iterations": len(curve),
                           "final_loss": curve[-1] if curve else None}))


@main.command("init-gaussians")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path())
@click.option("--budget", type=int, default=5000)
@click.option("--edge-ratio", type=float, default=0.8)
@click.option("--no-edge-init", is_flag=True, help="Uniform ray sampling (ablation).")
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@_guard
def init_gaussians_cmd(ckpt, data, budget, edge_ratio, no_edge_init, out):
    """Place Gaussians at NeRF median depths along edge-weighted rays."""
    if budget <= 0:
        raise InputError("--budget must be positive")
    model, meta, _ = load_model(ckpt)
    cfg = RunConfig.model_validate(meta["config"]) if "config" in meta else RunConfig()
    ds = load_dataset(data)
    rng = stage_rngs(cfg.seed)["init"]
    res = initialize_gaussians(model, ds, InitBudget(budget, edge_ratio), rng, edge_init=not no_edge_init)
    meta = dict(meta, stage="init", init={"budget": budget, "edge_ratio": edge_ratio, "edge_init": not no_edge_init,
                                          "kept": int(len(res.points)), "dropped": res.n_dropped})
    meta.pop("model", None)
    save_model(out, model, meta, cfg.checkpoint_precision, ds.cameras)
    click.echo(json.dumps({"checkpoint": str(out), "gaussians": int(len(res.points)), "dropped": res.n_dropped}))


@main.command("train-joint")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path())
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--ablate", multiple=True, type=click.Choice(ABLATION_NAMES), help="Ablation flag (repeatable).")
@click.option("--iters", type=int, default=None)
@click.pass_context
@_guard
def train_joint_cmd(ctx, config_path, ckpt, data, out, ablate, iters):
    """Joint optimization; writes metrics.jsonl and final.ckpt under --out."""
    threads = _threads(ctx.obj["threads"])
    model, meta, _ = load_model(ckpt)
    if config_path is not None:
        cfg = load_config(config_path)
    else:
        cfg = RunConfig.model_validate(meta["config"]) if "config" in meta else RunConfig()
    if ablate:
        cfg = cfg.with_flags(**{a: True for a in ablate})
    if model.gaussians is None:
        raise InputError("checkpoint has no Gaussians; run init-gaussians first")
    if cfg.ablation.branch_flags() != model.flags:
        model.flags = cfg.ablation.branch_flags()
        if not model.flags.feature_share and model.gaussians.feat is None:
            from .numeric import ParamBlock

            rng = np.random.default_rng(cfg.seed)
            n, D = len(model.gaussians), model.grid.feature_dim
            model.gaussians.feat = ParamBlock("gs.feat", rng.uniform(-1e-4, 1e-4, size=(n, D)))
    ds = load_dataset(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "metrics.jsonl"
    if log.exists():
        log.unlink()
    try:
        result = joint_stage(model, cfg, ds, log, iters)
    except DivergenceError as exc:
        click.echo(json.dumps({"error": "non-finite loss", "phase": exc.phase, "iteration": exc.iteration,
                               "terms": exc.detail}, default=str), err=True)
        raise
    save_model(out / "final.ckpt", model,
               {"stage": "joint", "iteration": len(result.log), "seed": cfg.seed, "threads": threads,
                "config": json.loads(cfg.model_dump_json())}, cfg.checkpoint_precision, ds.cameras)
    click.echo(json.dumps({"metrics": str(log), "checkpoint": str(out / "final.ckpt"),
                           "heldout_psnr": result.final_heldout_psnr, "heldout_ssim": result.final_heldout_ssim}))


@main.command("render")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--camera", "camera_idx", type=int, default=None)
@click.option("--pose", type=click.Path(dir_okay=False), default=None, help="JSON camera description.")
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@click.option("--branch", type=click.Choice(["gs", "nerf"]), default="gs")
@_guard
def render_cmd(ckpt, camera_idx, pose, out, branch):
    """Render one view. The GS branch uses only the frozen attributes stored in the checkpoint."""
    if (camera_idx is None) == (pose is None):
        raise InputError("give exactly one of --camera or --pose")
    instrument.reset()
    before = instrument.snapshot()
    if branch == "gs":
        baked, meta = load_baked(ckpt)
        background = meta["model"]["background"]
    else:
        model, meta, _ = load_model(ckpt)
        background = model.background
    if pose is not None:
        cam = Camera.from_dict(json.loads(Path(pose).read_text()))
    else:
        cams = cameras_from_meta(meta)
        if not 0 <= camera_idx < len(cams):
            raise InputError(f"camera index {camera_idx} out of range (checkpoint has {len(cams)} cameras)")
        cam = cams[camera_idx]
    if branch == "gs":
        img = render_baked(baked, cam, background)
    else:
        o, d = cam.all_rays()
        lo, hi = model.bounds
        from .camera import ray_box_interval

        t0, t1 = ray_box_interval(o, d, lo, hi, near=cam.near)
        img = np.tile(np.asarray(background, dtype=np.float64), (o.shape[0], 1))
        hit = t1 > t0
        for s in range(0, int(hit.sum()), 4096):
            sel = np.flatnonzero(hit)[s : s + 4096]
            img[sel] = render_rays(model.nerf, o[sel], d[sel], t0[sel], t1[sel], mode="uniform",
                                   background=background).color
        img = img.reshape(cam.height, cam.width, 3)
    write_image(out, img)
    after = instrument.snapshot()
    calls = {k: after.get(k, 0) - before.get(k, 0) for k in set(after) | set(before)}
    click.echo(json.dumps({"out": str(out), "branch": branch, "counters": calls}, sort_keys=True))


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path())
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@click.option("--split", type=click.Choice(["heldout", "train", "all"]), default="heldout")
@click.option("--save-renders", type=click.Path(file_okay=False), default=None)
@_guard
def eval_cmd(ckpt, data, out, split, save_renders):
    """Per-view and mean PSNR/SSIM of the GS branch (float renders, before quantization)."""
    model, _, _ = load_model(ckpt)
    if model.gaussians is None:
        raise InputError("checkpoint has no Gaussians to evaluate")
    ds = load_dataset(data)
    views = {"heldout": ds.heldout, "train": ds.train, "all": ds.train + ds.heldout}[split]
    rows = []
    for v in views:
        img = model.render_gs(ds.cameras[v])
        rows.append({"view": int(v), "psnr": psnr(img, ds.images[v]), "ssim": ssim(img, ds.images[v])})
        if save_renders is not None:
            Path(save_renders).mkdir(parents=True, exist_ok=True)
            np.save(Path(save_renders) / f"view_{v:03d}.npy", img)
    report = {"split": split, "views": rows,
              "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else None,
              "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else None}
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(report, indent=2))
    click.echo(json.dumps({"mean_psnr": report["mean_psnr"], "mean_ssim": report["mean_ssim"]}))


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--data", required=True, type=click.Path())
@click.option("--matrix", required=True, multiple=True, type=click.Choice(ABLATION_NAMES),
              help="Flag to ablate (repeatable); the full configuration is always included.")
@click.option("--seeds", type=int, default=3)
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--pretrain-iters", type=int, default=None)
@click.option("--joint-iters", type=int, default=None)
@_guard
def ablate_cmd(config_path, data, matrix, seeds, out, pretrain_iters, joint_iters):
    """Train the full model and each single-flag variant per seed; write ablation.json/ablation.md."""
    if seeds < 1:
        raise InputError("--seeds must be >= 1")
    cfg = load_config(config_path)
    ds = load_dataset(data)
    Path(out).mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, ds, list(matrix), list(range(cfg.seed, cfg.seed + seeds)), out,
                        pretrain_iters, joint_iters)
    table = summarize(rows)
    click.echo(json.dumps({k: v["mean_psnr"] for k, v in table.items()}))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
