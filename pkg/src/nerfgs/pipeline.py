"""End-to-end stages shared by the CLI and the acceptance suite."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import AblationFlags, RunConfig
from .data.scenes import Dataset
from .initializer import InitBudget
from .model import NerfGSModel
from .trainer import (TrainResult, build_model_from_config, evaluate_views, initialize_gaussians, jsonl_writer,
                      pretrain_nerf, random_gaussians, stage_rngs, train_joint)


def pretrain_stage(cfg: RunConfig, dataset: Dataset, iters: int | None = None, log_path=None):
    model = build_model_from_config(cfg, dataset.background)
    rng = stage_rngs(cfg.seed)["pretrain"]
    write = jsonl_writer(log_path) if log_path is not None else None
    sink = (lambda it, loss: write({"iter": it, "loss": loss})) if write is not None else None
    try:
        curve = pretrain_nerf(model, dataset, cfg.schedule, cfg.lr, cfg.weights, rng, iters=iters, callback=sink)
    finally:
        if write is not None:
            write.close()
    return model, curve


def init_stage(model: NerfGSModel, cfg: RunConfig, dataset: Dataset):
    rng = stage_rngs(cfg.seed)["init"]
    if cfg.ablation.gs_only:
        random_gaussians(model, cfg.init.total_points, rng)
        return None
    budget = InitBudget(cfg.init.total_points, cfg.init.edge_ratio)
    return initialize_gaussians(model, dataset, budget, rng, edge_init=not cfg.ablation.no_edge_init)


def joint_stage(model: NerfGSModel, cfg: RunConfig, dataset: Dataset, log_path=None,
                iters: int | None = None) -> TrainResult:
    rng = stage_rngs(cfg.seed)["joint"]
    sink = jsonl_writer(log_path) if log_path is not None else None
    try:
        return train_joint(model, dataset, cfg.schedule, cfg.weights, cfg.lr, cfg.ablation, rng, sink, iters)
    finally:
        if sink is not None:
            sink.close()


def with_branch_flags(model: NerfGSModel, flags: AblationFlags) -> NerfGSModel:
    """A deep copy of a (pretrained, Gaussian-free) model with the branch wiring of ``flags``."""
    m = copy.deepcopy(model)
    m.flags = flags.branch_flags()
    return m


def run_pipeline(cfg: RunConfig, dataset: Dataset, out_dir=None, pretrain_iters: int | None = None,
                 joint_iters: int | None = None) -> tuple[NerfGSModel, TrainResult]:
    """pretrain -> init -> joint for one configuration; GS-only skips the NeRF stages."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if cfg.ablation.gs_only:
        model = build_model_from_config(cfg, dataset.background)
    else:
        model, _ = pretrain_stage(cfg, dataset, pretrain_iters,
                                  out / "pretrain_loss.jsonl" if out is not None else None)
    init_stage(model, cfg, dataset)
    result = joint_stage(model, cfg, dataset, out / "metrics.jsonl" if out is not None else None, joint_iters)
    return model, result


@dataclass
class AblationRow:
    name: str
    seed: int
    heldout_psnr: float
    heldout_ssim: float


def run_ablation(cfg: RunConfig, dataset: Dataset, flags: list[str], seeds: list[int], out_dir=None,
                 pretrain_iters: int | None = None, joint_iters: int | None = None,
                 include_full: bool = True) -> list[AblationRow]:
    """Mean held-out PSNR per (flag, seed); pretraining is shared across flags of one seed."""
    names = (["full"] if include_full else []) + list(flags)
    out = Path(out_dir) if out_dir is not None else None
    rows: list[AblationRow] = []
    for seed in seeds:
        base = cfg.model_copy(update={"seed": int(seed)}, deep=True)
        pretrained = None
        for name in names:
            run_cfg = base if name == "full" else base.with_flags(**{name: True})
            run_dir = out / f"seed{seed}" / name if out is not None else None
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
            if run_cfg.ablation.gs_only:
                model = build_model_from_config(run_cfg, dataset.background)
            else:
                if pretrained is None:
                    pretrained, _ = pretrain_stage(base, dataset, pretrain_iters)
                model = with_branch_flags(pretrained, run_cfg.ablation)
            init_stage(model, run_cfg, dataset)
            joint_stage(model, run_cfg, dataset, run_dir / "metrics.jsonl" if run_dir is not None else None,
                        joint_iters)
            ev = evaluate_views(model, dataset)
            rows.append(AblationRow(name, int(seed), ev["mean_psnr"], ev["mean_ssim"]))
    if out is not None:
        write_ablation_table(rows, out)
    return rows


def summarize(rows: list[AblationRow]) -> dict[str, dict]:
    table: dict[str, dict] = {}
    for r in rows:
        e = table.setdefault(r.name, {"psnr": {}, "ssim": {}})
        e["psnr"][r.seed] = r.heldout_psnr
        e["ssim"][r.seed] = r.heldout_ssim
    for e in table.values():
        e["mean_psnr"] = float(np.mean(list(e["psnr"].values())))
        e["mean_ssim"] = float(np.mean(list(e["ssim"].values())))
    return table


def write_ablation_table(rows: list[AblationRow], out: Path) -> None:
    table = summarize(rows)
    (out / "ablation.json").write_text(json.dumps(
        {k: {"mean_psnr": v["mean_psnr"], "mean_ssim": v["mean_ssim"],
             "psnr_per_seed": {str(s): p for s, p in v["psnr"].items()}} for k, v in table.items()}, indent=2))
    seeds = sorted({r.seed for r in rows})
    lines = ["| config | " + " | ".join(f"seed {s}" for s in seeds) + " | mean PSNR |",
             "|---" * (len(seeds) + 2) + "|"]
    for name, v in table.items():
        cells = " | ".join(f"{v['psnr'].get(s, float('nan')):.3f}" for s in seeds)
        lines.append(f"| {name} | {cells} | {v['mean_psnr']:.3f} |")
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
