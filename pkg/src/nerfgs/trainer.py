"""NeRF pretraining, GS-ray selection, the joint loss, density control and the joint training loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera, ray_box_interval
from .config import AblationFlags, LearningRates, LossWeights, RunConfig, TrainSchedule
from .data.metrics import psnr, ssim
from .data.scenes import Dataset
from .gaussians import in_frustum, project_points, quat_to_rotmat, visible_high_opacity
from .initializer import InitBudget, detect_edges, init_gaussians, sample_init_rays
from .instrument import count
from .model import NerfGSModel
from .nerf import NerfOutputs, ray_entropy, render_backward, render_rays
from .numeric import AdamConfig, ParamBlock, adam_step

SPLIT_FACTOR = 1.6


class DivergenceError(RuntimeError):
    """Non-finite loss; carries the iteration and the offending report."""

    def __init__(self, phase: str, iteration: int, detail: dict | None = None):
        self.phase, self.iteration, self.detail = phase, iteration, detail or {}
        super().__init__(f"non-finite loss in {phase} at iteration {iteration}: {self.detail}")


class BookkeepingError(ValueError):
    pass


# ------------------------------------------------------------------ helpers

def _adam(block: ParamBlock, lr: float) -> None:
    if block.trainable:
        adam_step(block, AdamConfig(lr=lr))


def decayed(lr0: float, it: int, total: int, final_ratio: float) -> float:
    if total <= 1:
        return lr0
    return lr0 * final_ratio ** (it / (total - 1))


def _pixel_batch(dataset: Dataset, n: int, rng: np.random.Generator, views=None):
    """Uniformly random training pixels across views: ``(view ids, px, py)``."""
    views = dataset.train if views is None else views
    sizes = np.array([dataset.cameras[v].width * dataset.cameras[v].height for v in views])
    starts = np.concatenate([[0], np.cumsum(sizes)])
    flat = rng.integers(0, starts[-1], size=n)
    vi = np.searchsorted(starts, flat, side="right") - 1
    local = flat - starts[vi]
    widths = np.array([dataset.cameras[v].width for v in views])[vi]
    return np.asarray(views)[vi], local % widths, local // widths


def _rays_for_pixels(dataset: Dataset, views, px, py):
    o = np.zeros((len(views), 3))
    d = np.zeros((len(views), 3))
    gt = np.zeros((len(views), 3))
    near = np.zeros(len(views))
    for v in np.unique(views):
        sel = views == v
        cam = dataset.cameras[v]
        o[sel], d[sel] = cam.pixel_rays(px[sel], py[sel])
        gt[sel] = dataset.images[v][py[sel], px[sel]]
        near[sel] = cam.near
    return o, d, gt, near


# ------------------------------------------------------------- pretraining

def pretrain_nerf(model: NerfGSModel, dataset: Dataset, schedule: TrainSchedule, lr: LearningRates,
                  weights: LossWeights, rng: np.random.Generator, iters: int | None = None,
                  callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit the NeRF branch (L1 colour + entropy) on random training-ray batches.

    ``iters`` overrides the epoch-derived iteration count. Returns the loss curve.
    """
    if not dataset.train:
        raise ValueError("dataset has no training views")
    n_pix = sum(dataset.cameras[v].width * dataset.cameras[v].height for v in dataset.train)
    if iters is None:
        iters = schedule.pretrain_epochs * math.ceil(n_pix / schedule.pretrain_batch)
    lo, hi = model.bounds
    bg = model.background
    blocks = model.nerf_blocks
    curve = []
    for it in range(iters):
        views, px, py = _pixel_batch(dataset, schedule.pretrain_batch, rng)
        o, d, gt, near = _rays_for_pixels(dataset, views, px, py)
        t0, t1 = ray_box_interval(o, d, lo, hi, near=near)
        hit = t1 > t0
        # rays that miss the scene box see the background only; they carry no gradient
        miss_loss = float(np.abs(bg[None, :] - gt[~hit]).sum())
        out = render_rays(model.nerf, o[hit], d[hit], t0[hit], t1[hit], model.nerf.cfg.n_samples, rng,
                          "stratified", bg)
        R = len(views)
        diff = out.color - gt[hit]
        l_rgb = (np.abs(diff).sum() + miss_loss) / (3 * R)
        H, gH = ray_entropy(out.alphas, model.nerf.cfg.entropy_mask, with_grad=True)
        l_en = float(H.sum() / R)
        loss = l_rgb + weights.en * l_en
        if not np.isfinite(loss):
            raise DivergenceError("pretrain", it, {"rgb": l_rgb, "entropy": l_en})
        render_backward(model.nerf, out, np.sign(diff) / (3 * R), weights.en * gH / R)
        for b in model.grid.blocks:
            _adam(b, decayed(lr.hash, it, iters, lr.final_ratio))
        for b in model.nerf.decoder_blocks:
            _adam(b, decayed(lr.mlp, it, iters, lr.final_ratio))
        curve.append(float(loss))
        if callback is not None:
            callback(it, float(loss))
    for b in blocks:
        b.zero_grad()
    return curve


# ------------------------------------------------------------ initialization

def initialize_gaussians(model: NerfGSModel, dataset: Dataset, budget: InitBudget, rng: np.random.Generator,
                         edge_init: bool = True):
    """Edge-weighted (or uniform) ray draw, median-depth placement, then install on the model."""
    cams = [dataset.cameras[v] for v in dataset.train]
    if edge_init:
        masks = [detect_edges(dataset.images[v], view_id=v) for v in dataset.train]
    else:
        masks = [detect_edges(dataset.images[v], threshold=np.inf, view_id=v) for v in dataset.train]
    rays = sample_init_rays(cams, masks, budget, rng, bounds=model.bounds)
    rays.view_ids = np.asarray(dataset.train)[rays.view_ids]
    result = init_gaussians(model.nerf, rays)
    model.set_gaussians(result.points, rng)
    return result


def random_gaussians(model: NerfGSModel, n: int, rng: np.random.Generator) -> None:
    """Uniform random positions inside the scene box (the GS-only baseline)."""
    lo, hi = model.bounds
    model.set_gaussians(rng.uniform(lo, hi, size=(n, 3)), rng)


# ------------------------------------------------------------------ GS-rays

@dataclass
class GSRays:
    index: np.ndarray       # row of the source Gaussian in the current set, -1 if none
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixels: np.ndarray      # (R, 2) integer (x, y)
    t_source: np.ndarray    # distance from origin to the source centre

    def __len__(self) -> int:
        return int(self.index.shape[0])


def select_gs_rays(p_eff: np.ndarray, opacity: np.ndarray, camera: Camera, k: int, tau_op: float,
                   rng: np.random.Generator, bounds) -> GSRays:
    """Rays from the camera centre through up to ``k`` visible Gaussians with opacity >= ``tau_op``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    rows = visible_high_opacity(p_eff, opacity, np.arange(len(p_eff)), camera, tau_op)
    if rows.size == 0:
        count("gs_rays_empty")
    take = min(k, rows.size)
    chosen = np.sort(rng.choice(rows, size=take, replace=False)) if take else rows[:0]
    o = np.broadcast_to(camera.center, (take, 3)).copy()
    v = p_eff[chosen] - o
    dist = np.linalg.norm(v, axis=1)
    d = v / dist[:, None]
    t0, t1 = ray_box_interval(o, d, bounds[0], bounds[1], near=camera.near)
    # keep the source centre inside the sampled interval even if it drifted outside the box
    t0 = np.minimum(t0, np.maximum(dist - 1e-3, camera.near))
    t1 = np.maximum(t1, dist + 1e-3)
    _, uv = project_points(p_eff[chosen], camera)
    pix = np.stack([np.clip(np.floor(uv[:, 0]), 0, camera.width - 1),
                    np.clip(np.floor(uv[:, 1]), 0, camera.height - 1)], axis=1).astype(np.int64)
    return GSRays(chosen.astype(np.int64), o, d, t0, t1, pix, dist)


def random_rays(camera: Camera, k: int, rng: np.random.Generator, bounds) -> GSRays:
    """Uniformly random pixel rays with no source Gaussian."""
    px = rng.integers(0, camera.width, size=k)
    py = rng.integers(0, camera.height, size=k)
    o, d = camera.pixel_rays(px, py)
    t0, t1 = ray_box_interval(o, d, bounds[0], bounds[1], near=camera.near)
    hit = t1 > t0
    return GSRays(np.full(int(hit.sum()), -1, dtype=np.int64), o[hit], d[hit], t0[hit], t1[hit],
                  np.stack([px, py], axis=1)[hit].astype(np.int64), np.zeros(int(hit.sum())))


def nearest_sample(ts: np.ndarray, t_source: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(ts - t_source[:, None]), axis=1)


# ------------------------------------------------------------------ losses

TERMS = ("nerf_rgb", "nerf_en", "gs_rgb", "gs_ssim", "gs_vol", "joint_rgb", "joint_op", "reg_fea", "reg_pos")


@dataclass
class LossReport:
    iteration: int
    nerf_rgb: float = 0.0
    nerf_en: float = 0.0
    gs_rgb: float = 0.0
    gs_ssim: float = 0.0
    gs_vol: float = 0.0
    joint_rgb: float = 0.0
    joint_op: float = 0.0
    reg_fea: float = 0.0
    reg_pos: float = 0.0
    total: float = 0.0

    def terms(self) -> dict:
        return {k: getattr(self, k) for k in TERMS}


def weighted_total(r: LossReport, w: LossWeights) -> float:
    """The joint objective as a weighted sum of the reported terms."""
    return (r.gs_rgb + w.ssim * r.gs_ssim + w.vol * r.gs_vol
            + w.nerf * (r.nerf_rgb + w.en * r.nerf_en)
            + w.rgb * r.joint_rgb + w.op * r.joint_op + w.fea * r.reg_fea + w.pos * r.reg_pos)


@dataclass
class LossGrads:
    image: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    dp: np.ndarray
    df: np.ndarray
    nerf_color: np.ndarray | None = None
    nerf_alpha: np.ndarray | None = None


def compute_joint_losses(nerf_out: NerfOutputs | None, rays: GSRays | None, gs_image: np.ndarray, gt: np.ndarray,
                         opacity: np.ndarray, scale: np.ndarray, dp: np.ndarray, df: np.ndarray,
                         weights: LossWeights, iteration: int = 0, entropy_mask: float = 1e-3,
                         with_grad: bool = True):
    """Evaluate every term of the joint objective and (optionally) its gradients.

    Terms whose weight is zero are still reported but contribute no gradient.
    """
    H, W, _ = gs_image.shape
    G = opacity.shape[0]
    rep = LossReport(iteration)
    gr = LossGrads(np.zeros_like(gs_image), np.zeros(G), np.zeros((G, 3)), np.zeros_like(dp), np.zeros_like(df))
    # GS branch
    diff = gs_image - gt
    rep.gs_rgb = float(np.abs(diff).mean())
    gr.image += np.sign(diff) / diff.size
    if with_grad and weights.ssim > 0:
        s, g_s = ssim(gs_image, gt, with_grad=True)
        gr.image -= weights.ssim * g_s
    else:
        s = ssim(gs_image, gt)
    rep.gs_ssim = 1.0 - s
    vol = np.prod(scale, axis=1)
    rep.gs_vol = float(vol.sum())
    if weights.vol > 0 and G:
        gr.scale += weights.vol * vol[:, None] / scale
    # residual regularizers
    if G:
        rep.reg_fea = float(np.mean(np.sum(df * df, axis=1)))
        rep.reg_pos = float(np.mean(np.sum(dp * dp, axis=1)))
        if weights.fea > 0:
            gr.df += weights.fea * 2.0 * df / G
        if weights.pos > 0:
            gr.dp += weights.pos * 2.0 * dp / G
    # NeRF-side terms on the selected rays
    if nerf_out is not None and rays is not None and len(rays):
        R = len(rays)
        if nerf_out.color.shape[0] != R or rays.pixels.shape != (R, 2):
            raise BookkeepingError(f"{nerf_out.color.shape[0]} NeRF rays vs {len(rays)} ray records")
        px, py = rays.pixels[:, 0], rays.pixels[:, 1]
        if px.min() < 0 or py.min() < 0 or px.max() >= W or py.max() >= H:
            raise BookkeepingError("ray pixel outside the image")
        if rays.index.max(initial=-1) >= G:
            raise BookkeepingError("ray source index outside the Gaussian set")
        gt_pix = gt[py, px]
        gs_pix = gs_image[py, px]
        g_color = np.zeros((R, 3))
        g_alpha = np.zeros_like(nerf_out.alphas)
        d_n = nerf_out.color - gt_pix
        rep.nerf_rgb = float(np.abs(d_n).mean())
        Hr, gH = ray_entropy(nerf_out.alphas, entropy_mask, with_grad=True)
        rep.nerf_en = float(np.mean(Hr))
        if weights.nerf > 0:
            g_color += weights.nerf * np.sign(d_n) / d_n.size
            if weights.en > 0:
                g_alpha += weights.nerf * weights.en * gH / R
        d_j = nerf_out.color - gs_pix
        rep.joint_rgb = float(np.abs(d_j).mean())
        if weights.rgb > 0:
            gj = weights.rgb * np.sign(d_j) / d_j.size
            g_color += gj
            np.add.at(gr.image, (py, px), -gj)
        src = rays.index >= 0
        if src.any():
            rows = np.flatnonzero(src)
            k = nearest_sample(nerf_out.ts[rows], rays.t_source[rows])
            a_n = nerf_out.alphas[rows, k]
            a_g = opacity[rays.index[rows]]
            d_o = a_g - a_n
            rep.joint_op = float(np.abs(d_o).mean())
            if weights.op > 0:
                go = weights.op * np.sign(d_o) / rows.size
                np.add.at(gr.opacity, rays.index[rows], go)
                g_alpha[rows, k] -= go
        gr.nerf_color, gr.nerf_alpha = g_color, g_alpha
    rep.total = weighted_total(rep, weights)
    return (rep, gr) if with_grad else rep


# --------------------------------------------------------- density control

def densify_from_nerf(points: np.ndarray, alphas: np.ndarray, existing: np.ndarray, max_new: int,
                      alpha_threshold: float, r_min: float) -> np.ndarray:
    """Greedy high-opacity NeRF samples at least ``r_min`` from every existing and accepted Gaussian."""
    if r_min <= 0:
        raise ValueError("r_min must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    cand = np.flatnonzero(alphas >= alpha_threshold)
    if cand.size == 0 or max_new <= 0:
        return np.zeros((0, 3))
    cand = cand[np.argsort(-alphas[cand], kind="stable")]
    if len(existing):
        dist, _ = cKDTree(existing).query(points[cand], k=1)
        cand = cand[dist >= r_min]
    accepted: list[np.ndarray] = []
    for c in cand:
        x = points[c]
        if accepted and np.min(np.linalg.norm(np.asarray(accepted) - x, axis=1)) < r_min:
            continue
        accepted.append(x)
        if len(accepted) >= max_new:
            break
    return np.asarray(accepted).reshape(-1, 3)


def mean_nn_distance(p: np.ndarray) -> float:
    if len(p) < 2:
        return 0.0
    d, _ = cKDTree(p).query(p, k=2)
    return float(d[:, 1].mean())


def prune_mask(opacity: np.ndarray, tau_prune: float) -> np.ndarray:
    """Survivors of opacity pruning (True = keep)."""
    if not 0.0 < tau_prune < 1.0:
        raise ValueError("tau_prune must lie in (0, 1)")
    return np.asarray(opacity) >= tau_prune


def split_positions(p_eff: np.ndarray, rotation: np.ndarray, scale: np.ndarray, rng: np.random.Generator,
                    n_children: int = 2) -> np.ndarray:
    """Child centres drawn from each parent's Gaussian, ``(n_children * G, 3)`` grouped by child."""
    Rm = quat_to_rotmat(rotation)
    out = []
    for _ in range(n_children):
        z = rng.standard_normal(p_eff.shape) * scale
        out.append(p_eff + np.einsum("gij,gj->gi", Rm, z))
    return np.concatenate(out)


def gradient_densify(model: NerfGSModel, grad_mean: np.ndarray, tau_grad: float, attrs, rng: np.random.Generator,
                     percent_dense: float = 0.01) -> tuple[int, int]:
    """Clone small / split large Gaussians whose mean screen-space gradient exceeds ``tau_grad``.

    Clones sit at the parent's effective position with a feature residual that
    reproduces the parent's decoder feature; split children get the parent's
    log-scale shifted by ``-ln 1.6`` and the parent is removed.
    """
    gs = model.gaussians
    grad_mean = np.asarray(grad_mean)
    sel = grad_mean > tau_grad
    if not sel.any():
        return 0, 0
    big = attrs.scale.max(axis=1) > percent_dense * 0.5 * model.scene_diag
    clone = np.flatnonzero(sel & ~big)
    split = np.flatnonzero(sel & big)
    p_eff = model.p_eff()
    shared = model.flags.feature_share

    def feature_residual(parents, p_new):
        if not shared:
            return gs.df.values[parents]
        f_parent = model.grid.encode(gs.p[parents]) + gs.df.values[parents]
        return f_parent - model.grid.encode(p_new)

    n_before = len(gs)
    if clone.size:
        p_new = p_eff[clone]
        gs.append(p_new, feature_residual(clone, p_new), gs.scale_offset[clone],
                  gs.feat.values[clone] if gs.feat is not None else None)
    if split.size:
        p_new = split_positions(p_eff[split], attrs.rotation[split], attrs.scale[split], rng)
        parents = np.tile(split, 2)
        gs.append(p_new, feature_residual(parents, p_new), gs.scale_offset[parents] - np.log(SPLIT_FACTOR),
                  gs.feat.values[parents] if gs.feat is not None else None)
        keep = np.ones(len(gs), dtype=bool)
        keep[split] = False
        gs.keep(keep)
    count("densify_clone", clone.size)
    count("densify_split", split.size)
    assert len(gs) == n_before + clone.size + split.size
    return int(clone.size), int(split.size)


# ----------------------------------------------------------- joint training

@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    final_heldout_psnr: float | None = None
    final_heldout_ssim: float | None = None


def evaluate_views(model: NerfGSModel, dataset: Dataset, views=None) -> dict:
    """Per-view and mean PSNR/SSIM of the GS branch (float renders, before quantization)."""
    views = dataset.heldout if views is None else views
    rows = []
    for v in views:
        img = model.render_gs(dataset.cameras[v])
        rows.append({"view": int(v), "psnr": psnr(img, dataset.images[v]), "ssim": ssim(img, dataset.images[v])})
    return {"views": rows,
            "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
            "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan")}


def train_joint(model: NerfGSModel, dataset: Dataset, schedule: TrainSchedule, weights: LossWeights,
                lr: LearningRates, flags: AblationFlags, rng: np.random.Generator,
                log_sink: Callable[[dict], None] | None = None, iters: int | None = None) -> TrainResult:
    """Jointly optimize both branches; returns the per-iteration metric log."""
    w = flags.effective_weights(weights)
    gs = model.gaussians
    if gs is None:
        raise ValueError("install Gaussians before joint training")
    T = schedule.joint_iters if iters is None else iters
    use_nerf = not flags.gs_only
    extent = 0.5 * model.scene_diag
    gs.dp.trainable = model.flags.residual_position
    gs.df.trainable = model.flags.residual_feature
    grad_acc = np.zeros(len(gs))
    grad_cnt = np.zeros(len(gs))
    result = TrainResult()
    for it in range(T):
        v = int(dataset.train[rng.integers(len(dataset.train))])
        cam, gt = dataset.cameras[v], dataset.images[v]
        image, ctx = model.render_gs(cam, with_context=True)
        attrs = ctx.attrs
        p_eff = model.p_eff()
        nerf_out, rays = None, None
        if use_nerf:
            if flags.no_gs_rays:
                rays = random_rays(cam, schedule.gs_rays_per_iter, rng, model.bounds)
            else:
                rays = select_gs_rays(p_eff, attrs.opacity, cam, schedule.gs_rays_per_iter, schedule.tau_op, rng,
                                      model.bounds)
            if len(rays):
                nerf_out = render_rays(model.nerf, rays.origins, rays.dirs, rays.near, rays.far,
                                       model.nerf.cfg.n_samples, rng, "stratified", model.background)
        rep, g = compute_joint_losses(nerf_out, rays, image, gt, attrs.opacity, attrs.scale, gs.dp.values,
                                      gs.df.values, w, it, model.nerf.cfg.entropy_mask)
        if not np.isfinite(rep.total):
            raise DivergenceError("joint", it, asdict(rep))
        # backward through both branches; the hash tables collect gradients from each
        mean_grad = model.gs_backward(ctx, g.image, g.opacity, g.scale)
        if gs.dp.trainable:
            gs.dp.grads += g.dp
        if gs.df.trainable:
            gs.df.grads += g.df
        if nerf_out is not None:
            render_backward(model.nerf, nerf_out, g.nerf_color, g.nerf_alpha)
        visible = ctx.splats.source
        grad_acc[visible] += np.linalg.norm(mean_grad[visible], axis=1)
        grad_cnt[visible] += 1
        # optimizer step
        if use_nerf or model.flags.feature_share:
            for b in model.grid.blocks:
                _adam(b, decayed(lr.hash, it, T, lr.final_ratio))
        if use_nerf:
            for b in model.nerf.decoder_blocks:
                _adam(b, decayed(lr.mlp, it, T, lr.final_ratio))
        for b in model.gs_net.blocks:
            _adam(b, decayed(lr.mlp, it, T, lr.final_ratio))
        _adam(gs.dp, decayed(lr.position * extent, it, T, lr.final_ratio))
        _adam(gs.df, decayed(lr.feature, it, T, lr.final_ratio))
        if gs.feat is not None:
            _adam(gs.feat, decayed(lr.hash, it, T, lr.final_ratio))
        for b in model.nerf_blocks:
            b.zero_grad()
        record = {"iter": it, **rep.terms(), "total": rep.total}
        # density control
        step = it + 1
        n_nerf_new = n_clone = n_split = n_pruned = 0
        if step % schedule.densify_interval == 0 and step <= schedule.densify_until:
            if use_nerf and not flags.no_nerf_growth and not flags.no_gs_rays and nerf_out is not None:
                pts = (rays.origins[:, None, :] + nerf_out.ts[..., None] * rays.dirs[:, None, :]).reshape(-1, 3)
                r_min = 2.0 * mean_nn_distance(model.p_eff())
                new = densify_from_nerf(pts, nerf_out.alphas.reshape(-1), model.p_eff(), schedule.densify_max_new,
                                        schedule.nerf_alpha_threshold, max(r_min, 1e-6))
                if len(new):
                    gs.append(new, None, None, np.zeros((len(new), gs.feature_dim)) if gs.feat is not None else None)
                n_nerf_new = len(new)
            if not flags.no_grad_densify:
                n0 = len(attrs.opacity)
                mean = np.where(grad_cnt > 0, grad_acc / np.maximum(grad_cnt, 1), 0.0)
                mean = np.concatenate([mean, np.zeros(len(gs) - n0)])
                cur = model.decode()
                n_clone, n_split = gradient_densify(model, mean, schedule.grad_threshold, cur, rng,
                                                    schedule.percent_dense)
            grad_acc = np.zeros(len(gs))
            grad_cnt = np.zeros(len(gs))
        if step % schedule.prune_interval == 0:
            keep = prune_mask(model.decode().opacity, schedule.prune_opacity)
            n_pruned = int((~keep).sum())
            if n_pruned:
                gs.keep(keep)
                grad_acc, grad_cnt = grad_acc[keep], grad_cnt[keep]
        record.update(gaussian_count=len(gs), nerf_added=n_nerf_new, cloned=n_clone, split=n_split, pruned=n_pruned)
        if step % schedule.eval_interval == 0 or step == T:
            ev = evaluate_views(model, dataset)
            record["heldout_psnr"] = ev["mean_psnr"]
            record["heldout_ssim"] = ev["mean_ssim"]
            result.final_heldout_psnr, result.final_heldout_ssim = ev["mean_psnr"], ev["mean_ssim"]
        result.log.append(record)
        if log_sink is not None:
            log_sink(record)
    return result


# ------------------------------------------------------------------ pipeline

def build_model_from_config(cfg: RunConfig, background=(0.0, 0.0, 0.0)) -> NerfGSModel:
    rng = np.random.default_rng(cfg.seed)
    return NerfGSModel(cfg.grid.build(), cfg.nerf_config(), cfg.gs_config(), rng,
                       cfg.ablation.branch_flags(), background=background)


def stage_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent, named random streams so that each stage is reproducible on its own."""
    names = ("pretrain", "init", "joint")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def jsonl_writer(path) -> Callable[[dict], None]:
    fh = open(path, "a", buffering=1)

    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    write.close = fh.close  # type: ignore[attr-defined]
    return write
