import copy

import numpy as np
import pytest

from nerfgs import instrument
from nerfgs.camera import Camera
from nerfgs.config import AblationFlags, LearningRates, LossWeights, TrainSchedule
from nerfgs.data.scenes import AnalyticScene, Dataset
from nerfgs.gaussians import quat_to_rotmat
from nerfgs.hashgrid import HashGridConfig
from nerfgs.model import GSConfig, NerfGSModel
from nerfgs.nerf import NerfConfig
from nerfgs.trainer import (BookkeepingError, GSRays, LossReport, compute_joint_losses, densify_from_nerf,
                            gradient_densify, prune_mask, pretrain_nerf, select_gs_rays, split_positions,
                            train_joint, weighted_total)

BOUNDS = ((-1.5,) * 3, (1.5,) * 3)


def tiny_model(seed=0, n_samples=16):
    rng = np.random.default_rng(seed)
    grid = HashGridConfig(levels=4, features_per_level=2, table_size_log2=10, base_resolution=4,
                          finest_resolution=32, bounds=BOUNDS)
    return NerfGSModel(grid, NerfConfig((16,), (16,), n_samples), GSConfig(hidden=(16,)), rng)


def constant_dataset(color=(0.3, 0.6, 0.2), size=12):
    # the camera sits inside the scene box so every pixel ray hits it
    cam = Camera.look_at([0.0, -1.0, 0.0], [0, 0, 0], width=size, height=size)
    img = np.broadcast_to(np.asarray(color, float), (size, size, 3)).copy()
    return Dataset(AnalyticScene("flat", []), [cam], [img], [0], [])


def _snapshot(model):
    blocks = model.nerf_blocks + model.gs_net.blocks
    if model.gaussians is not None:
        blocks = blocks + [model.gaussians.dp, model.gaussians.df]
    return [b.values.copy() for b in blocks], blocks


# ------------------------------------------------------------- pretraining

def test_zero_pretrain_iterations_change_nothing():
    model = tiny_model()
    before, blocks = _snapshot(model)
    curve = pretrain_nerf(model, constant_dataset(), TrainSchedule(), LearningRates(), LossWeights(),
                          np.random.default_rng(0), iters=0)
    assert curve == []
    for a, b in zip(before, blocks):
        np.testing.assert_array_equal(a, b.values)


def test_pretraining_fits_a_constant_colour():
    model = tiny_model()
    sched = TrainSchedule(pretrain_batch=64)
    curve = pretrain_nerf(model, constant_dataset(), sched, LearningRates(), LossWeights(en=0.0),
                          np.random.default_rng(1), iters=500)
    assert min(curve) < 1e-3
    # a moving average over 50 iterations must never rise between consecutive windows
    smooth = [np.mean(curve[i : i + 50]) for i in range(0, 500, 50)]
    assert all(b <= a for a, b in zip(smooth, smooth[1:]))


def test_pretrain_requires_training_views():
    ds = constant_dataset()
    ds.train = []
    with pytest.raises(ValueError):
        pretrain_nerf(tiny_model(), ds, TrainSchedule(), LearningRates(), LossWeights(), np.random.default_rng(0))


# ------------------------------------------------------------------ GS-rays

def _scatter(rng, n=200):
    return rng.uniform(-1.0, 1.0, (n, 3)), rng.uniform(0, 1, n)


def test_gs_rays_pass_through_their_sources():
    rng = np.random.default_rng(2)
    p, op = _scatter(rng)
    cam = Camera.look_at([0.0, -4.0, 0.5], [0, 0, 0], width=32, height=24)
    rays = select_gs_rays(p, op, cam, 40, 0.5, rng, BOUNDS)
    assert 0 < len(rays) <= 40 and np.all(op[rays.index] >= 0.5)
    assert len(set(rays.index.tolist())) == len(rays)
    np.testing.assert_allclose(rays.origins + rays.t_source[:, None] * rays.dirs, p[rays.index], atol=1e-9)
    assert np.all(rays.near < rays.t_source) and np.all(rays.t_source < rays.far)
    for (px, py), i in zip(rays.pixels, rays.index):
        t = cam.world_to_camera(p[i])
        assert int(np.floor(cam.fx * t[0] / t[2] + cam.cx)) == px
        assert int(np.floor(cam.fy * t[1] / t[2] + cam.cy)) == py


def test_no_gs_rays_above_max_opacity():
    rng = np.random.default_rng(3)
    p, op = _scatter(rng)
    cam = Camera.look_at([0.0, -4.0, 0.5], [0, 0, 0])
    with instrument.counting() as c:
        rays = select_gs_rays(p, op, cam, 40, op.max() + 1e-6, rng, BOUNDS)
    assert len(rays) == 0 and c["gs_rays_empty"] == 1


def test_gs_ray_count_is_capped_by_candidates():
    rng = np.random.default_rng(4)
    p, op = _scatter(rng, 10)
    cam = Camera.look_at([0.0, -4.0, 0.5], [0, 0, 0])
    assert len(select_gs_rays(p, op, cam, 1000, 0.0, rng, BOUNDS)) <= 10
    with pytest.raises(ValueError):
        select_gs_rays(p, op, cam, -1, 0.5, rng, BOUNDS)


# ------------------------------------------------------------------- losses

def _gs_inputs(rng, G=6, H=11, W=13):
    gt = rng.uniform(size=(H, W, 3))
    return gt, rng.uniform(0.1, 0.9, G), rng.uniform(0.05, 0.3, (G, 3)), rng.normal(size=(G, 3)), rng.normal(
        size=(G, 4))


def test_identical_renders_have_zero_image_losses():
    rng = np.random.default_rng(5)
    gt, op, sc, dp, df = _gs_inputs(rng)
    rep = compute_joint_losses(None, None, gt.copy(), gt, op, sc, dp, df, LossWeights(), with_grad=False)
    assert rep.gs_rgb == 0.0 and rep.gs_ssim == 0.0
    assert rep.joint_rgb == 0.0 and rep.joint_op == 0.0


def test_zero_residuals_have_zero_regularizers():
    rng = np.random.default_rng(6)
    gt, op, sc, _, _ = _gs_inputs(rng)
    rep, g = compute_joint_losses(None, None, gt, gt, op, sc, np.zeros((6, 3)), np.zeros((6, 4)), LossWeights())
    assert rep.reg_fea == 0.0 and rep.reg_pos == 0.0
    assert not g.dp.any() and not g.df.any()


def test_regularizers_are_mean_squared_norms():
    rng = np.random.default_rng(7)
    gt, op, sc, dp, df = _gs_inputs(rng)
    rep = compute_joint_losses(None, None, gt, gt, op, sc, dp, df, LossWeights(), with_grad=False)
    assert rep.reg_pos == pytest.approx(np.mean(np.sum(dp**2, axis=1)))
    assert rep.reg_fea == pytest.approx(np.mean(np.sum(df**2, axis=1)))
    assert rep.gs_vol == pytest.approx(np.sum(np.prod(sc, axis=1)))


def test_weighted_total_by_hand():
    r = LossReport(0, nerf_rgb=1.0, nerf_en=2.0, gs_rgb=3.0, gs_ssim=4.0, gs_vol=5.0, joint_rgb=6.0, joint_op=7.0,
                   reg_fea=8.0, reg_pos=9.0)
    expected = 3.0 + 0.2 * 4 + 1e-3 * 5 + 0.1 * (1.0 + 1e-4 * 2) + 0.05 * 6 + 1e-3 * 7 + 1e-4 * 8 + 1e-4 * 9
    assert weighted_total(r, LossWeights()) == pytest.approx(expected, rel=1e-15)


def test_bookkeeping_mismatch_is_reported():
    from nerfgs.nerf import NerfOutputs

    rng = np.random.default_rng(8)
    gt, op, sc, dp, df = _gs_inputs(rng)
    rays = GSRays(np.array([0, 1]), np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1)), np.zeros(2), np.ones(2),
                  np.array([[0, 0], [1, 1]]), np.full(2, 0.5))
    out = NerfOutputs.__new__(NerfOutputs)
    out.color = np.zeros((3, 3))
    with pytest.raises(BookkeepingError):
        compute_joint_losses(out, rays, gt, gt, op, sc, dp, df, LossWeights())


# --------------------------------------------------------- density control

def test_nerf_densification_respects_budget_and_spacing():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-1, 1, (3000, 3))
    alphas = rng.uniform(size=3000)
    existing = rng.uniform(-1, 1, (50, 3))
    r_min = 0.15
    new = densify_from_nerf(pts, alphas, existing, 40, 0.6, r_min)
    assert 0 < len(new) <= 40
    allp = np.concatenate([existing, new])
    for i in range(len(new)):
        d = np.linalg.norm(allp - new[i], axis=1)
        d[len(existing) + i] = np.inf
        assert d.min() >= r_min
    # every accepted point came from an above-threshold sample
    src = {tuple(x) for x in pts[alphas >= 0.6]}
    assert all(tuple(x) in src for x in new)


def test_nerf_densification_rejects_close_candidates():
    existing = np.zeros((1, 3))
    close = np.array([[0.05, 0.0, 0.0]])
    assert len(densify_from_nerf(close, [0.9], existing, 10, 0.5, 0.1)) == 0
    assert len(densify_from_nerf(close * 3, [0.9], existing, 10, 0.5, 0.1)) == 1
    # two candidates r_min / 2 apart: only the more opaque one survives
    pair = np.array([[1.0, 0, 0], [1.05, 0, 0]])
    np.testing.assert_array_equal(densify_from_nerf(pair, [0.7, 0.9], existing, 10, 0.5, 0.1), pair[1:])


def test_nerf_densification_edge_cases():
    assert densify_from_nerf(np.ones((2, 3)), [0.1, 0.2], np.zeros((0, 3)), 5, 0.5, 0.1).shape == (0, 3)
    assert densify_from_nerf(np.ones((2, 3)), [0.9, 0.9], np.zeros((0, 3)), 0, 0.5, 0.1).shape == (0, 3)
    with pytest.raises(ValueError):
        densify_from_nerf(np.ones((2, 3)), [0.9, 0.9], np.zeros((0, 3)), 5, 0.5, 0.0)


def test_prune_matches_brute_force():
    op = np.random.default_rng(10).uniform(size=500)
    keep = prune_mask(op, 0.3)
    assert keep.tolist() == [o >= 0.3 for o in op]
    assert prune_mask(np.array([0.005, 0.004]), 0.005).tolist() == [True, False]
    with pytest.raises(ValueError):
        prune_mask(op, 1.0)


def test_split_children_sample_the_parent():
    rng = np.random.default_rng(11)
    q = np.array([[0.9, 0.1, -0.3, 0.2]])
    q /= np.linalg.norm(q)
    s = np.array([[0.3, 0.1, 0.05]])
    p = np.array([[0.2, -0.4, 0.7]])
    n = 200_000
    kids = split_positions(np.repeat(p, n, 0), np.repeat(q, n, 0), np.repeat(s, n, 0), rng)
    assert kids.shape == (2 * n, 3)
    R = quat_to_rotmat(q)[0]
    cov = R @ np.diag(s[0] ** 2) @ R.T
    np.testing.assert_allclose(kids.mean(axis=0), p[0], atol=4 * s.max() / np.sqrt(2 * n))
    np.testing.assert_allclose(np.cov(kids.T), cov, atol=0.02 * s.max() ** 2)


def _model_with_gaussians(n=30, seed=12):
    model = tiny_model(seed)
    rng = np.random.default_rng(seed)
    model.set_gaussians(rng.uniform(-1, 1, (n, 3)), rng)
    return model, rng


@pytest.mark.parametrize("tau", [0.0, np.inf])
def test_gradient_densify_with_no_selected_gaussians(tau):
    model, rng = _model_with_gaussians()
    grads = np.zeros(30) if tau == 0.0 else np.full(30, 1e3)
    assert gradient_densify(model, grads, tau, model.decode(), rng) == (0, 0)
    assert len(model.gaussians) == 30


def test_gradient_densify_counts_and_clone_positions():
    model, rng = _model_with_gaussians()
    attrs = model.decode()
    grads = np.zeros(30)
    grads[[1, 4, 9]] = 1.0
    before = model.p_eff()
    # a huge percent_dense makes every Gaussian "small", so all three are cloned
    with instrument.counting() as c:
        n_clone, n_split = gradient_densify(model, grads, 0.5, attrs, rng, percent_dense=1e6)
    assert (n_clone, n_split) == (3, 0) and c["densify_clone"] == 3
    assert len(model.gaussians) == 33
    np.testing.assert_allclose(model.p_eff()[30:], before[[1, 4, 9]], atol=1e-15)
    # clones reproduce the parent's decoded attributes
    after = model.decode()
    np.testing.assert_allclose(after.opacity[30:], attrs.opacity[[1, 4, 9]], atol=1e-12)


def test_gradient_densify_split_replaces_parents():
    model, rng = _model_with_gaussians()
    attrs = model.decode()
    grads = np.zeros(30)
    grads[[2, 3]] = 1.0
    ids_before = model.gaussians.ids.copy()
    n_clone, n_split = gradient_densify(model, grads, 0.5, attrs, rng, percent_dense=1e-9)
    assert (n_clone, n_split) == (0, 2)
    assert len(model.gaussians) == 32
    assert not set(ids_before[[2, 3]]) & set(model.gaussians.ids.tolist())


# ----------------------------------------------------------- joint training

def test_zero_joint_iterations_change_nothing():
    model, rng = _model_with_gaussians()
    before, blocks = _snapshot(model)
    res = train_joint(model, constant_dataset(), TrainSchedule(), LossWeights(), LearningRates(), AblationFlags(),
                      rng, iters=0)
    assert res.log == []
    for a, b in zip(before, blocks):
        np.testing.assert_array_equal(a, b.values)


def test_joint_training_needs_gaussians():
    with pytest.raises(ValueError):
        train_joint(tiny_model(), constant_dataset(), TrainSchedule(), LossWeights(), LearningRates(),
                    AblationFlags(), np.random.default_rng(0), iters=1)


def test_short_joint_run_logs_every_iteration():
    model, rng = _model_with_gaussians()
    seen = []
    res = train_joint(copy.deepcopy(model), constant_dataset(), TrainSchedule(eval_interval=5, gs_rays_per_iter=16),
                      LossWeights(), LearningRates(), AblationFlags(), rng, log_sink=seen.append, iters=5)
    assert [r["iter"] for r in res.log] == list(range(5)) and seen == res.log
    assert all(np.isfinite(r["total"]) for r in res.log)
    # no held-out views: the evaluation is defined but empty
    assert np.isnan(res.final_heldout_psnr)


def test_pretraining_loss_decreases_on_a_sphere():
    from nerfgs.data.scenes import Primitive, camera_rig, render_reference

    scene = AnalyticScene("ball", [Primitive("sphere", (0, 0, 0), 0.7, (0.8, 0.4, 0.2), 25.0)])
    cams, train, _ = camera_rig(4, 0, 16, 16)
    ds = Dataset(scene, cams, [render_reference(scene, c, 64) for c in cams], train, [])
    curve = pretrain_nerf(tiny_model(), ds, TrainSchedule(pretrain_batch=128), LearningRates(), LossWeights(),
                          np.random.default_rng(2), iters=300)
    smooth = [np.mean(curve[i : i + 50]) for i in range(0, 300, 50)]
    assert all(b <= a for a, b in zip(smooth, smooth[1:])), smooth
