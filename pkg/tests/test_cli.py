import json

import numpy as np
import pytest
from click.testing import CliRunner

from nerfgs.cli import main
from nerfgs.config import RunConfig
from nerfgs.data import read_image


def tiny_config(tmp_path, **schedule):
    cfg = RunConfig.model_validate({
        "grid": {"levels": 4, "table_size_log2": 10, "base_resolution": 4, "finest_resolution": 32},
        "mlp": {"sigma_hidden": [16], "color_hidden": [16], "gs_hidden": [16], "n_samples": 16},
        "init": {"total_points": 300},
        "schedule": {"pretrain_batch": 128, "gs_rays_per_iter": 16, "densify_interval": 5, "eval_interval": 5,
                     "prune_interval": 10, **schedule},
    })
    path = tmp_path / "cfg.json"
    path.write_text(cfg.model_dump_json())
    return path


def run(*args, ok=True):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    if ok:
        assert res.exit_code == 0, res.output
    return res


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen-scene -> pretrain -> init -> joint, shared by the command tests."""
    d = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(d)
    run("gen-scene", "--spec", "sparse-test", "--out", d / "data", "--views", 4, "--heldout", 2,
        "--res", "16x14", "--spp", 64)
    run("pretrain-nerf", "--config", cfg, "--data", d / "data", "--out", d / "pre.ckpt", "--iters", 30)
    run("init-gaussians", "--ckpt", d / "pre.ckpt", "--data", d / "data", "--budget", 300, "--out", d / "init.ckpt")
    run("train-joint", "--config", cfg, "--ckpt", d / "init.ckpt", "--data", d / "data", "--out", d / "joint",
        "--iters", 10)
    return d


def test_default_config_prints_json():
    doc = json.loads(run("default-config").output)
    assert doc["schedule"]["joint_iters"] == 2000


def test_pipeline_artifacts(workdir):
    assert (workdir / "pre.loss.jsonl").read_text().count("\n") == 30
    lines = (workdir / "joint" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["iter"] for l in lines] == list(range(10))
    assert (workdir / "joint" / "final.ckpt").exists()


def test_gs_render_touches_no_network(workdir):
    res = run("render", "--ckpt", workdir / "joint" / "final.ckpt", "--camera", 0, "--out", workdir / "gs.png",
              "--branch", "gs")
    counters = json.loads(res.output)["counters"]
    assert counters.get("hash_encode", 0) == 0 and counters.get("nerf_decoder", 0) == 0
    assert read_image(workdir / "gs.png").shape == (14, 16, 3)


def test_nerf_render_queries_the_field(workdir):
    res = run("render", "--ckpt", workdir / "joint" / "final.ckpt", "--camera", 1, "--out", workdir / "n.ppm",
              "--branch", "nerf")
    counters = json.loads(res.output)["counters"]
    assert counters["hash_encode"] > 0 and counters["nerf_decoder"] > 0


def test_render_from_pose_file(workdir):
    from nerfgs.camera import Camera

    pose = workdir / "pose.json"
    pose.write_text(json.dumps(Camera.look_at([0, -3, 1], [0, 0, 0], width=10, height=8).to_dict()))
    run("render", "--ckpt", workdir / "joint" / "final.ckpt", "--pose", pose, "--out", workdir / "p.png")
    assert read_image(workdir / "p.png").shape == (8, 10, 3)


def test_eval_writes_report(workdir):
    res = run("eval", "--ckpt", workdir / "joint" / "final.ckpt", "--data", workdir / "data", "--out",
              workdir / "eval.json")
    report = json.loads((workdir / "eval.json").read_text())
    assert len(report["views"]) == 2 and np.isfinite(report["mean_psnr"])
    assert json.loads(res.output)["mean_psnr"] == report["mean_psnr"]


@pytest.mark.parametrize("args", [
    ("gen-scene", "--spec", "teapot", "--out", "{d}/x"),
    ("gen-scene", "--spec", "tri-sphere", "--out", "{d}/x", "--res", "big"),
    ("render", "--ckpt", "{d}/missing.ckpt", "--camera", 0, "--out", "{d}/y.png"),
    ("render", "--ckpt", "{d}/joint/final.ckpt", "--camera", 99, "--out", "{d}/y.png"),
    ("render", "--ckpt", "{d}/joint/final.ckpt", "--out", "{d}/y.png"),
    ("render", "--ckpt", "{d}/joint/final.ckpt", "--camera", 0, "--out", "{d}/y.gif"),
    ("render", "--ckpt", "{d}/pre.ckpt", "--camera", 0, "--out", "{d}/y.png"),
    ("init-gaussians", "--ckpt", "{d}/pre.ckpt", "--data", "{d}/data", "--budget", 0, "--out", "{d}/z.ckpt"),
    ("train-joint", "--ckpt", "{d}/pre.ckpt", "--data", "{d}/data", "--out", "{d}/j2", "--iters", 1),
    ("eval", "--ckpt", "{d}/joint/final.ckpt", "--data", "{d}/nothing", "--out", "{d}/e.json"),
])
def test_input_errors_exit_2(workdir, args):
    res = run(*(a.format(d=workdir) if isinstance(a, str) else a for a in args), ok=False)
    assert res.exit_code == 2, res.output


def test_corrupt_checkpoint_exit_2(workdir):
    (workdir / "junk.ckpt").write_bytes(b"not a checkpoint")
    res = run("render", "--ckpt", workdir / "junk.ckpt", "--camera", 0, "--out", workdir / "j.png", ok=False)
    assert res.exit_code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(workdir, tmp_path):
    cfg = json.loads(tiny_config(tmp_path).read_text())
    cfg["lr"]["mlp"] = 1e300
    cfg["lr"]["hash"] = 1e300
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(cfg))
    res = run("train-joint", "--config", bad, "--ckpt", workdir / "init.ckpt", "--data", workdir / "data",
              "--out", tmp_path / "j", "--iters", 5, ok=False)
    assert res.exit_code == 3, res.output


def test_bad_thread_count(workdir):
    res = run("--threads", 0, "pretrain-nerf", "--data", workdir / "data", "--out", workdir / "t.ckpt", ok=False)
    assert res.exit_code == 2


def test_eval_matches_metrics_on_saved_renders(workdir):
    from nerfgs.data import load_dataset, psnr, ssim

    run("eval", "--ckpt", workdir / "joint" / "final.ckpt", "--data", workdir / "data", "--out",
        workdir / "e2.json", "--split", "all", "--save-renders", workdir / "renders")
    report = json.loads((workdir / "e2.json").read_text())
    ds = load_dataset(workdir / "data")
    assert len(report["views"]) == len(ds.train) + len(ds.heldout)
    for row in report["views"]:
        img = np.load(workdir / "renders" / f"view_{row['view']:03d}.npy")
        assert row["psnr"] == psnr(img, ds.images[row["view"]])
        assert row["ssim"] == ssim(img, ds.images[row["view"]])


def test_ablate_table_includes_full_row(workdir, tmp_path):
    cfg = tiny_config(tmp_path)
    res = run("ablate", "--config", cfg, "--data", workdir / "data", "--matrix", "no_gs_rays", "--seeds", 1,
              "--out", tmp_path / "abl", "--pretrain-iters", 10, "--joint-iters", 5)
    means = json.loads(res.output)
    assert set(means) == {"full", "no_gs_rays"}
    table = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert table["full"]["mean_psnr"] == means["full"]
    assert "| full |" in (tmp_path / "abl" / "ablation.md").read_text()
    # the per-run checkpointless evaluation matches the eval metric definition
    lines = (tmp_path / "abl" / "seed0" / "full" / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["heldout_psnr"] == pytest.approx(means["full"], abs=1e-12)
