"""The dual-branch model: shared hash grid, NeRF decoders, Gaussian decoder and Gaussian set."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .gaussians import (GaussianAttributes, GaussianSet, covariance, covariance_backward, decode_attributes,
                        decode_backward, gs_output_dim, project_backward, project_gaussians)
from .hashgrid import HashGrid, HashGridConfig
from .nerf import NerfConfig, NerfField
from .numeric import DEFAULT_DTYPE, Mlp, MlpSpec, ParamBlock
from .raster import RasterRecords, Splats, rasterize, rasterize_backward


@dataclass
class GSConfig:
    sh_degree: int = 1
    hidden: tuple[int, ...] = (64,)
    tau_op: float = 0.5
    init_opacity: float = 0.1
    tiled: bool = True


@dataclass
class BranchFlags:
    feature_share: bool = True
    residual_feature: bool = True
    residual_position: bool = True


@dataclass
class GSContext:
    """Everything the GS backward pass needs from one forward render."""

    attrs: GaussianAttributes
    decode_cache: tuple
    feats_source: str
    proj_cache: object
    records: RasterRecords
    splats: Splats
    image: np.ndarray


@dataclass
class BakedGaussians:
    """Decoded attributes frozen for inference; rendering them needs no network."""

    p_eff: np.ndarray
    sh: np.ndarray
    opacity: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    ids: np.ndarray


class NerfGSModel:
    def __init__(self, grid_cfg: HashGridConfig, nerf_cfg: NerfConfig, gs_cfg: GSConfig,
                 rng: np.random.Generator, flags: BranchFlags | None = None, dtype=DEFAULT_DTYPE,
                 background=(0.0, 0.0, 0.0)):
        self.grid_cfg = grid_cfg
        self.gs_cfg = gs_cfg
        self.flags = flags or BranchFlags()
        self.background = np.asarray(background, dtype=np.float64)
        self.dtype = dtype
        self.grid = HashGrid(grid_cfg, rng, dtype)
        self.nerf = NerfField(self.grid, nerf_cfg, rng, dtype)
        D = self.grid.feature_dim
        self.gs_net = Mlp("gs.decoder", MlpSpec(3 + D, tuple(gs_cfg.hidden), gs_output_dim(gs_cfg.sh_degree)),
                          rng, dtype)
        self.gaussians: GaussianSet | None = None
        lo, hi = (np.asarray(b, dtype=np.float64) for b in grid_cfg.bounds)
        self.bounds = (lo, hi)
        self.scene_diag = float(np.linalg.norm(hi - lo))

    # ------------------------------------------------------------- setup
    def set_gaussians(self, p: np.ndarray, rng: np.random.Generator | None = None,
                      init_scale: float | None = None) -> None:
        """Install Gaussians at ``p`` and bias the decoder's opacity/scale heads to sane defaults."""
        self.gaussians = GaussianSet(p, self.grid.feature_dim, self.dtype,
                                     own_features=not self.flags.feature_share, rng=rng)
        K3 = 3 * (self.gs_cfg.sh_degree + 1) ** 2
        b_last = self.gs_net.blocks[-1].values
        op = self.gs_cfg.init_opacity
        b_last[K3] = np.log(op / (1.0 - op))
        if init_scale is None:
            init_scale = default_init_scale(self.gaussians.p)
        b_last[K3 + 5 : K3 + 8] = np.log(init_scale)

    @property
    def nerf_blocks(self) -> list[ParamBlock]:
        return self.grid.blocks + self.nerf.decoder_blocks

    # ------------------------------------------------------------ GS path
    def _features(self):
        gs = self.gaussians
        if self.flags.feature_share:
            return self.grid.encode(gs.p), "grid"
        return gs.feat.values, "own"

    def decode(self, with_cache: bool = False):
        gs = self.gaussians
        f, src = self._features()
        dp = gs.dp.values if self.flags.residual_position else np.zeros_like(gs.dp.values)
        df = gs.df.values if self.flags.residual_feature else np.zeros_like(gs.df.values)
        out = decode_attributes(self.gs_net, gs.p, dp, f, df, self.bounds, self.gs_cfg.sh_degree,
                                0.5 * self.scene_diag, gs.scale_offset, with_cache=with_cache)
        if with_cache:
            attrs, cache = out
            return attrs, (cache, src)
        return out

    def p_eff(self) -> np.ndarray:
        gs = self.gaussians
        return gs.p_eff if self.flags.residual_position else gs.p.copy()

    def render_gs(self, camera: Camera, attrs: GaussianAttributes | None = None, with_context: bool = False):
        """Render the GS branch; with ``with_context`` also return a :class:`GSContext`."""
        if with_context:
            attrs, (dcache, src) = self.decode(with_cache=True)
        elif attrs is None:
            attrs = self.decode()
        p_eff = self.p_eff()
        cov3d = covariance(attrs.rotation, attrs.scale)
        splats, pcache = project_gaussians(p_eff, cov3d, attrs.sh, attrs.opacity, self.gaussians.ids, camera)
        image, records = rasterize(splats, camera.width, camera.height, self.background, tiled=self.gs_cfg.tiled)
        if not with_context:
            return image
        return image, GSContext(attrs, dcache, src, pcache, records, splats, image)

    def gs_backward(self, ctx: GSContext, g_image: np.ndarray, g_opacity: np.ndarray | None = None,
                    g_scale: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate an image gradient (plus optional per-Gaussian opacity/scale gradients).

        Returns the per-splat screen-space mean gradient (for densification statistics).
        """
        sg = rasterize_backward(ctx.records, g_image)
        g_p, g_cov3d, g_sh, g_op = project_backward(ctx.proj_cache, sg.mean2d, sg.cov2d, sg.color, sg.opacity)
        if g_opacity is not None:
            g_op = g_op + g_opacity
        g_q, g_s = covariance_backward(ctx.attrs.rotation, ctx.attrs.scale, g_cov3d)
        if g_scale is not None:
            g_s = g_s + g_scale
        g_pos, g_feat = decode_backward(self.gs_net, ctx.decode_cache, g_sh, g_op, g_q, g_s)
        gs = self.gaussians
        if self.flags.residual_position:
            gs.dp.grads += g_p + g_pos
        if self.flags.residual_feature:
            gs.df.grads += g_feat
        if ctx.feats_source == "grid":
            self.grid.encode_backward(gs.p, g_feat, want_x=False)
        else:
            gs.feat.grads += g_feat
        mean_grad = np.zeros((len(gs), 2))
        mean_grad[ctx.splats.source] = sg.mean2d
        return mean_grad

    def bake(self) -> BakedGaussians:
        attrs = self.decode()
        gs = self.gaussians
        return BakedGaussians(self.p_eff(), attrs.sh, attrs.opacity, attrs.rotation, attrs.scale, gs.ids.copy())


def render_baked(baked: BakedGaussians, camera: Camera, background=(0.0, 0.0, 0.0), tiled: bool = True):
    """Render frozen Gaussians; touches neither the hash grid nor any decoder."""
    cov3d = covariance(baked.rotation, baked.scale)
    splats, _ = project_gaussians(baked.p_eff, cov3d, baked.sh, baked.opacity, baked.ids, camera)
    image, _ = rasterize(splats, camera.width, camera.height, background, tiled=tiled)
    return image


def default_init_scale(p: np.ndarray) -> float:
    """Root-mean-square distance to the three nearest neighbours (splatting convention)."""
    from scipy.spatial import cKDTree

    if len(p) < 4:
        return 0.05
    d, _ = cKDTree(p).query(p, k=4)
    return float(np.sqrt(np.mean(d[:, 1:] ** 2)))
