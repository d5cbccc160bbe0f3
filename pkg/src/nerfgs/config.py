"""Run configuration: one JSON document with a complete default, validated strictly."""
from __future__ import annotations

import json
import math
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .hashgrid import HashGridConfig
from .model import BranchFlags, GSConfig
from .nerf import NerfConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GridSettings(_Strict):
    levels: int = Field(16, ge=1)
    features_per_level: int = Field(2, ge=1)
    table_size_log2: int | list[int] = 15
    base_resolution: int = Field(16, ge=2)
    finest_resolution: int = Field(512, ge=2)
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.5,) * 3, (1.5,) * 3)

    def build(self) -> HashGridConfig:
        return HashGridConfig(**self.model_dump())


class MlpSettings(_Strict):
    sigma_hidden: tuple[int, ...] = (64,)
    color_hidden: tuple[int, ...] = (64,)
    gs_hidden: tuple[int, ...] = (64,)
    n_samples: int = Field(64, ge=2)
    sh_degree: int = Field(1, ge=0, le=3)
    entropy_mask: float = Field(1e-3, ge=0)


class InitBudgetSettings(_Strict):
    total_points: int = Field(5000, ge=0)
    edge_ratio: float = Field(0.8, ge=0, le=1)


class TrainSchedule(_Strict):
    """Pretraining and joint-phase schedule (desk scale)."""

    pretrain_epochs: int = Field(10, ge=0)
    pretrain_batch: int = Field(1024, ge=1)
    joint_iters: int = Field(2000, ge=0)
    gs_rays_per_iter: int = Field(256, ge=0)
    densify_interval: int = Field(100, ge=1)
    densify_until: int = Field(1500, ge=0)
    densify_max_new: int = Field(200, ge=0)
    nerf_alpha_threshold: float = Field(0.6, gt=0, le=1)
    grad_threshold: float = Field(1.5e-5, gt=0)
    percent_dense: float = Field(0.01, gt=0)
    prune_interval: int = Field(300, ge=1)
    prune_opacity: float = Field(0.005, gt=0, lt=1)
    eval_interval: int = Field(100, ge=1)
    tau_op: float = Field(0.5, ge=0, le=1)
    seed: int = 0


class LearningRates(_Strict):
    hash: float = Field(1e-2, gt=0)
    mlp: float = Field(1e-3, gt=0)
    position: float = Field(1.6e-4, gt=0)  # multiplied by the scene extent
    feature: float = Field(2.5e-3, gt=0)
    final_ratio: float = Field(0.1, gt=0, le=1)


class LossWeights(_Strict):
    en: float = Field(1e-4, ge=0)
    ssim: float = Field(0.2, ge=0)
    vol: float = Field(1e-3, ge=0)
    nerf: float = Field(0.1, ge=0)
    rgb: float = Field(0.05, ge=0)
    op: float = Field(1e-3, ge=0)
    fea: float = Field(1e-4, ge=0)
    pos: float = Field(1e-4, ge=0)

    @model_validator(mode="after")
    def _finite(self):
        for k, v in self.model_dump().items():
            if not math.isfinite(v):
                raise ValueError(f"loss weight {k} must be finite")
        return self


class AblationFlags(_Strict):
    no_feature_share: bool = False
    no_residual_feature: bool = False
    no_residual_position: bool = False
    no_gs_rays: bool = False
    no_edge_init: bool = False
    no_nerf_growth: bool = False
    no_grad_densify: bool = False
    no_joint_rgb: bool = False
    no_joint_op: bool = False
    no_reg_fea: bool = False
    no_reg_pos: bool = False
    no_nerf_loss: bool = False
    no_vol_loss: bool = False
    gs_only: bool = False

    def effective_weights(self, w: LossWeights) -> LossWeights:
        """Zero the weights of terms this flag set disables."""
        d = w.model_dump()
        off = {"rgb": self.no_joint_rgb, "op": self.no_joint_op or self.no_gs_rays, "fea": self.no_reg_fea,
               "pos": self.no_reg_pos, "nerf": self.no_nerf_loss, "vol": self.no_vol_loss}
        if self.gs_only:
            off.update(rgb=True, op=True, nerf=True)
        for k, v in off.items():
            if v:
                d[k] = 0.0
        return LossWeights(**d)

    def branch_flags(self) -> BranchFlags:
        return BranchFlags(feature_share=not (self.no_feature_share or self.gs_only),
                           residual_feature=not self.no_residual_feature,
                           residual_position=not self.no_residual_position)


ABLATION_NAMES = tuple(AblationFlags.model_fields)


class RunConfig(_Strict):
    scene: str = "tri-sphere"
    grid: GridSettings = GridSettings()
    mlp: MlpSettings = MlpSettings()
    init: InitBudgetSettings = InitBudgetSettings()
    schedule: TrainSchedule = TrainSchedule()
    lr: LearningRates = LearningRates()
    weights: LossWeights = LossWeights()
    ablation: AblationFlags = AblationFlags()
    out_dir: str = "runs"
    seed: int = 0
    checkpoint_precision: str = "float32"

    @field_validator("checkpoint_precision")
    @classmethod
    def _prec(cls, v):
        if v not in ("float32", "float64"):
            raise ValueError("checkpoint_precision must be float32 or float64")
        return v

    def nerf_config(self) -> NerfConfig:
        return NerfConfig(self.mlp.sigma_hidden, self.mlp.color_hidden, self.mlp.n_samples, self.mlp.entropy_mask)

    def gs_config(self) -> GSConfig:
        return GSConfig(sh_degree=self.mlp.sh_degree, hidden=self.mlp.gs_hidden, tau_op=self.schedule.tau_op)

    def with_flags(self, **flags) -> "RunConfig":
        unknown = set(flags) - set(ABLATION_NAMES)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        return self.model_copy(update={"ablation": self.ablation.model_copy(update=flags)}, deep=True)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate(json.loads(Path(path).read_text()))


def default_config_json() -> str:
    return RunConfig().model_dump_json(indent=2)
