"""Configuration schema shared by the library entry points and the CLI.

Config files are YAML mappings.  Every section rejects unknown keys and
is validated before any work starts.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    """Network hyper-parameters.  Defaults build the full-size model."""

    trunk_width: int = Field(64, ge=4)
    n_groups: int = Field(8, ge=1)
    n_blocks: int = Field(8, ge=1)
    scale: int = Field(4, ge=1)
    estimator_widths: tuple[int, int, int, int, int, int] = (16, 32, 32, 64, 64, 128)
    in_channels: int = Field(3, ge=3)
    spatial_idr: int = Field(8, ge=1)
    channel_idr: int = Field(48, ge=1)
    # internal widths the architecture description leaves open
    convnext_expansion: int = Field(2, ge=1)
    gate_hidden: Optional[int] = None  # hidden width of the spatial gate; None -> C/2
    fc_reduction: int = Field(16, ge=1)

    @field_validator("trunk_width")
    @classmethod
    def _split_1_3(cls, v: int) -> int:
        if v % 4:
            raise ValueError("trunk_width must be divisible by 4 (1:3 channel split)")
        return v

    @model_validator(mode="after")
    def _shuffle_compatible(self) -> "ModelConfig":
        if self.estimator_widths[-1] % 16:
            raise ValueError("last estimator width must be divisible by 16 (pixel shuffle x4)")
        return self


class TrainConfig(_Strict):
    B: int = Field(64, ge=1)
    D: int = Field(4, ge=2, le=8)
    tau: float = Field(0.07, gt=0)
    alpha: float = Field(0.999, ge=0, le=1)
    beta: float = Field(0.1, ge=0)
    N: int = Field(8192, ge=1)
    lr_stage1: float = Field(2e-4, gt=0)
    epochs_stage1: int = Field(100, ge=1)
    lr_stage2_start: float = Field(2e-4, gt=0)
    lr_stage2_end: float = Field(1e-6, gt=0)
    epochs_stage2: int = Field(600, ge=1)
    patch: int = Field(64, ge=8)
    projection_dim: int = Field(128, ge=2)
    # ablation toggles
    use_drp: bool = True
    use_cl: bool = True
    use_spatial_idr: bool = True
    use_channel_idr: bool = True
    use_idr_cb: bool = True
    # teacher stage 2 keeps updating the momentum branch and the queue
    stage2_momentum: bool = True
    # weights of the loss terms in the joint stages
    dl_weight: float = Field(1.0, ge=0)
    cl_weight: float = Field(1.0, ge=0)
    # reuse the epoch-0 samples every epoch (fixed training set)
    fixed_samples: bool = False
    # which positive patch supervises the SR branch
    sr_patch_index: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.sr_patch_index >= self.D:
            raise ValueError("sr_patch_index must be < D")
        return self


class DegradationConfig(_Strict):
    """Where training degradations come from.

    ``widths`` (isotropic) or ``specs`` pin a finite pool; otherwise specs
    are drawn uniformly from the setting's parameter ranges.
    """

    setting: Literal["setting1", "setting2"] = "setting1"
    kernel_size: int = 21
    widths: Optional[tuple[float, ...]] = None
    noise: Optional[float] = None

    @field_validator("kernel_size")
    @classmethod
    def _odd(cls, v: int) -> int:
        if v < 3 or v % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 3")
        return v


class PathsConfig(_Strict):
    dataset: Optional[str] = None
    output: str = "runs"
    basis: Optional[str] = None
    teacher: Optional[str] = None
    stage1: Optional[str] = None


class RunConfig(_Strict):
    setting: Literal["setting1", "setting2"] = "setting1"
    seed: int = 0
    pca_dim: int = Field(15, ge=1)
    paths: PathsConfig = PathsConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    degradation: DegradationConfig = DegradationConfig()

    @model_validator(mode="after")
    def _sync_setting(self) -> "RunConfig":
        if self.degradation.setting != self.setting:
            raise ValueError("degradation.setting must match setting")
        if self.pca_dim >= self.degradation.kernel_size ** 2:
            raise ValueError("pca_dim must be < kernel_size**2")
        return self

    def digest(self) -> str:
        return config_hash(self.model_dump(mode="json"))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config, apply dotted-key overrides, validate."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        data = loaded
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    # setting given at the top level drives the degradation section
    if "setting" in data:
        data.setdefault("degradation", {}).setdefault("setting", data["setting"])
    return RunConfig.model_validate(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


# Ablation switches.  T* vary the teacher's training signals, M* the
# adaptation-block branches and the IDR correction.
ABLATION_FLAGS = {
    "no-drp": {"use_drp": False},
    "no-cl": {"use_cl": False},
    "no-spatial-idr": {"use_spatial_idr": False},
    "no-channel-idr": {"use_channel_idr": False},
    "no-idr-cb": {"use_idr_cb": False},
}
ABLATION_PRESETS = {
    "T1": {"use_drp": False, "use_cl": False},
    "T2": {"use_drp": True, "use_cl": False},
    "T3": {"use_drp": False, "use_cl": True},
    "T4": {"use_drp": True, "use_cl": True},
    "M1": {"use_spatial_idr": False, "use_channel_idr": False, "use_idr_cb": False},
    "M2": {"use_spatial_idr": True, "use_channel_idr": False, "use_idr_cb": True},
    "M3": {"use_spatial_idr": False, "use_channel_idr": True, "use_idr_cb": True},
    "M4": {"use_spatial_idr": True, "use_channel_idr": True, "use_idr_cb": True},
    "M5": {"use_spatial_idr": True, "use_channel_idr": True, "use_idr_cb": False},
}


def apply_ablation(cfg: RunConfig, *names: str) -> RunConfig:
    """Return ``cfg`` with the toggles of each named flag or preset applied."""
    toggles: dict = {}
    for name in names:
        table = ABLATION_PRESETS if name in ABLATION_PRESETS else ABLATION_FLAGS
        if name not in table:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATION_FLAGS) + sorted(ABLATION_PRESETS)}")
        toggles.update(table[name])
    data = cfg.model_dump()
    data["train"].update(toggles)
    return RunConfig.model_validate(data)
