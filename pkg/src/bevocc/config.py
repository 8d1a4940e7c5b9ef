"""Run configuration: strict schema, YAML files and flag overrides.

Precedence is command-line flags, then ``BEVOCC_DATA_ROOT`` (data root only),
then the config file, then the defaults below.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .data import GridConfig
from .models import ModelConfig
from .scenegen import LAYOUTS
from .training import TrainConfig

DATA_ROOT_ENV = "BEVOCC_DATA_ROOT"

# scene-type proportions: three-way, four-way, segment
STANDARD_LAYOUT_MIX = {"three_way": 8, "four_way": 6, "segment": 6}
_MIX_ALIASES = {"paper": "standard"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SceneSection(_Strict):
    num_scenes: int = Field(20, ge=1)
    num_frames: int = Field(500, ge=1)
    layout_mix: str = "standard"
    num_cameras: int = Field(4, ge=1)
    image_size: tuple[int, int] = (320, 180)
    fov_deg: float = Field(90.0, gt=0, lt=180)
    camera_height_range: tuple[float, float] = (5.0, 8.0)
    camera_max_range: float = Field(100.0, gt=0)
    camera_pitch_range_deg: tuple[float, float] = (-25.0, -10.0)
    vehicle_count_range: tuple[int, int] = (8, 14)
    pedestrian_count_range: tuple[int, int] = (6, 12)
    road_albedo_range: tuple[float, float] = (0.18, 0.32)
    frame_interval: float = Field(0.5, gt=0)

    @field_validator("layout_mix")
    @classmethod
    def _mix(cls, v: str) -> str:
        v = _MIX_ALIASES.get(v, v)
        if v not in ("standard", "uniform", *LAYOUTS):
            raise ValueError(f"layout_mix must be 'standard', 'uniform' or one of {LAYOUTS}")
        return v


class GridSection(_Strict):
    size: int = Field(480, ge=1)
    resolution: float = Field(0.31, gt=0)
    max_range: float = Field(100.0, gt=0)
    pedestrian_sigma: float = Field(1.0, gt=0)

    def build(self) -> GridConfig:
        return GridConfig(self.size, self.resolution, self.max_range, self.pedestrian_sigma)


class ModelSection(_Strict):
    aggregator: Literal["late", "conv", "deformable", "avgpool"] = "avgpool"
    use_background: bool = False
    backbone_channels: int = Field(64, ge=1)
    bottleneck_channels: int = Field(64, ge=1)
    head_channels: int = Field(32, ge=1)
    deform_heads: int = Field(4, ge=1)
    deform_points: int = Field(4, ge=1)

    def build(self, grid: GridSection, num_views: int) -> ModelConfig:
        return ModelConfig(
            self.aggregator, self.use_background, self.backbone_channels, self.bottleneck_channels,
            self.head_channels, num_views, self.deform_heads, self.deform_points,
            grid.size, grid.resolution, grid.max_range,
        )


class TrainSection(_Strict):
    # unset learning_rate / batch_size fall back to the per-aggregator schedule
    learning_rate: Optional[float] = Field(None, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)
    epochs: int = Field(8, ge=0)
    lambda_v: float = Field(1.0, gt=0)
    lambda_p: float = Field(1.0, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    focal: bool = False
    focal_gamma: float = Field(2.0, ge=0)
    heldout_scenes: int = Field(4, ge=0)
    max_frames: Optional[int] = Field(None, ge=1)

    def build(self, aggregator: str, seed: int) -> TrainConfig:
        over = dict(epochs=self.epochs, seed=seed, lambda_v=self.lambda_v, lambda_p=self.lambda_p,
                    momentum=self.momentum, weight_decay=self.weight_decay, focal=self.focal,
                    focal_gamma=self.focal_gamma)
        if self.learning_rate is not None:
            over["learning_rate"] = self.learning_rate
        if self.batch_size is not None:
            over["batch_size"] = self.batch_size
        return TrainConfig.default_schedule(aggregator, **over)


class FinetuneSection(_Strict):
    freeze: Literal["backbone", "agg_head", "none"] = "backbone"
    samples: int = Field(24, ge=1)
    epochs: int = Field(8, ge=1)
    learning_rate: float = Field(0.005, gt=0)
    batch_size: int = Field(2, ge=1)


class AblateSection(_Strict):
    mode: Literal["single-camera", "grid-size"] = "single-camera"
    camera: int = Field(1, ge=1)
    sizes: list[int] = [60, 96, 120, 160]
    extent: Optional[float] = Field(None, gt=0)


class RunConfig(_Strict):
    data_root: Optional[str] = None
    output: Optional[str] = None
    seed: int = 0
    scene: SceneSection = SceneSection()
    grid: GridSection = GridSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    finetune: FinetuneSection = FinetuneSection()
    ablate: AblateSection = AblateSection()

    def archived(self, sections=None) -> dict:
        """Serializable form without machine-specific paths, optionally limited
        to ``sections`` (the seed is always kept)."""
        d = self.model_dump(mode="json", exclude={"data_root", "output"})
        if sections is not None:
            d = {k: v for k, v in d.items() if k == "seed" or k in sections}
        return d


class ConfigError(ValueError):
    pass


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_config(file: str | Path | None, overrides: dict, env=None) -> RunConfig:
    """Merge defaults, file, environment and flag ``overrides`` (a nested dict)."""
    from pydantic import ValidationError

    env = os.environ if env is None else env
    merged = load_config_file(file) if file else {}
    if env.get(DATA_ROOT_ENV):
        merged["data_root"] = env[DATA_ROOT_ENV]
    merged = _deep_merge(merged, overrides)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def write_config(cfg: RunConfig, path: str | Path, sections=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.archived(sections), sort_keys=True))


def layout_sequence(mix: str, n: int, seed: int) -> list[str]:
    """Layouts for ``n`` scenes. ``standard`` apportions 8:6:6 by largest remainder."""
    import numpy as np

    if mix in LAYOUTS:
        return [mix] * n
    weights = STANDARD_LAYOUT_MIX if mix == "standard" else {k: 1 for k in LAYOUTS}
    total = sum(weights.values())
    quotas = {k: n * w / total for k, w in weights.items()}
    counts = {k: int(q) for k, q in quotas.items()}
    for k in sorted(quotas, key=lambda k: (-(quotas[k] - counts[k]), LAYOUTS.index(k)))[: n - sum(counts.values())]:
        counts[k] += 1
    seq = [k for k in LAYOUTS for _ in range(counts[k])]
    order = np.random.default_rng(seed).permutation(n)
    return [seq[i] for i in order]
