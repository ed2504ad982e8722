"""Pipeline configuration schema.

Every tunable lives here with its default. Precedence is: command-line
flags, then the config file, then these built-ins. The environment
variable ``SPF_SEED`` replaces the master seed from the file.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError
from .featurefield import TrainConfig
from .merging import MergeConfig
from .superpoints import CutParams
from .synth import GridParams

SEED_ENV = "SPF_SEED"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CutSection(_Section):
    k_thresh: float = Field(0.05, gt=0)
    min_size: int = Field(20, ge=1)
    knn_k: int = Field(10, ge=3)


class GridSection(_Section):
    resolution: int = Field(64, ge=2)
    scale_count: int = Field(3, ge=1)
    init_density: float = Field(0.2, gt=0)
    init_scale: float = Field(0.1, ge=0)
    ray_offset: float = Field(0.2, gt=0)
    ray_margin: float = Field(0.05, ge=0)


class TrainSection(_Section):
    lambda_lang: float = Field(1.0, ge=0)
    lambda_c: float = Field(2_000.0, ge=0)
    lambda_d: float = Field(1e5, ge=0)
    delta: float = Field(0.25, gt=0)
    lr: float = Field(0.05, gt=0)
    iterations: int = Field(300, ge=0)
    stage1: Optional[int] = Field(None, ge=0)
    stage2: Optional[int] = Field(None, ge=0)
    rays_per_batch: int = Field(512, ge=1)
    samples_per_ray: int = Field(16, ge=1)
    density_points_per_batch: int = Field(2048, ge=1)
    pairs_per_batch: int = Field(1024, ge=1)

    @model_validator(mode="after")
    def _stages_ordered(self):
        s1 = self.stage1 if self.stage1 is not None else int(round(0.1 * self.iterations))
        s2 = self.stage2 if self.stage2 is not None else int(round(0.3 * self.iterations))
        if not s1 <= s2 <= self.iterations:
            raise ValueError("need stage1 <= stage2 <= iterations")
        return self


class MergeSection(_Section):
    n_points: int = Field(16, ge=1)
    n_affinity: int = Field(5, ge=1)
    weight: float = Field(1.0, gt=0)
    use_affinity: bool = True
    normalized_affinity: bool = False
    scale_mode: Literal["mean", "max"] = "mean"


class SynthSection(_Section):
    dim: int = Field(16, ge=1)
    sigma_emb: float = Field(0.1, ge=0)
    context_radius: float = Field(0.0, ge=0)
    points_per_m2: float = Field(480.0, gt=0)
    sigma_geom: float = Field(0.002, ge=0)


class PipelineConfig(_Section):
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    cut: CutSection = CutSection()
    grid: GridSection = GridSection()
    train: TrainSection = TrainSection()
    merge: MergeSection = MergeSection()
    synth: SynthSection = SynthSection()

    def cut_params(self) -> CutParams:
        return CutParams(**self.cut.model_dump())

    def grid_params(self) -> GridParams:
        return GridParams(seed=self.seed, **self.grid.model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train.model_dump())

    def merge_config(self) -> MergeConfig:
        return MergeConfig(**self.merge.model_dump())


def _problems(err: pydantic.ValidationError):
    out = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{where}: {e['msg']}")
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(file_data: Optional[dict] = None, overrides: Optional[dict] = None,
                 env=None) -> PipelineConfig:
    """Validate ``built-ins <- file <- SPF_SEED <- overrides`` into one config.

    ``file_data`` may be a plain config or a run manifest (its ``config``
    entry is used). All violations are reported together.

    Raises:
        ConfigError: listing every invalid or unknown field.
    """
    env = os.environ if env is None else env
    data = dict(file_data or {})
    if "config" in data and "command" in data:
        data = dict(data["config"])
    if env.get(SEED_ENV) not in (None, ""):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError([f"{SEED_ENV}: not an integer: {env[SEED_ENV]!r}"])
    data = _merge(data, overrides or {})
    try:
        return PipelineConfig.model_validate(data)
    except pydantic.ValidationError as err:
        raise ConfigError(_problems(err)) from None


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> PipelineConfig:
    data = {}
    if path is not None:
        with open(Path(path)) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError([f"{path}: invalid JSON ({err})"]) from None
    return build_config(data, overrides, env)
