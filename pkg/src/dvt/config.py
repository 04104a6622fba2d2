"""JSON run configuration.

Every section rejects unknown keys. Defaults describe the desk-scale MNIST
cascade; :func:`default_config` also knows the CIFAR-10 variant.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .budget import GAConfig
from .cascade import CascadeConfig
from .embed import TokenGridSpec
from .encoder import EncoderConfig

DATASET_SHAPES = {"mnist": (1, 28, 10), "cifar10": (3, 32, 10)}  # channels, side, classes


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StageSpec(_Strict):
    grid_h: int = Field(gt=0)
    grid_w: int = Field(gt=0)
    patch_px: int = Field(gt=0)


class DatasetSection(_Strict):
    name: Literal["mnist", "cifar10"] = "mnist"
    dir: Optional[str] = None  # falls back to $DVT_DATA_DIR
    augment: Literal["none", "crop-flip"] = "none"


class CascadeSection(_Strict):
    stages: list[StageSpec] = Field(
        default_factory=lambda: [StageSpec(grid_h=2, grid_w=2, patch_px=14), StageSpec(grid_h=4, grid_w=4, patch_px=7)]
    )
    layers: int = Field(4, gt=0)
    width: int = Field(64, gt=0)
    heads: int = Field(4, gt=0)
    mlp_ratio: int = Field(4, gt=0)
    context_width: int = Field(16, ge=0)
    feature_reuse: bool = True
    relationship_reuse: bool = True
    context_norm: Literal["split", "joint"] = "split"


class TrainSection(_Strict):
    epochs: int = Field(3, gt=0)
    batch: int = Field(128, gt=0)
    lr: float = Field(1e-3, gt=0)
    seed: Optional[int] = None
    val_fraction: float = Field(0.1, ge=0, lt=1)


class GASection(_Strict):
    population: int = 50
    generations: int = 100
    tournament: int = 4
    mutation_std: float = 0.05
    crossover_prob: float = 0.9
    elitism: int = 2
    seed: Optional[int] = None


class SolveSection(_Strict):
    budget: Optional[float] = Field(None, gt=0)
    budget_fraction: Optional[float] = Field(None, gt=0)
    method: Literal["ga", "grid"] = "grid"
    resolution: float = Field(0.01, gt=0, le=1)
    ga: GASection = Field(default_factory=GASection)

    @model_validator(mode="after")
    def _one_budget(self):
        if self.budget is not None and self.budget_fraction is not None:
            raise ValueError("give either budget or budget_fraction, not both")
        return self


class RunConfig(_Strict):
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    cascade: CascadeSection = Field(default_factory=CascadeSection)
    train: TrainSection = Field(default_factory=TrainSection)
    solve: SolveSection = Field(default_factory=SolveSection)


class ConfigError(ValueError):
    """Invalid configuration file or override."""


def default_config(dataset: str = "mnist") -> RunConfig:
    if dataset == "mnist":
        return RunConfig()
    if dataset == "cifar10":
        return RunConfig(
            dataset=DatasetSection(name="cifar10", augment="crop-flip"),
            cascade=CascadeSection(
                stages=[StageSpec(grid_h=4, grid_w=4, patch_px=8), StageSpec(grid_h=8, grid_w=8, patch_px=4)]
            ),
        )
    raise ConfigError(f"unknown dataset {dataset!r}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` (dotted, any depth) overrides; values parse as JSON when possible."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """Read a config file (or the MNIST defaults) and apply overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = apply_overrides(data, list(overrides))
    ds = data.get("dataset")
    if isinstance(ds, dict) and ds.get("name") == "cifar10":
        # CIFAR-10 without explicit stages/augment gets its own defaults
        cifar = default_config("cifar10")
        cas = data.setdefault("cascade", {})
        if isinstance(cas, dict) and "stages" not in cas:
            cas["stages"] = [s.model_dump() for s in cifar.cascade.stages]
        ds.setdefault("augment", cifar.dataset.augment)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(x) for x in first["loc"])
        raise ConfigError(f"config error at {loc}: {first['msg']}") from exc


def cascade_config(run: RunConfig) -> CascadeConfig:
    channels, _, classes = DATASET_SHAPES[run.dataset.name]
    c = run.cascade
    try:
        return CascadeConfig(
            grids=tuple(TokenGridSpec(s.grid_h, s.grid_w, s.patch_px) for s in c.stages),
            encoder=EncoderConfig(
                layers=c.layers,
                width=c.width,
                heads=c.heads,
                mlp_ratio=c.mlp_ratio,
                context_width=c.context_width if c.feature_reuse else 0,
                context_norm=c.context_norm,
            ),
            classes=classes,
            channels=channels,
            feature_reuse=c.feature_reuse,
            relationship_reuse=c.relationship_reuse,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid cascade: {exc}") from exc


def check_image_size(run: RunConfig, config: CascadeConfig) -> None:
    side = DATASET_SHAPES[run.dataset.name][1]
    if config.image_hw != (side, side):
        raise ConfigError(f"stages cover {config.image_hw} pixels but {run.dataset.name} images are {side}x{side}")


def ga_config(run: RunConfig, seed: int, resolution: float | None = None) -> GAConfig:
    g = run.solve.ga
    return GAConfig(
        resolution=run.solve.resolution if resolution is None else resolution,
        population=g.population,
        generations=g.generations,
        tournament=g.tournament,
        mutation_std=g.mutation_std,
        crossover_prob=g.crossover_prob,
        elitism=g.elitism,
        seed=seed if g.seed is None else g.seed,
    )
