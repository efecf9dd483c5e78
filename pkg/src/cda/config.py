"""Experiment configuration: defaults, JSON files, and dotted overrides.

Every field has a default, so an empty config is runnable. Configs are
plain JSON; `--set a.b.c=value` overrides one leaf (value parsed as JSON
when possible, else kept as a string). The fully resolved dict is
written into each run directory, and a run is reproducible from that
file alone.

All randomness flows from three named seeds: data.seed (volume
synthesis), init_seed (weights and batch order), cv.seed (fold splits).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any

from .datagen import DomainSpec, ShiftSpec
from .errors import ConfigError
from .losses import FocalParams
from .models import ClassifierConfig, CnnConfig, VitConfig
from .trainer import VARIANTS, ModelSpec, OptimizerConfig, StagePlan

# Default two-site benchmark: class counts mirror a realistic skewed
# three-class cohort pair; the target site is dimmer, smoother, and
# noisier than the near-clean source site.
DEFAULT_SOURCE_COUNTS = (56, 110, 18)
DEFAULT_TARGET_COUNTS = (34, 66, 17)
DEFAULT_SOURCE_SHIFT = {"noise_sigma": 0.02}
DEFAULT_TARGET_SHIFT = {
    "intensity_gain": 1.25,
    "intensity_gamma": 1.4,
    "smooth_sigma": 0.8,
    "bias_field_amp": 0.3,
    "noise_sigma": 0.05,
}


@dataclasses.dataclass(frozen=True)
class DomainSection:
    n_per_class: tuple[int, ...]
    shift: ShiftSpec


@dataclasses.dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    source: DomainSection = DomainSection(DEFAULT_SOURCE_COUNTS, ShiftSpec(**DEFAULT_SOURCE_SHIFT))
    target: DomainSection = DomainSection(DEFAULT_TARGET_COUNTS, ShiftSpec(**DEFAULT_TARGET_SHIFT))

    def domain_specs(self) -> tuple[DomainSpec, DomainSpec]:
        common = {"dims": self.dims, "spacing": self.spacing, "base_seed": self.seed}
        return (
            DomainSpec(self.source.n_per_class, self.source.shift, domain="source", **common),
            DomainSpec(self.target.n_per_class, self.target.shift, domain="target", **common),
        )


@dataclasses.dataclass(frozen=True)
class CvConfig:
    folds: int = 5
    repeats: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ConfigError(f"cv.folds must be >= 2, got {self.folds}")
        if self.repeats < 1:
            raise ConfigError(f"cv.repeats must be >= 1, got {self.repeats}")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    model: ModelSpec = ModelSpec()
    plan: StagePlan = StagePlan()
    opt: OptimizerConfig = OptimizerConfig()
    focal: FocalParams = FocalParams()
    cv: CvConfig = CvConfig()
    variant: str = "full"
    inference_branch: str | None = None
    init_seed: int = 0
    save_checkpoints: bool = True

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid: {', '.join(sorted(VARIANTS))}"
            )
        if self.inference_branch not in (None, "v", "c", "vit", "cnn"):
            raise ConfigError("inference_branch must be one of v, c, vit, cnn, or omitted")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _default_dict() -> dict:
    return ExperimentConfig().to_dict()


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    merged = dict(defaults)
    for key, value in override.items():
        here = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge(defaults[key], value, here + ".")
        else:
            merged[key] = value
    return merged


def apply_override(config_dict: dict, assignment: str) -> None:
    """Apply one dotted-key override like plan.tau=0.05 in place."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key.path=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = config_dict
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[keys[-1]] = value


def from_dict(raw: dict) -> ExperimentConfig:
    merged = _merge(_default_dict(), raw)
    try:
        data = DataConfig(
            manifest=merged["data"]["manifest"],
            dims=tuple(merged["data"]["dims"]),
            spacing=tuple(merged["data"]["spacing"]),
            seed=int(merged["data"]["seed"]),
            source=DomainSection(
                n_per_class=tuple(merged["data"]["source"]["n_per_class"]),
                shift=ShiftSpec(**merged["data"]["source"]["shift"]),
            ),
            target=DomainSection(
                n_per_class=tuple(merged["data"]["target"]["n_per_class"]),
                shift=ShiftSpec(**merged["data"]["target"]["shift"]),
            ),
        )
        model = ModelSpec(
            vit=VitConfig(**merged["model"]["vit"]),
            cnn=CnnConfig(
                stage_channels=tuple(merged["model"]["cnn"]["stage_channels"]),
                blocks_per_stage=merged["model"]["cnn"]["blocks_per_stage"],
                embed_dim=merged["model"]["cnn"]["embed_dim"],
            ),
            classifier=ClassifierConfig(**merged["model"]["classifier"]),
        )
        focal_alpha = merged["focal"]["alpha"]
        config = ExperimentConfig(
            data=data,
            model=model,
            plan=StagePlan(**merged["plan"]),
            opt=OptimizerConfig(**merged["opt"]),
            focal=FocalParams(
                gamma=merged["focal"]["gamma"],
                alpha=None if focal_alpha is None else tuple(focal_alpha),
            ),
            cv=CvConfig(**merged["cv"]),
            variant=merged["variant"],
            inference_branch=merged["inference_branch"],
            init_seed=int(merged["init_seed"]),
            save_checkpoints=bool(merged["save_checkpoints"]),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    return config


def load_config(
    path: str | Path | None, overrides: list[str] | None = None, **direct: Any
) -> ExperimentConfig:
    """Resolve defaults <- file <- --set overrides <- direct kwargs."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
    merged = _merge(_default_dict(), raw)
    for assignment in overrides or []:
        apply_override(merged, assignment)
    for key, value in direct.items():
        if value is None:
            continue
        node = merged
        parts = key.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return from_dict(merged)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
