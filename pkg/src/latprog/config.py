"""Run configuration: defaults, strict parsing, canonical hashing.

Unknown keys anywhere in the document are fatal.  A single master seed
drives every stage through fixed offsets unless a section pins its own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .autoencoder import AEConfig
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .gaussian_prior import GaussianPriorConfig

# Per-stage seed offsets from the master seed.
SEED_OFFSETS = {
    "cohort": 0,
    "autoencoder": 1,
    "gaussian_prior": 2,
    "diffusion": 3,
    "sampling": 4,
}


@dataclass(frozen=True)
class CohortParams:
    n_subjects: int = 60
    grid_size: int = 32
    noise_sigma: float = 0.005
    scans_per_subject: tuple[int, int] = (2, 6)
    age_spacing: tuple[float, float] = (0.8, 1.3)
    baseline_age_range: tuple[float, float] = (60.0, 85.0)
    diagnosis_mix: dict[str, float] | None = None
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class ScheduleParams:
    timesteps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class EvalParams:
    predict_sources: tuple[str, ...] = ("global_prior", "posterior", "regression")
    anchor_year: float = 4.0
    lag_years: tuple[float, ...] = (1.0, 2.0, 3.0)
    min_span_years: float = 6.0
    include_regression: bool = True
    n_alphas: int = 11
    bin_width: float = 5.0
    bin_start: float = 60.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    cohort: CohortParams = field(default_factory=CohortParams)
    autoencoder: AEConfig = field(default_factory=AEConfig)
    gaussian_prior: GaussianPriorConfig = field(default_factory=GaussianPriorConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    evaluation: EvalParams = field(default_factory=EvalParams)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


_TUPLE_FIELDS = {
    "scans_per_subject",
    "age_spacing",
    "baseline_age_range",
    "split_fractions",
    "lag_years",
    "predict_sources",
}


def _build_section(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {path}.{key}")
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{key} must be a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid section {path}: {exc}") from exc


_SECTIONS = {
    "cohort": CohortParams,
    "autoencoder": AEConfig,
    "gaussian_prior": GaussianPriorConfig,
    "diffusion": DiffusionConfig,
    "schedule": ScheduleParams,
    "evaluation": EvalParams,
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    kwargs = {}
    seeded_sections = set()
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be an object")
            if "seed" in value:
                seeded_sections.add(key)
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"unknown config key: {key}")
    cfg = RunConfig(**kwargs)
    return _derive_seeds(cfg, seeded_sections)


def _derive_seeds(cfg: RunConfig, pinned: set[str]) -> RunConfig:
    """Stage seeds default to master seed + fixed offset."""
    updates = {}
    if "autoencoder" not in pinned:
        updates["autoencoder"] = dataclasses.replace(
            cfg.autoencoder, seed=cfg.seed + SEED_OFFSETS["autoencoder"]
        )
    if "gaussian_prior" not in pinned:
        updates["gaussian_prior"] = dataclasses.replace(
            cfg.gaussian_prior, seed=cfg.seed + SEED_OFFSETS["gaussian_prior"]
        )
    if "diffusion" not in pinned:
        updates["diffusion"] = dataclasses.replace(
            cfg.diffusion, seed=cfg.seed + SEED_OFFSETS["diffusion"]
        )
    return dataclasses.replace(cfg, **updates) if updates else cfg


def load_config(path=None, seed_override: int | None = None) -> RunConfig:
    """Parse a JSON config file; missing path means all defaults."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if seed_override is not None:
        data = dict(data)
        data["seed"] = seed_override
        # CLI seed override re-derives all stage seeds unless sections pinned theirs.
    return config_from_dict(data)
