"""Settings via pydantic-settings with .env loading, plus run-config files."""

from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from vbivec.errors import ConfigError
from vbivec.state import CovarianceMode, EmptyComponentPolicy, Recipe


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="VBIVEC_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    num_threads: int = 0
    reproducible: bool = False
    variance_floor_abs: float = 1e-6
    variance_floor_frac: float = 1e-3
    posterior_floor: float = 1e-10
    min_component_mass: float = 1e-8
    empty_component_policy: EmptyComponentPolicy = EmptyComponentPolicy.ERROR
    calibration_tol: float = 1e-6
    calibration_max_iter: int = 200
    min_improvement: float = 1e-4

    @property
    def threads(self) -> int:
        """Worker count, resolving 0 to the available parallelism."""
        return self.num_threads if self.num_threads > 0 else (os.cpu_count() or 1)


@lru_cache
def get_settings() -> Settings:
    return Settings()


class RunConfig(BaseModel):
    """Everything one CLI run needs; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    # recipe / TrainConfig mirror
    recipe: Recipe = Recipe.CLASSICAL
    iterations: int = 10
    update_u: Optional[bool] = None
    update_weights: bool = True
    min_improvement: float = 1e-4
    covariance_mode: CovarianceMode = CovarianceMode.DIAGONAL
    variance_floor_abs: float = 1e-6
    variance_floor_frac: float = 1e-3
    min_component_mass: float = 1e-8
    empty_component_policy: EmptyComponentPolicy = EmptyComponentPolicy.ERROR
    posterior_floor: float = 1e-10
    init_scale: Optional[float] = None
    calibration_warm_start: bool = True
    diagonal_alpha: bool = False
    calibration_tol: float = 1e-6
    calibration_max_iter: int = 200

    # dims
    num_components: Optional[int] = None
    ivector_dim: int = 10

    # paths
    manifest: Optional[Path] = None
    model_in: Optional[Path] = None
    model_out: Optional[Path] = None
    output: Optional[Path] = None
    report: Optional[Path] = None

    # execution
    seed: int = 0
    threads: int = 0
    reproducible: bool = False

    @model_validator(mode="after")
    def _check(self) -> RunConfig:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.ivector_dim < 1:
            raise ValueError("ivector_dim must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.num_components is not None and self.num_components < 1:
            raise ValueError("num_components must be >= 1")
        if self.recipe is Recipe.CLASSICAL and self.update_u:
            raise ValueError("the classical recipe keeps the UBM fixed; update_u must be false")
        return self

    @classmethod
    def from_settings(cls, settings: Settings | None = None, **values: Any) -> RunConfig:
        """Build a config whose ambient defaults come from Settings."""
        settings = settings or get_settings()
        base: dict[str, Any] = {
            "min_improvement": settings.min_improvement,
            "variance_floor_abs": settings.variance_floor_abs,
            "variance_floor_frac": settings.variance_floor_frac,
            "min_component_mass": settings.min_component_mass,
            "empty_component_policy": settings.empty_component_policy,
            "posterior_floor": settings.posterior_floor,
            "calibration_tol": settings.calibration_tol,
            "calibration_max_iter": settings.calibration_max_iter,
            "threads": settings.num_threads,
            "reproducible": settings.reproducible,
        }
        base.update(values)
        return _validated(base)


def _validated(values: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_run_config(
    path: Path | None,
    overrides: dict[str, Any] | None = None,
    settings: Settings | None = None,
) -> RunConfig:
    """Parse a UTF-8 ``key=value`` config file, then apply explicit overrides.

    Overrides whose value is None are treated as "not given on the command line".
    """
    values: dict[str, Any] = {}
    if path is not None:
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parsed = dotenv_values(path, encoding="utf-8")
        for key, value in parsed.items():
            if value is None:
                raise ConfigError(f"config key without a value: {key}")
            values[key.strip().lower().replace("-", "_")] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    known = set(RunConfig.model_fields)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig.from_settings(settings, **values)
