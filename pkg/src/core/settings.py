"""
Layered settings for the wave control toolkit.

Defaults come from ``config.yaml`` at the repository root, are overridden by
``WAVECTRL_*`` environment variables (a ``.env`` file is honoured), and a run
config can override them again for a single run.

Example:
    WAVECTRL_TOLERANCES__TAU_PHI=1e-8 python analyze.py system.json --observability
"""

from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic.fields import FieldInfo
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from .logging_config import get_logger

load_dotenv()

logger = get_logger(__name__)

CONFIG_PATH = Path(__file__).resolve().parent.parent.parent / "config.yaml"


class Tolerances(BaseModel):
    """Numerical thresholds that band the exact dichotomies of the criteria."""

    tau_eig: float = Field(default=1e-9, gt=0, description="Discriminant band for Jordan/scalar split")
    tau_rank: float = Field(default=1e-9, gt=0, description="Relative determinant band for rank tests")
    tau_phi: float = Field(default=1e-9, gt=0, description="Nondegeneracy band for phi values")
    tau_minor: float = Field(default=1e-9, gt=0, description="Normalized minor threshold")
    tau_spec: float = Field(default=1e-8, gt=0, description="Distance of 1 to a Nystrom spectrum")
    quad_tol: float = Field(default=1e-12, gt=0, description="Absolute quadrature tolerance")
    picard_tol: float = Field(default=1e-10, gt=0, description="Picard stopping tolerance")
    mean_zero_tol: float = Field(default=1e-8, gt=0, description="Relative mean-zero defect accepted")
    ode_tol: float = Field(default=1e-10, gt=0, description="Local error of the fundamental-matrix ODE")


class GridSettings(BaseModel):
    """Discretization sizes."""

    x_nodes: int = Field(default=512, ge=8, description="x-grid for the observability scans")
    sim_nx: int = Field(default=200, ge=8, description="Space cells of the simulation grid")
    t_slices: int = Field(default=41, ge=2, description="Output time slices of simulated fields")
    svd_nx: int = Field(default=256, ge=8, description="x-grid of the observation-operator SVD")
    compactness_nx: int = Field(default=48, ge=8, description="Space cells of the D_T matrix")
    nystrom_nodes: int = Field(default=64, ge=8)
    fattorini_re_range: Tuple[float, float] = (-10.0, 10.0)
    fattorini_im_range: Tuple[float, float] = (-20.0, 20.0)
    fattorini_re_count: int = Field(default=41, ge=1)
    fattorini_im_count: int = Field(default=81, ge=1)
    n_max: int = Field(default=64, ge=1, description="Frequency window of the constant case")
    max_quad_depth: int = Field(default=30, ge=1)
    picard_max_iterations: int = Field(default=64, ge=2)

    @field_validator("fattorini_re_range", "fattorini_im_range")
    @classmethod
    def check_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] > value[1]:
            raise ValueError(f"range lower bound {value[0]} exceeds upper bound {value[1]}")
        return value


class YamlDefaultsSource(PydanticBaseSettingsSource):
    """Lowest-priority settings source reading config.yaml."""

    def __init__(self, settings_cls: Type[BaseSettings], path: Path = CONFIG_PATH):
        super().__init__(settings_cls)
        self.data = load_yaml_defaults(path)

    def get_field_value(self, field: FieldInfo, field_name: str) -> Tuple[Any, str, bool]:
        return self.data.get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return {k: v for k, v in self.data.items() if v is not None}


class Settings(BaseSettings):
    """Process-wide settings."""

    model_config = SettingsConfigDict(
        env_prefix="WAVECTRL_",
        env_file=".env",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="ignore",
    )

    log_level: str = Field(default="INFO")
    json_logs: bool = Field(default=False)
    log_file: Optional[str] = Field(default=None)
    output_dir: str = Field(default="./reports")
    tolerances: Tolerances = Field(default_factory=Tolerances)
    grids: GridSettings = Field(default_factory=GridSettings)

    @model_validator(mode="after")
    def check_log_level(self) -> "Settings":
        if self.log_level.upper() not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {self.log_level}")
        return self

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            YamlDefaultsSource(settings_cls),
        )


def load_yaml_defaults(path: Path = CONFIG_PATH) -> Dict[str, Any]:
    """
    Read config.yaml and flatten its sections into Settings field names.

    A missing or malformed file logs a warning and yields no defaults.
    """
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        return {}
    except Exception as e:
        logger.warning(f"Could not load {path}: {e}")
        return {}

    logging_section = raw.get("logging") or {}
    reports_section = raw.get("reports") or {}
    return {
        "log_level": logging_section.get("level"),
        "json_logs": logging_section.get("json"),
        "log_file": logging_section.get("file"),
        "output_dir": reports_section.get("output_dir"),
        "tolerances": raw.get("tolerances"),
        "grids": raw.get("grids"),
    }


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
