"""Application settings and run configuration."""

import json
import logging
import math
import sys
from functools import lru_cache
from pathlib import Path
from typing import Literal

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigError
from app.models.physics import AtomSystem, GateKind, StepScheme
from app.utils.units import gamma_from_lifetime


class Settings(BaseSettings):
    """Application settings loaded from environment variables (prefix ``RYDPULSE_``)."""

    model_config = SettingsConfigDict(
        env_prefix="RYDPULSE_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Run Settings
    output_dir: Path = Path("runs")
    threads: int | None = None
    log_level: str = "INFO"

    # API Settings
    api_title: str = "Rydberg Pulse Family API"
    api_description: str = "Evaluate, export and fit neural-network pulse families for Rydberg-atom phase gates"
    api_version: str = "1.0.0"
    api_prefix: str = "/api/v1"

    # Server Settings
    host: str = "0.0.0.0"
    port: int = 8000
    debug: bool = False

    max_upload_mb: int = 50


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def configure_logging(level: str | int = "INFO") -> None:
    """Configure root logging once for CLI and server entry points."""
    logging.basicConfig(
        level=level if isinstance(level, int) else level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhysicsConfig(_Strict):
    """Physical parameters, in laboratory units."""

    rabi_frequency_mhz: float = Field(default=10.0, gt=0, description="omega_max / 2 pi in MHz")
    lifetime_us: float = Field(default=96.5, gt=0, description="Rydberg lifetime 1/Gamma in us")
    blockade_b: float = Field(default=21.1, gt=0, description="Blockade strength B = V / omega_max")
    decay: bool = Field(default=True, description="Include Rydberg decay")
    scheme: StepScheme = Field(default=StepScheme.MIDPOINT_EXPONENTIAL)
    n_steps: int | None = Field(default=None, ge=8, description="Fixed step count; default rule when unset")

    @property
    def gamma(self) -> float:
        """Decay rate in units of omega_max."""
        if not self.decay:
            return 0.0
        return gamma_from_lifetime(self.lifetime_us, self.rabi_frequency_mhz)

    def system(self, gate: GateKind, blockade_b: float | None = None) -> AtomSystem:
        return AtomSystem(
            n_atoms=gate.n_atoms,
            blockade_b=self.blockade_b if blockade_b is None else blockade_b,
            gamma=self.gamma,
        )


class TrainConfig(_Strict):
    """Optimizer, sampling and curriculum settings."""

    batch_m: int = Field(default=80, ge=1, description="Angles per iteration")
    learning_rate: float = Field(default=3e-4, ge=0)
    lr_factor: float = Field(default=0.5, gt=0, lt=1, description="Plateau learning-rate decay")
    lr_patience: int = Field(default=200, ge=1, description="Iterations without improvement before decay")
    min_lr: float = Field(default=1e-6, ge=0)
    mu: float = Field(default=1e-4, ge=0, description="Time-penalty weight")
    mu_switch: float = Field(default=1e-3, gt=0, description="Enable the penalty once J drops below this")
    max_iters: int = Field(default=20000, ge=1)
    plateau_window: int = Field(default=50, ge=1)
    plateau_threshold: float = Field(default=1e-4, ge=0)
    n_intervals: int | None = Field(default=None, ge=1, description="Uniform partition size; gate default when unset")
    intervals: list[tuple[float, float]] | None = Field(default=None, description="Explicit partition of (0, pi]")
    blockade_stage: Literal["infinite-first", "finite-only"] = "finite-only"
    eval_b: float = Field(default=21.1, gt=0, description="Blockade strength of the finite stage")
    arch: tuple[int, int, int, int] | None = Field(default=None, description="(m_L^T, m_N^T, m_L^C, m_N^C)")
    n_knots: int = Field(default=48, ge=2)
    delta_bound: float = Field(default=2.5, gt=0)
    t_opt: float | None = Field(default=None, gt=0, description="Time-optimal duration at phi = pi")
    checkpoint_every: int = Field(default=100, ge=1)
    log_every: int = Field(default=10, ge=1)
    divergence_retries: int = Field(default=3, ge=0)
    stage_eval_samples: int = Field(default=200, ge=1, description="Angles per curriculum stage evaluation")
    seed: int = 0

    @model_validator(mode="after")
    def _check_intervals(self) -> "TrainConfig":
        if self.intervals is None:
            return self
        ordered = sorted(self.intervals)
        cursor = 0.0
        for low, high in ordered:
            if not high > low:
                raise ValueError(f"Empty interval ({low}, {high}]")
            if not math.isclose(low, cursor, abs_tol=1e-9):
                raise ValueError(f"Intervals must cover (0, pi] without gaps or overlap near {cursor}")
            cursor = high
        if not math.isclose(cursor, math.pi, abs_tol=1e-9):
            raise ValueError("Intervals must end at pi")
        return self


class EvalConfig(_Strict):
    n_samples: int = Field(default=200, ge=1)
    blockade_b: float | None = Field(default=None, gt=0, description="Override of physics.blockade_b")
    gamma: float | None = Field(default=None, ge=0, description="Override of the decay rate (omega_max units)")
    theta_grid: int = Field(default=4096, ge=2)
    batch_size: int = Field(default=50, ge=1)
    resolution: int = Field(default=400, ge=1, description="Export grid intervals")


class RatioConfig(_Strict):
    c1z_time: float = Field(default=7.612, gt=0, description="Time-optimal C_1Z duration (1/omega_max)")
    gate_counts: list[tuple[int, float]] | None = None
    native_time: float | None = Field(default=None, gt=0)


class RunConfig(_Strict):
    """Top-level run configuration read from TOML or JSON."""

    gate: GateKind = GateKind.C1P
    seed: int = 0
    output_dir: Path | None = None
    physics: PhysicsConfig = Field(default_factory=PhysicsConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ratio: RatioConfig = Field(default_factory=RatioConfig)

    def system(self, blockade_b: float | None = None) -> AtomSystem:
        """Training system in internal units for the configured gate."""
        return self.physics.system(self.gate, blockade_b)

    def eval_system(self) -> AtomSystem:
        sys = self.physics.system(self.gate, self.eval.blockade_b)
        if self.eval.gamma is not None:
            sys = sys.with_overrides(gamma=self.eval.gamma)
        return sys


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a run configuration; every schema error is reported at once.

    Raises:
        ConfigError: If the file is unreadable or fails validation.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
            data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}", details=[str(e)]) from e
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot parse config file {path}", details=[str(e)]) from e
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        errors = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError("Invalid run configuration", details=errors) from e
