"""Pydantic schemas for model parameters, solver settings and run manifests."""

from __future__ import annotations

import hashlib
import math
from datetime import datetime, timezone
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

BOLTZMANN = 1.380649e-23
TOTAL_DRUG = 4.0 * math.pi / 3.0
GRID_TOLERANCE = 1e-9


def _digest(*items: Any) -> str:
    payload = "|".join(repr(item) for item in items)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


def _snap_to_grid(name: str, value: float, dt_out: float) -> float:
    steps = round(value / dt_out)
    if steps < 1 or abs(steps * dt_out - value) > GRID_TOLERANCE * max(1.0, abs(value)):
        raise ValueError(f"{name}={value!r} is not a multiple of dt_out={dt_out!r}")
    return steps * dt_out


class DimensionalParams(BaseModel):
    """Physical constants in SI units."""

    model_config = ConfigDict(frozen=True)

    R0: float = 2e-3
    Dw0: float
    Dd_inf: float
    G: float
    T: float
    nu_w: float
    chi: float = 0.5
    a: float = 1.5
    beta: float = 1.0

    @field_validator("R0", "Dw0", "Dd_inf", "G", "T", "nu_w", "a")
    @classmethod
    def strictly_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be strictly positive")
        return value

    @field_validator("chi", "beta")
    @classmethod
    def non_negative(cls, value: float) -> float:
        if not value >= 0:
            raise ValueError("must be non-negative")
        return value

    @property
    def time_scale_s(self) -> float:
        return self.R0**2 / self.Dw0


class ParamSet(BaseModel):
    """Dimensionless model constants plus grid and horizon controls."""

    model_config = ConfigDict(frozen=True)

    chi: float
    Ghat: float
    Dhat: float
    tau: float
    a: float = 1.5
    beta: float = 1.0
    eps: float = 0.0
    T_end: float = 50.0
    M: int = 199
    dt_out: float = 0.0125
    reg: float = 1e-6
    time_scale_s: Optional[float] = None
    defaults_used: tuple[str, ...] = ()

    @field_validator("chi")
    @classmethod
    def chi_in_range(cls, value: float) -> float:
        if not 0.0 <= value <= 3.0:
            raise ValueError("must lie in [0, 3]")
        return value

    @field_validator("Ghat", "a", "dt_out")
    @classmethod
    def strictly_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be strictly positive")
        return value

    @field_validator("Dhat")
    @classmethod
    def dhat_in_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("must lie in (0, 1]")
        return value

    @field_validator("beta", "reg")
    @classmethod
    def non_negative(cls, value: float) -> float:
        if not value >= 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("eps")
    @classmethod
    def eps_in_range(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError("must lie in [0, 1)")
        return value

    @field_validator("M")
    @classmethod
    def enough_cells(cls, value: int) -> int:
        if value < 3:
            raise ValueError("must be at least 3")
        return value

    @model_validator(mode="before")
    @classmethod
    def snap_times(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        try:
            dt_out = float(data.get("dt_out", 0.0125))
        except (TypeError, ValueError):
            return data
        if not dt_out > 0:
            return data
        data.setdefault("T_end", 50.0)
        for name in ("tau", "T_end"):
            if name in data and data[name] is not None:
                try:
                    value = float(data[name])
                except (TypeError, ValueError):
                    raise ValueError(f"{name}={data[name]!r} is not a number") from None
                if not value > 0:
                    raise ValueError(f"{name} must be strictly positive")
                data[name] = _snap_to_grid(name, value, dt_out)
        return data

    @model_validator(mode="after")
    def horizon_covers_period(self) -> "ParamSet":
        if self.T_end < self.tau:
            raise ValueError(f"T_end={self.T_end!r} must be at least tau={self.tau!r}")
        return self

    @property
    def n_out(self) -> int:
        return round(self.T_end / self.dt_out)

    @property
    def n_tau(self) -> int:
        return round(self.tau / self.dt_out)

    def output_times(self) -> np.ndarray:
        return np.arange(self.n_out + 1) * self.dt_out

    @property
    def gel_digest(self) -> str:
        return _digest("gel", self.chi, self.Ghat, self.a, self.M, self.T_end, self.dt_out, self.reg)

    @property
    def basis_digest(self) -> str:
        return _digest(
            "basis", self.chi, self.Ghat, self.Dhat, self.a, self.beta, self.M, self.T_end, self.dt_out, self.reg
        )

    @property
    def digest(self) -> str:
        return _digest(
            "params",
            self.chi,
            self.Ghat,
            self.Dhat,
            self.a,
            self.beta,
            self.eps,
            self.tau,
            self.M,
            self.T_end,
            self.dt_out,
            self.reg,
        )

    def to_config_text(self) -> str:
        keys = ("chi", "Ghat", "Dhat", "a", "beta", "eps", "tau", "T_end", "M", "dt_out")
        return "\n".join(f"{key}={getattr(self, key)!r}" for key in keys) + "\n"


class StepSchedule(BaseModel):
    """Time-step ramp and Newton controls for the swelling integrator."""

    model_config = ConfigDict(frozen=True)

    dt_init: float = 1e-6
    dt_max: float = 0.0125
    growth: float = 1.2
    newton_tol: float = 1e-10
    newton_max: int = 50
    max_backtracks: int = 8
    min_dt_divisor: float = 1024.0
    max_swelling_change: float = 0.25

    @field_validator("dt_init", "dt_max", "newton_tol", "max_swelling_change")
    @classmethod
    def strictly_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be strictly positive")
        return value

    @field_validator("growth")
    @classmethod
    def growth_at_least_one(cls, value: float) -> float:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @model_validator(mode="after")
    def ramp_is_ordered(self) -> "StepSchedule":
        if self.dt_init > self.dt_max:
            raise ValueError("dt_init must not exceed dt_max")
        return self

    @classmethod
    def for_params(cls, params: ParamSet, **overrides: Any) -> "StepSchedule":
        values: dict[str, Any] = {"dt_max": params.dt_out}
        values.update(overrides)
        return cls(**values)

    @property
    def dt_min(self) -> float:
        return self.dt_init / self.min_dt_divisor


class RunManifest(BaseModel):
    """Provenance record written next to every CLI output."""

    subcommand: str
    params: Optional[dict[str, Any]] = None
    digests: dict[str, str] = Field(default_factory=dict)
    inputs: list[str] = Field(default_factory=list)
    outputs: list[str] = Field(default_factory=list)
    cache_hits: int = 0
    cache_misses: int = 0
    stage_seconds: dict[str, float] = Field(default_factory=dict)
    status: str = "ok"
    notes: list[str] = Field(default_factory=list)
    version: str = ""
    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    @field_validator("subcommand")
    @classmethod
    def subcommand_not_empty(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("subcommand cannot be empty")
        return value
