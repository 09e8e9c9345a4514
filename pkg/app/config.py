"""Configuration: environment settings, key=value documents and unit scaling."""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Mapping

from pydantic import BaseModel, ValidationError

from .errors import ConfigError
from .schemas import BOLTZMANN, DimensionalParams, ParamSet

logger = logging.getLogger(__name__)

CACHE_DIR = Path(os.getenv("GELRELEASE_CACHE_DIR", ".gelrelease-cache"))
LEDGER_URL = os.getenv("GELRELEASE_LEDGER_URL") or None
THREADS = max(1, int(os.getenv("GELRELEASE_THREADS", "1")))
LOG_LEVEL = os.getenv("GELRELEASE_LOG_LEVEL", "INFO").upper()

MODEL_KEYS = ("chi", "Ghat", "Dhat", "a", "beta", "eps", "tau", "T_end", "M", "dt_out", "reg")
DIMENSIONAL_KEYS = ("G", "T", "nu_w", "R0", "Dw0", "Dd_inf")
DEFAULTS: dict[str, Any] = {"a": 1.5, "beta": 1.0, "eps": 0.0, "T_end": 50.0, "M": 199, "dt_out": 0.0125}
REQUIRED_KEYS = ("chi", "Ghat", "Dhat", "tau")
INTEGER_KEYS = {"M"}


def validation_config_error(exc: ValidationError) -> ConfigError:
    """Turn the first pydantic error into a ConfigError naming the offending key."""
    errors = exc.errors()
    if not errors:
        return ConfigError(str(exc))
    first = errors[0]
    location = ".".join(str(part) for part in first.get("loc", ()) if part != "__root__")
    message = str(first.get("msg", "invalid value"))
    if message.startswith("Value error, "):
        message = message[len("Value error, ") :]
    if location:
        return ConfigError(f"{location}: {message}", key=location)
    key = next((name for name in MODEL_KEYS if message.startswith(f"{name}=")), None)
    return ConfigError(message, key=key)


def _validated(model: type[BaseModel], values: Mapping[str, Any]) -> Any:
    try:
        return model(**values)
    except ValidationError as exc:
        raise validation_config_error(exc) from exc


def _parse_value(key: str, raw: str) -> Any:
    try:
        if key in INTEGER_KEYS:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}", key=key) from exc


def tokenize_config(text: str) -> dict[str, str]:
    """Split a flat key=value document into raw string values."""
    values: dict[str, str] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        for token in content.replace(",", " ").split():
            key, sep, raw = token.partition("=")
            key = key.strip()
            if not sep or not key or not raw.strip():
                raise ConfigError(f"line {line_number}: expected key=value, got {token!r}", key=key or None)
            if key in values:
                raise ConfigError(f"{key}: duplicate key", key=key)
            values[key] = raw.strip()
    return values


def parse_config(text: str) -> ParamSet:
    """Parse a key=value document into a validated ParamSet.

    Either ``Ghat`` or the dimensional block ``G``, ``T``, ``nu_w`` must be
    present, and either ``Dhat`` or ``Dd_inf`` with ``Dw0``.
    """
    raw = tokenize_config(text)
    if not raw:
        raise ConfigError("empty configuration; required keys: " + ", ".join(REQUIRED_KEYS))
    known = set(MODEL_KEYS) | set(DIMENSIONAL_KEYS)
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown key", key=key)
    values = {key: _parse_value(key, value) for key, value in raw.items()}

    dimensional = {key: values.pop(key) for key in DIMENSIONAL_KEYS if key in values}
    time_scale_s = None
    if dimensional:
        if "Ghat" in values and {"G", "T", "nu_w"} & dimensional.keys():
            raise ConfigError("Ghat: give either Ghat or the dimensional G, T, nu_w, not both", key="Ghat")
        if "Dhat" in values and {"Dd_inf"} & dimensional.keys():
            raise ConfigError("Dhat: give either Dhat or the dimensional Dd_inf, Dw0, not both", key="Dhat")
        if "Ghat" not in values:
            missing = [key for key in ("G", "T", "nu_w") if key not in dimensional]
            if missing:
                raise ConfigError(f"{missing[0]}: required to derive Ghat", key=missing[0])
            for key in ("G", "T", "nu_w"):
                if not dimensional[key] > 0:
                    raise ConfigError(f"{key}: must be strictly positive", key=key)
            values["Ghat"] = stiffness_ratio(dimensional["G"], dimensional["T"], dimensional["nu_w"])
        if "Dhat" not in values and "Dd_inf" in dimensional:
            if "Dw0" not in dimensional:
                raise ConfigError("Dw0: required to derive Dhat", key="Dw0")
            for key in ("Dd_inf", "Dw0"):
                if not dimensional[key] > 0:
                    raise ConfigError(f"{key}: must be strictly positive", key=key)
            values["Dhat"] = dimensional["Dd_inf"] / dimensional["Dw0"]
        if "R0" in dimensional and "Dw0" in dimensional:
            if not (dimensional["R0"] > 0 and dimensional["Dw0"] > 0):
                raise ConfigError("R0: R0 and Dw0 must be strictly positive", key="R0")
            time_scale_s = dimensional["R0"] ** 2 / dimensional["Dw0"]

    missing = [key for key in REQUIRED_KEYS if key not in values]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing), key=missing[0])

    defaults_used = tuple(key for key in DEFAULTS if key not in values)
    for key in defaults_used:
        values[key] = DEFAULTS[key]
    if defaults_used:
        logger.debug("Config defaults used: %s", ", ".join(defaults_used))
    return _validated(ParamSet, {**values, "time_scale_s": time_scale_s, "defaults_used": defaults_used})


def load_config(path: str | Path) -> ParamSet:
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from exc
    return parse_config(text)


def stiffness_ratio(G: float, T: float, nu_w: float) -> float:
    return nu_w * G / (BOLTZMANN * T)


def nondimensionalize(
    dim: DimensionalParams | Mapping[str, Any],
    *,
    tau: float = 12.0,
    eps: float = 0.0,
    T_end: float = 50.0,
    M: int = 199,
    dt_out: float = 0.0125,
) -> ParamSet:
    """Scale SI constants to the dimensionless parameter set.

    The time scale ``R0**2 / Dw0`` (seconds per dimensionless unit) is kept on
    the result so that release periods can be converted back.
    """
    if not isinstance(dim, DimensionalParams):
        dim = _validated(DimensionalParams, dim)
    values = {
        "chi": dim.chi,
        "Ghat": stiffness_ratio(dim.G, dim.T, dim.nu_w),
        "Dhat": dim.Dd_inf / dim.Dw0,
        "a": dim.a,
        "beta": dim.beta,
        "eps": eps,
        "tau": tau,
        "T_end": T_end,
        "M": M,
        "dt_out": dt_out,
        "time_scale_s": dim.time_scale_s,
    }
    return _validated(ParamSet, values)


def units_to_hours(t: float, params: ParamSet) -> float:
    if params.time_scale_s is None:
        raise ConfigError("time_scale_s: parameters carry no dimensional time scale", key="time_scale_s")
    return t * params.time_scale_s / 3600.0


def hours_to_units(hours: float, params: ParamSet) -> float:
    if params.time_scale_s is None:
        raise ConfigError("time_scale_s: parameters carry no dimensional time scale", key="time_scale_s")
    return hours * 3600.0 / params.time_scale_s
