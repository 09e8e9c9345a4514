"""Equilibrium swelling, drug diffusivity and the asymptotic efflux decay rate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional

import numpy as np
from scipy import optimize

from .errors import EquilibriumError
from .schemas import ParamSet

logger = logging.getLogger(__name__)

J_LOWER = 1.0 + 1e-9
J_UPPER = 1e9
ROOT_XTOL = 4 * np.finfo(float).eps
ROOT_RTOL = 4 * np.finfo(float).eps
NEWTON_POLISH_STEPS = 3
RESIDUAL_TOL = 1e-12

DECAY_FACTORS = {"pi_squared": math.pi**2, "pi": math.pi}


def equilibrium_residual(J: float, chi: float, Ghat: float) -> float:
    """Left-hand side of the uniform-state balance; zero at equilibrium."""
    u = 1.0 / J
    return math.log1p(-u) + u + chi * u * u + Ghat * (u ** (1.0 / 3.0) - u)


def _residual_slope(J: float, chi: float, Ghat: float) -> float:
    return 1.0 / (J * (J - 1.0)) - 1.0 / J**2 - 2.0 * chi / J**3 + Ghat * (J**-2 - J ** (-4.0 / 3.0) / 3.0)


@lru_cache(maxsize=4096)
def equilibrium_swelling(chi: float, Ghat: float) -> float:
    """Return the equilibrium swelling ratio ``J_inf > 1``."""
    if chi < 0 or Ghat < 0:
        raise EquilibriumError(f"invalid parameters chi={chi!r}, Ghat={Ghat!r}")
    f_lo = equilibrium_residual(J_LOWER, chi, Ghat)
    f_hi = equilibrium_residual(J_UPPER, chi, Ghat)
    if f_lo * f_hi > 0:
        raise EquilibriumError(f"no finite equilibrium for chi={chi!r}, Ghat={Ghat!r}")

    J = optimize.brentq(
        equilibrium_residual, J_LOWER, J_UPPER, args=(chi, Ghat), xtol=ROOT_XTOL, rtol=ROOT_RTOL, maxiter=500
    )
    residual = abs(equilibrium_residual(J, chi, Ghat))
    for _ in range(NEWTON_POLISH_STEPS):
        slope = _residual_slope(J, chi, Ghat)
        if residual == 0.0 or slope == 0.0 or not math.isfinite(slope):
            break
        candidate = J - equilibrium_residual(J, chi, Ghat) / slope
        if not J_LOWER <= candidate <= J_UPPER:
            break
        candidate_residual = abs(equilibrium_residual(candidate, chi, Ghat))
        if candidate_residual >= residual:
            break
        J, residual = candidate, candidate_residual
    if residual > RESIDUAL_TOL:
        raise EquilibriumError(f"equilibrium residual {residual:.3e} above {RESIDUAL_TOL:g} for chi={chi!r}, Ghat={Ghat!r}")
    logger.debug("Equilibrium chi=%s Ghat=%s: J_inf=%.15g residual=%.2e", chi, Ghat, J, residual)
    return float(J)


def equilibrium_pressure(J: float) -> float:
    """Pressure of a uniform stress-free state with swelling ratio ``J``."""
    return J ** (-1.0 / 3.0) - 1.0 / J


def drug_diffusivity(J, beta: float):
    """Free-volume drug diffusivity; exactly zero where ``J <= 1``."""
    values = np.asarray(J, dtype=float)
    excess = values - 1.0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        result = np.where(excess > 0, np.exp(-beta / np.where(excess > 0, excess, 1.0)), 0.0)
    if np.ndim(result) == 0:
        return float(result)
    return result


def equilibrium_mobility(chi: float, Ghat: float, beta: float) -> float:
    J_inf = equilibrium_swelling(chi, Ghat)
    return drug_diffusivity(J_inf, beta) * J_inf ** (-2.0 / 3.0)


@dataclass(frozen=True)
class EquilibriumState:
    chi: float
    Ghat: float
    beta: float
    J_inf: float
    p_eq: float
    Dd_eq: float
    mobility_eq: float
    residual: float
    decay_rate: Optional[float] = None


def equilibrium_state(chi: float, Ghat: float, beta: float = 1.0, Dhat: Optional[float] = None) -> EquilibriumState:
    J_inf = equilibrium_swelling(chi, Ghat)
    Dd_eq = drug_diffusivity(J_inf, beta)
    mobility = Dd_eq * J_inf ** (-2.0 / 3.0)
    return EquilibriumState(
        chi=chi,
        Ghat=Ghat,
        beta=beta,
        J_inf=J_inf,
        p_eq=equilibrium_pressure(J_inf),
        Dd_eq=Dd_eq,
        mobility_eq=mobility,
        residual=equilibrium_residual(J_inf, chi, Ghat),
        decay_rate=None if Dhat is None else Dhat * mobility * DECAY_FACTORS["pi_squared"],
    )


def asymptotic_decay_rate(params: ParamSet, factor: str = "pi_squared") -> float:
    """Late-time exponential rate of the efflux from the slowest radial mode."""
    mobility = equilibrium_mobility(params.chi, params.Ghat, params.beta)
    return params.Dhat * mobility * DECAY_FACTORS[factor]


def decay_rate_candidates(params: ParamSet) -> dict[str, float]:
    return {name: asymptotic_decay_rate(params, name) for name in DECAY_FACTORS}


def resolve_decay_factor(fitted_rate: float, params: ParamSet) -> tuple[str, float]:
    """Name the candidate factor closest to a fitted tail rate and its relative error."""
    candidates = decay_rate_candidates(params)
    errors = {name: abs(fitted_rate - rate) / rate for name, rate in candidates.items()}
    winner = min(errors, key=errors.__getitem__)
    return winner, errors[winner]


@dataclass(frozen=True)
class EquilibriumRow:
    chi: float
    Ghat: float
    state: Optional[EquilibriumState]
    error: Optional[str] = None


def equilibrium_table(
    chis: Iterable[float], Ghats: Iterable[float], beta: float = 1.0, Dhat: Optional[float] = None
) -> list[EquilibriumRow]:
    """Equilibrium rows for every (Ghat, chi) pair; failures are kept per row."""
    rows: list[EquilibriumRow] = []
    chi_values = list(chis)
    for Ghat in Ghats:
        for chi in chi_values:
            try:
                state = equilibrium_state(chi, Ghat, beta, Dhat)
            except EquilibriumError as exc:
                logger.warning("Equilibrium failed for chi=%s Ghat=%s: %s", chi, Ghat, exc)
                rows.append(EquilibriumRow(chi=chi, Ghat=Ghat, state=None, error=str(exc)))
            else:
                rows.append(EquilibriumRow(chi=chi, Ghat=Ghat, state=state))
    return rows
