"""Drug diffusion through a precomputed swelling history."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .equilibrium import drug_diffusivity
from .errors import ConfigError, DrugLoadingError, GridMismatchError, ParameterMismatchError, ReleaseLevelError
from .gel import GelHistory
from .grid import Grid
from .schemas import ParamSet

logger = logging.getLogger(__name__)

NEGATIVE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class DrugField:
    """Drug concentration, mass and efflux at every output instant."""

    times: np.ndarray
    Nd: np.ndarray
    mass: np.ndarray
    efflux_boundary: np.ndarray
    efflux_mass: np.ndarray
    grid: Grid = field(repr=False)
    digest: str

    @property
    def initial_mass(self) -> float:
        return float(self.mass[0])


def _check_gel(gel: GelHistory, params: ParamSet) -> None:
    if gel.digest != params.gel_digest:
        raise ParameterMismatchError(f"gel history {gel.digest} was not built for parameters {params.gel_digest}")
    if gel.grid.M != params.M or gel.times.size != params.n_out + 1:
        raise GridMismatchError(
            f"gel history has M={gel.grid.M} and {gel.times.size} samples, "
            f"parameters need M={params.M} and {params.n_out + 1}"
        )


def _check_loading(d0: np.ndarray, M: int) -> np.ndarray:
    loading = np.asarray(d0, dtype=float)
    if loading.shape[0] != M or loading.ndim not in (1, 2):
        raise DrugLoadingError(f"loading has shape {loading.shape}, expected ({M},) or ({M}, n)")
    if not np.all(np.isfinite(loading)):
        raise DrugLoadingError("loading contains non-finite values")
    if np.any(loading < 0):
        raise DrugLoadingError(f"loading must be non-negative, minimum is {loading.min()!r}")
    return loading


def drug_conductivity(J: np.ndarray, lam_r: np.ndarray, params: ParamSet) -> np.ndarray:
    """Lagrangian drug diffusivity ``Dhat * Dd(J) / lam_r**2`` at midpoints."""
    return params.Dhat * drug_diffusivity(J, params.beta) / lam_r**2


def _operator(kappa: np.ndarray, grid: Grid, h: float) -> tuple[np.ndarray, float]:
    inner = grid.edges[1:-1]
    coupling = inner**2 * 0.5 * (kappa[:-1] + kappa[1:]) / grid.dR
    # ghost midpoint -Nd outside R=1 puts the edge value at zero
    sink = 2.0 * kappa[-1] / grid.dR
    ab = np.zeros((3, grid.M))
    ab[0, 1:] = -coupling
    ab[2, :-1] = -coupling
    ab[1] = grid.volumes / h
    ab[1, 1:] += coupling
    ab[1, :-1] += coupling
    ab[1, -1] += sink
    return ab, sink


@dataclass
class _Integration:
    mass: np.ndarray
    efflux_boundary: np.ndarray
    Nd: Optional[np.ndarray]


def _integrate(gel: GelHistory, loading: np.ndarray, params: ParamSet, substeps: int, keep_history: bool) -> _Integration:
    grid = gel.grid
    times = gel.times
    columns = loading.reshape(grid.M, -1)
    count = times.size
    mass = np.empty((count, columns.shape[1]))
    efflux = np.empty((count, columns.shape[1]))
    history = np.empty((count, grid.M, columns.shape[1])) if keep_history else None

    current = columns.copy()
    kappa0 = drug_conductivity(gel.J[0], gel.lam_r[0], params)
    mass[0] = grid.integrate(current)
    efflux[0] = 4.0 * math.pi * (2.0 * kappa0[-1] / grid.dR) * current[-1]
    if history is not None:
        history[0] = current

    for k in range(1, count):
        t0, t1 = float(times[k - 1]), float(times[k])
        h = (t1 - t0) / substeps
        for s in range(1, substeps + 1):
            if substeps == 1:
                J, lam_r = gel.J[k], gel.lam_r[k]
            else:
                J, lam_r = gel.coefficients_at(t0 + s * h)
            ab, sink = _operator(drug_conductivity(J, lam_r, params), grid, h)
            current = solve_banded((1, 1), ab, (grid.volumes / h)[:, None] * current)
        mass[k] = grid.integrate(current)
        efflux[k] = 4.0 * math.pi * sink * current[-1]
        if history is not None:
            history[k] = current
    return _Integration(mass=mass, efflux_boundary=efflux, Nd=history)


def integrate_loadings(
    gel: GelHistory, loadings: np.ndarray, params: ParamSet, substeps: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Boundary efflux and mass for a batch of loadings (columns), without field history."""
    _check_gel(gel, params)
    loading = _check_loading(loadings, gel.grid.M)
    result = _integrate(gel, loading, params, substeps, keep_history=False)
    return result.efflux_boundary, result.mass


def solve_drug(gel: GelHistory, d0: np.ndarray, params: ParamSet, substeps: int = 1) -> DrugField:
    """Implicit-Euler drug transport for one loading over the gel's output grid.

    Coefficients are taken at the end of each (sub)step; with ``substeps > 1``
    they are linearly interpolated in time between stored gel instants.
    """
    if substeps < 1:
        raise ConfigError(f"substeps: must be at least 1, got {substeps}", key="substeps")
    _check_gel(gel, params)
    loading = _check_loading(d0, gel.grid.M)
    if loading.ndim != 1:
        raise DrugLoadingError("solve_drug takes a single loading; use integrate_loadings for batches")
    result = _integrate(gel, loading, params, substeps, keep_history=True)
    mass = result.mass[:, 0]
    efflux_mass = np.empty_like(mass)
    efflux_mass[0] = result.efflux_boundary[0, 0]
    efflux_mass[1:] = -np.diff(mass) / np.diff(gel.times)
    logger.debug("Drug solve finished: initial mass %.6g, final mass %.6g", mass[0], mass[-1])
    return DrugField(
        times=gel.times,
        Nd=result.Nd[:, :, 0],
        mass=mass,
        efflux_boundary=result.efflux_boundary[:, 0],
        efflux_mass=efflux_mass,
        grid=gel.grid,
        digest=params.basis_digest,
    )


def efflux(drug: DrugField, definition: str = "boundary") -> np.ndarray:
    """Efflux series: boundary flux (default) or minus the mass change per output interval."""
    if definition == "boundary":
        return drug.efflux_boundary
    if definition == "mass":
        return drug.efflux_mass
    raise ConfigError(f"definition: expected 'boundary' or 'mass', got {definition!r}", key="definition")


def fractional_release(drug: DrugField) -> np.ndarray:
    if not drug.initial_mass > 0:
        raise DrugLoadingError("fractional release needs a positive initial mass")
    return np.clip(1.0 - drug.mass / drug.initial_mass, 0.0, 1.0)


def release_time(drug: DrugField | tuple[np.ndarray, np.ndarray], level: float) -> float:
    """First time the release curve reaches ``level``, interpolated between samples."""
    if isinstance(drug, DrugField):
        times, released = drug.times, fractional_release(drug)
    else:
        times, released = (np.asarray(values, dtype=float) for values in drug)
    if not 0.0 <= level <= 1.0:
        raise ConfigError(f"level: must lie in [0, 1], got {level!r}", key="level")
    if level == 0.0:
        return 0.0
    reached = np.nonzero(released >= level)[0]
    if reached.size == 0:
        raise ReleaseLevelError(f"release level {level!r} not reached by t={times[-1]!r}")
    k = int(reached[0])
    if k == 0:
        return float(times[0])
    r0, r1 = released[k - 1], released[k]
    weight = (level - r0) / (r1 - r0)
    return float(times[k - 1] + weight * (times[k] - times[k - 1]))


def tail_decay_rate(times: np.ndarray, F: np.ndarray, fraction: float = 0.1) -> float:
    """Least-squares exponential rate of ``F`` over the final ``fraction`` of the horizon."""
    times = np.asarray(times, dtype=float)
    F = np.asarray(F, dtype=float)
    start = times[-1] - fraction * (times[-1] - times[0])
    window = (times >= start) & (F > 0)
    if np.count_nonzero(window) < 3:
        return float("nan")
    slope, _ = np.polyfit(times[window], np.log(F[window]), 1)
    return float(-slope)


def sphere_release_fraction(D_eff: float, times: np.ndarray, terms: int = 2000) -> np.ndarray:
    """Released fraction of a uniformly loaded unit sphere with absorbing surface."""
    times = np.asarray(times, dtype=float)
    n = np.arange(1, terms + 1, dtype=float)
    modes = np.exp(-np.outer(times, n**2) * math.pi**2 * D_eff) / n**2
    released = 1.0 - 6.0 / math.pi**2 * modes.sum(axis=1)
    released[times <= 0] = 0.0
    return released
