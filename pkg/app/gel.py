"""Swelling of the spherical gel on the staggered Lagrangian grid.

Unknowns per cell ``i`` are interleaved as ``[Nw_i, p_i, r_{i+1}]`` with
``r_0 = 0`` eliminated. Residual rows per cell follow the same order:
water conservation, incompressibility and the radial stress balance at the
outer edge of the cell (the traction-free condition for the last cell).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .equilibrium import equilibrium_pressure
from .errors import GelSolverError
from .grid import Grid, build_grid
from .schemas import ParamSet, StepSchedule

logger = logging.getLogger(__name__)

LOWER_BANDS = 3
UPPER_BANDS = 4
FD_STEP = 1.5e-8
STAGNATION = 1e-12


@dataclass(frozen=True, eq=False)
class GelState:
    t: float
    r: np.ndarray
    Nw: np.ndarray
    p: np.ndarray

    def pack(self) -> np.ndarray:
        x = np.empty(3 * self.Nw.size)
        x[0::3] = self.Nw
        x[1::3] = self.p
        x[2::3] = self.r[1:]
        return x

    @classmethod
    def unpack(cls, t: float, x: np.ndarray) -> "GelState":
        r = np.concatenate(([0.0], x[2::3]))
        return cls(t=t, r=r, Nw=x[0::3].copy(), p=x[1::3].copy())


def stretches(r: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Radial and hoop stretch at midpoints for edge positions ``r`` (last axis)."""
    lam_r = np.diff(r, axis=-1) / grid.dR
    lam_theta = (r[..., :-1] + r[..., 1:]) / (2.0 * grid.midpoints)
    return lam_r, lam_theta


def chemical_potential(Nw: np.ndarray, p: np.ndarray, chi: float, Ghat: float) -> np.ndarray:
    swell = 1.0 + Nw
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(Nw / swell) + (swell + chi) / swell**2 + Ghat * p


def water_mobility(Nw: np.ndarray, J: np.ndarray, lam_r: np.ndarray, a: float) -> np.ndarray:
    return Nw * J**a / lam_r**2


def _outer_traction(lam_r: np.ndarray, p: np.ndarray, r: np.ndarray, dR: float) -> np.ndarray:
    """Radial traction at ``R = 1`` carried out from the last midpoint by the stress balance."""
    sigma_r = lam_r[..., -1] - 1.0 / lam_r[..., -1]
    hoop = r[..., -1]
    sigma_theta = hoop - 1.0 / hoop
    return sigma_r - p[..., -1] * hoop**2 - dR * (sigma_r - sigma_theta)


def surface_traction(state: GelState, grid: Grid) -> float:
    lam_r, _ = stretches(state.r, grid)
    return float(_outer_traction(lam_r, state.p, state.r, grid.dR))


def is_admissible(state: GelState) -> bool:
    return bool(np.all(state.Nw > 0) and np.all(np.diff(state.r) > 0))


def initial_state(grid: Grid, reg: float = 1e-6) -> GelState:
    """Undeformed gel holding a uniform water seed ``reg``."""
    if reg < 0:
        raise GelSolverError(f"water seed must be non-negative, got {reg!r}")
    return GelState(
        t=0.0,
        r=np.array(grid.edges, dtype=float),
        Nw=np.full(grid.M, float(reg)),
        p=np.zeros(grid.M),
    )


class _StepResidual:
    """Implicit-Euler residual for one step with mobility frozen at the old state."""

    def __init__(self, old: GelState, dt: float, params: ParamSet, grid: Grid) -> None:
        self.grid = grid
        self.dt = dt
        self.chi = params.chi
        self.Ghat = params.Ghat
        self.old_Nw = old.Nw
        lam_r, lam_theta = stretches(old.r, grid)
        cell_mobility = water_mobility(old.Nw, lam_r * lam_theta**2, lam_r, params.a)
        edges = grid.edges
        conductance = np.zeros(grid.M + 1)
        conductance[1:-1] = edges[1:-1] ** 2 * 0.5 * (cell_mobility[:-1] + cell_mobility[1:]) / grid.dR
        conductance[-1] = cell_mobility[-1] / (0.5 * grid.dR)
        self.conductance = conductance

    def fluxes(self, Nw: np.ndarray, p: np.ndarray) -> np.ndarray:
        mu = chemical_potential(Nw, p, self.chi, self.Ghat)
        flux = np.zeros(self.grid.M + 1)
        flux[1:-1] = self.conductance[1:-1] * np.diff(mu)
        flux[-1] = self.conductance[-1] * (0.0 - mu[-1])
        return flux

    def __call__(self, x: np.ndarray) -> np.ndarray:
        grid = self.grid
        Nw = x[0::3]
        p = x[1::3]
        r = np.concatenate(([0.0], x[2::3]))
        lam_r, lam_theta = stretches(r, grid)

        flux = self.fluxes(Nw, p)
        water = Nw - self.old_Nw - self.dt * np.diff(flux) / grid.volumes
        incompressibility = lam_r * lam_theta**2 - (1.0 + Nw)

        sigma_r = lam_r - 1.0 / lam_r
        inner = grid.edges[1:-1]
        hoop_edge = r[1:-1] / inner
        sigma_theta_edge = hoop_edge - 1.0 / hoop_edge
        mechanics = np.empty(grid.M)
        mechanics[:-1] = (
            np.diff(sigma_r)
            + 2.0 * grid.dR * (0.5 * (sigma_r[:-1] + sigma_r[1:]) - sigma_theta_edge) / inner
            - hoop_edge**2 * np.diff(p)
        )
        mechanics[-1] = _outer_traction(lam_r, p, r, grid.dR)

        residual = np.empty_like(x)
        residual[0::3] = water
        residual[1::3] = incompressibility
        residual[2::3] = mechanics
        return residual


def banded_jacobian(
    fun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    f0: np.ndarray,
    lower: int = LOWER_BANDS,
    upper: int = UPPER_BANDS,
) -> np.ndarray:
    """Forward-difference Jacobian in ``solve_banded`` storage using column colouring."""
    size = x.size
    width = lower + upper + 1
    ab = np.zeros((width, size))
    floor = np.ones(size)
    floor[0::3] = 1e-12
    steps = FD_STEP * np.maximum(np.abs(x), floor)
    for colour in range(width):
        columns = np.arange(colour, size, width)
        shifted = x.copy()
        shifted[columns] += steps[columns]
        delta = fun(shifted) - f0
        for offset in range(-upper, lower + 1):
            rows = columns + offset
            valid = (rows >= 0) & (rows < size)
            ab[upper + offset, columns[valid]] = delta[rows[valid]] / steps[columns[valid]]
    return ab


@dataclass(frozen=True)
class NewtonReport:
    converged: bool
    iterations: int
    residual: float


def _newton(residual: _StepResidual, x0: np.ndarray, schedule: StepSchedule) -> tuple[np.ndarray, NewtonReport]:
    x = x0.copy()
    f = residual(x)
    norm = float(np.max(np.abs(f)))
    for iteration in range(schedule.newton_max + 1):
        if not math.isfinite(norm):
            return x, NewtonReport(False, iteration, norm)
        if norm <= schedule.newton_tol:
            return x, NewtonReport(True, iteration, norm)
        if iteration == schedule.newton_max:
            break
        ab = banded_jacobian(residual, x, f)
        try:
            dx = solve_banded((LOWER_BANDS, UPPER_BANDS), ab, -f)
        except (np.linalg.LinAlgError, ValueError):
            return x, NewtonReport(False, iteration, norm)
        if not np.all(np.isfinite(dx)):
            return x, NewtonReport(False, iteration, norm)
        scale = 1.0 + float(np.max(np.abs(x)))
        if float(np.max(np.abs(dx))) <= STAGNATION * scale:
            # update below round-off: the residual sits at its floating-point floor
            return x, NewtonReport(True, iteration, norm)

        damping = 1.0
        for _ in range(schedule.max_backtracks + 1):
            trial = x + damping * dx
            if np.all(trial[0::3] > 0) and np.all(np.diff(np.concatenate(([0.0], trial[2::3]))) > 0):
                f_trial = residual(trial)
                norm_trial = float(np.max(np.abs(f_trial)))
                if math.isfinite(norm_trial) and norm_trial < norm:
                    x, f, norm = trial, f_trial, norm_trial
                    break
            damping *= 0.5
        else:
            return x, NewtonReport(False, iteration, norm)
    return x, NewtonReport(False, schedule.newton_max, norm)


def _try_step(
    state: GelState, dt: float, params: ParamSet, schedule: StepSchedule, grid: Grid
) -> tuple[Optional[tuple[GelState, float, NewtonReport]], float]:
    """One implicit step, or ``None`` when Newton fails or a cell swells too much.

    The second item is the largest relative change of ``1 + Nw`` over the step,
    ``inf`` when Newton did not converge.
    """
    residual = _StepResidual(state, dt, params, grid)
    x, report = _newton(residual, state.pack(), schedule)
    if not report.converged:
        logger.debug("Newton failed at t=%.6g dt=%.3g residual=%.3e", state.t, dt, report.residual)
        return None, math.inf
    new_state = GelState.unpack(state.t + dt, x)
    swelling_change = float(np.max(np.abs(new_state.Nw - state.Nw) / (1.0 + state.Nw)))
    if swelling_change > schedule.max_swelling_change and dt > schedule.dt_min:
        logger.debug("Step too coarse at t=%.6g dt=%.3g: swelling change %.3g", state.t, dt, swelling_change)
        return None, swelling_change
    uptake = 4.0 * math.pi * dt * float(residual.fluxes(new_state.Nw, new_state.p)[-1])
    return (new_state, uptake, report), swelling_change


@dataclass
class _StepStats:
    accepted: int = 0
    rejected: int = 0
    uptake: float = 0.0
    last_dt: float = 0.0


def _advance(
    state: GelState, dt: float, params: ParamSet, schedule: StepSchedule, grid: Grid, stats: _StepStats
) -> GelState:
    target = state.t + dt
    remaining = dt
    h = dt
    current = state
    while remaining > 0:
        h = min(h, remaining)
        attempt, swelling_change = _try_step(current, h, params, schedule, grid)
        if attempt is None:
            stats.rejected += 1
            if math.isfinite(swelling_change):
                h = max(h * max(0.2, 0.8 * schedule.max_swelling_change / swelling_change), schedule.dt_min)
                continue
            h *= 0.5
            if h < schedule.dt_min:
                raise GelSolverError(
                    f"step size fell below {schedule.dt_min:.3g} at t={current.t:.6g}",
                    t=current.t,
                    dt=h,
                )
            continue
        current, uptake, _ = attempt
        stats.accepted += 1
        stats.uptake += uptake
        stats.last_dt = h
        remaining = target - current.t
        if remaining <= 1e-12 * max(1.0, abs(target)):
            break
    return GelState(t=target, r=current.r, Nw=current.Nw, p=current.p)


def step_gel(
    state: GelState, dt: float, params: ParamSet, schedule: Optional[StepSchedule] = None, grid: Optional[Grid] = None
) -> GelState:
    """Advance the gel by exactly ``dt``, halving the step on Newton failure."""
    grid = grid or build_grid(params.M)
    schedule = schedule or StepSchedule.for_params(params)
    if state.Nw.size != grid.M:
        raise GelSolverError(f"state has {state.Nw.size} cells, grid has {grid.M}")
    if not is_admissible(state):
        raise GelSolverError("state must have positive water content and increasing r", t=state.t)
    return _advance(state, dt, params, schedule, grid, _StepStats())


@dataclass(frozen=True, eq=False)
class GelHistory:
    """Gel fields sampled at every output instant."""

    times: np.ndarray
    r: np.ndarray
    Nw: np.ndarray
    p: np.ndarray
    water_uptake: np.ndarray
    grid: Grid = field(repr=False)
    chi: float
    Ghat: float
    digest: str
    kind: str = "transient"
    steps: int = 0
    rejected: int = 0

    def __post_init__(self) -> None:
        for name in ("times", "r", "Nw", "p", "water_uptake"):
            getattr(self, name).setflags(write=False)

    @cached_property
    def lam_r(self) -> np.ndarray:
        return stretches(self.r, self.grid)[0]

    @cached_property
    def lam_theta(self) -> np.ndarray:
        return stretches(self.r, self.grid)[1]

    @cached_property
    def J(self) -> np.ndarray:
        return self.lam_r * self.lam_theta**2

    @cached_property
    def mu_w(self) -> np.ndarray:
        return chemical_potential(self.Nw, self.p, self.chi, self.Ghat)

    @property
    def surface_radius(self) -> np.ndarray:
        return self.r[:, -1]

    @property
    def water_content(self) -> np.ndarray:
        return self.grid.integrate(self.Nw.T)

    def state(self, k: int) -> GelState:
        return GelState(t=float(self.times[k]), r=self.r[k].copy(), Nw=self.Nw[k].copy(), p=self.p[k].copy())

    def coefficients_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Swelling ratio and radial stretch linearly interpolated in time."""
        k = int(np.searchsorted(self.times, t, side="left"))
        if k <= 0:
            return self.J[0], self.lam_r[0]
        if k >= self.times.size:
            return self.J[-1], self.lam_r[-1]
        t0, t1 = self.times[k - 1], self.times[k]
        w = (t - t0) / (t1 - t0)
        return (1 - w) * self.J[k - 1] + w * self.J[k], (1 - w) * self.lam_r[k - 1] + w * self.lam_r[k]


def solve_gel(params: ParamSet, grid: Optional[Grid] = None, schedule: Optional[StepSchedule] = None) -> GelHistory:
    """Integrate swelling to ``T_end`` and record every output instant."""
    grid = grid or build_grid(params.M)
    schedule = schedule or StepSchedule.for_params(params)
    times = params.output_times()
    state = initial_state(grid, params.reg)
    if not is_admissible(state):
        raise GelSolverError("initial water seed must be positive", t=0.0)

    count = times.size
    r = np.empty((count, grid.M + 1))
    Nw = np.empty((count, grid.M))
    p = np.empty((count, grid.M))
    uptake = np.zeros(count)
    r[0], Nw[0], p[0] = state.r, state.Nw, state.p

    logger.info("Gel solve started: chi=%s Ghat=%s M=%d T_end=%s", params.chi, params.Ghat, grid.M, params.T_end)
    stats = _StepStats()
    dt = schedule.dt_init
    for k in range(1, count):
        target = float(times[k])
        while target - state.t > 1e-12 * max(1.0, target):
            remaining = target - state.t
            h = remaining if dt >= remaining * 0.99 else dt
            rejected_before = stats.rejected
            state = _advance(state, h, params, schedule, grid, stats)
            if stats.rejected > rejected_before:
                dt = max(stats.last_dt, schedule.dt_init)
            elif h >= dt:
                dt = min(schedule.dt_max, dt * schedule.growth)
        state = GelState(t=target, r=state.r, Nw=state.Nw, p=state.p)
        r[k], Nw[k], p[k] = state.r, state.Nw, state.p
        uptake[k] = stats.uptake
    logger.info("Gel solve finished: %d steps, %d rejected", stats.accepted, stats.rejected)

    return GelHistory(
        times=times,
        r=r,
        Nw=Nw,
        p=p,
        water_uptake=uptake,
        grid=grid,
        chi=params.chi,
        Ghat=params.Ghat,
        digest=params.gel_digest,
        steps=stats.accepted,
        rejected=stats.rejected,
    )


def uniform_gel_history(params: ParamSet, J: float, grid: Optional[Grid] = None) -> GelHistory:
    """Frozen, uniformly swollen gel used as a quasi-static reference."""
    grid = grid or build_grid(params.M)
    times = params.output_times()
    count = times.size
    stretch = J ** (1.0 / 3.0)
    return GelHistory(
        times=times,
        r=np.tile(stretch * grid.edges, (count, 1)),
        Nw=np.full((count, grid.M), J - 1.0),
        p=np.full((count, grid.M), equilibrium_pressure(J)),
        water_uptake=np.zeros(count),
        grid=grid,
        chi=params.chi,
        Ghat=params.Ghat,
        digest=params.gel_digest,
        kind="uniform",
    )
