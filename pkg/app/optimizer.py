"""Partial-efflux bases and the convex loading problem over the capped simplex."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from .drug import integrate_loadings, tail_decay_rate
from .errors import ConfigError, GridMismatchError, InfeasibleBudgetError
from .gel import GelHistory
from .grid import Grid
from .schemas import TOTAL_DRUG, ParamSet

logger = logging.getLogger(__name__)

MAX_DRUG_FRACTION = 0.2
BASIS_INTEGRAL_TOLERANCE = 1e-3
PG_TOLERANCE = 1e-8
MAX_ITERATIONS = 200_000
EXHAUSTIVE_LIMIT = 8


@dataclass(frozen=True)
class PacketBasis:
    """Unit-mass packet filling cell ``index``."""

    index: int
    lower: float
    upper: float
    height: float

    def loading(self, grid: Grid) -> np.ndarray:
        values = np.zeros(grid.M)
        values[self.index] = self.height
        return values


def packet_bases(grid: Grid) -> list[PacketBasis]:
    heights = grid.packet_heights
    return [
        PacketBasis(index=i, lower=float(grid.edges[i]), upper=float(grid.edges[i + 1]), height=float(heights[i]))
        for i in range(grid.M)
    ]


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    weights = np.zeros(times.size)
    if times.size < 2:
        return weights
    gaps = np.diff(times)
    weights[:-1] += 0.5 * gaps
    weights[1:] += 0.5 * gaps
    return weights


@dataclass(frozen=True, eq=False)
class EffluxBasis:
    times: np.ndarray
    f: np.ndarray
    integrals: np.ndarray
    digest: str
    grid: Grid = field(repr=False)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.times)

    def tail_rates(self, fraction: float = 0.1) -> np.ndarray:
        return np.array([tail_decay_rate(self.times, curve, fraction) for curve in self.f])

    def decay_rate(self, fraction: float = 0.1) -> float:
        return tail_decay_rate(self.times, self.f.sum(axis=0), fraction)


@dataclass(frozen=True, eq=False)
class TargetProfile:
    """Piecewise-constant target efflux; the sample at ``tau`` is on the plateau."""

    tau: float
    times: np.ndarray
    samples: np.ndarray
    plateau: float
    n_tau: int
    weights: np.ndarray

    @property
    def integral(self) -> float:
        return float(self.plateau * self.tau)

    @property
    def squared_integral(self) -> float:
        return float(self.plateau**2 * self.tau)


def target_profile(tau: float, times: np.ndarray) -> TargetProfile:
    times = np.asarray(times, dtype=float)
    hits = np.nonzero(np.isclose(times, tau, rtol=0.0, atol=1e-9 * max(1.0, abs(tau))))[0]
    if hits.size == 0 or tau <= times[0]:
        raise ConfigError(f"tau: {tau!r} is not a point of the output grid", key="tau")
    n_tau = int(hits[0])
    tau = float(times[n_tau] - times[0])
    plateau = TOTAL_DRUG / tau
    samples = np.where(np.arange(times.size) <= n_tau, plateau, 0.0)
    # A is constant on every output interval up to tau, so products with A integrate on [0, tau] only
    weights = np.zeros(times.size)
    weights[: n_tau + 1] = trapezoid_weights(times[: n_tau + 1])
    for array in (samples, weights):
        array.setflags(write=False)
    return TargetProfile(tau=tau, times=times, samples=samples, plateau=plateau, n_tau=n_tau, weights=weights)


def compute_efflux_basis(gel: GelHistory, params: ParamSet, threads: int = 1) -> EffluxBasis:
    """Partial effluxes of every unit packet, solved in column chunks on a worker pool."""
    grid = gel.grid
    loadings = np.column_stack([packet.loading(grid) for packet in packet_bases(grid)])
    threads = max(1, int(threads))
    chunks = np.array_split(np.arange(grid.M), min(threads, grid.M))
    logger.info("Efflux basis started: %d packets on %d worker(s)", grid.M, len(chunks))

    def run(columns: np.ndarray) -> np.ndarray:
        flux, _ = integrate_loadings(gel, loadings[:, columns], params)
        return flux

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, chunks))
    f = np.ascontiguousarray(np.concatenate(parts, axis=1).T)
    integrals = f @ trapezoid_weights(gel.times)
    drift = float(np.max(np.abs(integrals - 1.0)))
    if drift > BASIS_INTEGRAL_TOLERANCE:
        logger.warning("Partial efflux integrals drift from one by up to %.3e over the horizon", drift)
    f.setflags(write=False)
    return EffluxBasis(times=gel.times, f=f, integrals=integrals, digest=params.basis_digest, grid=grid)


def drug_bounds(grid: Grid, eps: float) -> np.ndarray:
    """Per-packet caps keeping the initial drug fraction at or below the maximum."""
    if eps <= 0:
        return np.full(grid.M, np.inf)
    return (MAX_DRUG_FRACTION / eps) / grid.packet_heights


@dataclass(frozen=True, eq=False)
class QpProblem:
    S: np.ndarray
    q: np.ndarray
    c0: float
    budget: float
    upper: np.ndarray
    tail_bound: float = 0.0
    digest: str = ""

    @property
    def size(self) -> int:
        return self.q.size

    def objective(self, d: np.ndarray) -> float:
        return float(0.5 * d @ self.S @ d - self.q @ d + self.c0)

    def gradient(self, d: np.ndarray) -> np.ndarray:
        return self.S @ d - self.q


def assemble_qp(basis: EffluxBasis, target: TargetProfile, eps: float, grid: Grid) -> QpProblem:
    if basis.times.shape != target.times.shape or not np.allclose(basis.times, target.times, rtol=0, atol=1e-12):
        raise GridMismatchError("efflux basis and target profile use different time grids")
    grid.require_same(basis.grid)
    f = basis.f
    S = 2.0 * (f * basis.weights) @ f.T
    S = 0.5 * (S + S.T)
    q = 2.0 * target.plateau * (f @ target.weights)
    upper = drug_bounds(grid, eps)
    if eps > 0 and upper.sum() < TOTAL_DRUG * (1.0 - 1e-12):
        raise InfeasibleBudgetError(
            f"eps={eps!r} caps the total loading at {upper.sum():.6g} < {TOTAL_DRUG:.6g}"
        )

    tail_bound = 0.0
    rate = basis.decay_rate()
    trace = float(np.trace(S))
    if math.isfinite(rate) and rate > 0 and trace > 0:
        tail_bound = float(np.sum(f[:, -1] ** 2) / rate / trace)
        if tail_bound > 1e-6:
            logger.warning("Truncated efflux tail carries %.3e of trace(S)", tail_bound)
    return QpProblem(
        S=S,
        q=q,
        c0=target.squared_integral,
        budget=TOTAL_DRUG,
        upper=upper,
        tail_bound=tail_bound,
        digest=basis.digest,
    )


def project_capped_simplex(v: np.ndarray, u: Optional[np.ndarray], c: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{0 <= d <= u, sum(d) = c}``."""
    v = np.asarray(v, dtype=float)
    u = np.full(v.size, np.inf) if u is None else np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ConfigError("upper bounds must be strictly positive", key="upper")
    capacity = float(u.sum())
    if capacity < c * (1.0 - 1e-12):
        raise InfeasibleBudgetError(f"bounds hold {capacity:.6g}, budget is {c:.6g}")
    if capacity <= c * (1.0 + 1e-15):
        return u.copy()

    def excess(shift: float) -> float:
        return float(np.clip(v - shift, 0.0, u).sum() - c)

    # the budget is piecewise linear and non-increasing in the shift; bisect over its kinks
    kinks = np.unique(np.concatenate((v, (v - u)[np.isfinite(u)])))
    if excess(kinks[0]) < 0:
        pivot = kinks[0] - 1.0
    else:
        lo, hi = 0, kinks.size - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if excess(kinks[mid]) >= 0:
                lo = mid
            else:
                hi = mid
        pivot = 0.5 * (kinks[lo] + kinks[hi])
    shifted = v - pivot
    free = (shifted > 0) & (shifted < u)
    at_upper = shifted >= u
    shift = (v[free].sum() + u[at_upper].sum() - c) / max(1, np.count_nonzero(free))
    d = np.clip(v - shift, 0.0, u)
    floor = np.finfo(float).eps * c
    d[d < floor] = 0.0

    gap = c - d.sum()
    if abs(gap) > 1e-13 * max(1.0, c):
        inside = (d > 0) & (d < u)
        if inside.any():
            d[inside] += gap / np.count_nonzero(inside)
            d = np.clip(d, 0.0, u)
            d[d < floor] = 0.0
    return d


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    d: np.ndarray
    H_star: float
    kkt_residual: float
    certified: bool
    iterations: int
    F_opt: Optional[np.ndarray] = None
    H_integral: Optional[float] = None


def lipschitz_estimate(S: np.ndarray, rtol: float = 1e-4, max_iter: int = 1000) -> float:
    """Largest eigenvalue of a PSD matrix by power iteration."""
    rng = np.random.default_rng(0)
    vector = rng.random(S.shape[0]) + 0.5
    vector /= np.linalg.norm(vector)
    estimate = 0.0
    for _ in range(max_iter):
        image = S @ vector
        norm = float(np.linalg.norm(image))
        if norm == 0.0:
            return 0.0
        vector = image / norm
        if abs(norm - estimate) <= rtol * norm:
            return norm
        estimate = norm
    return estimate


def projected_gradient_norm(qp: QpProblem, d: np.ndarray, L: float) -> float:
    step = project_capped_simplex(d - qp.gradient(d) / L, qp.upper, qp.budget)
    return float(L * np.linalg.norm(d - step))


def _face_minimiser(qp: QpProblem, free: np.ndarray, fixed: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimiser over the face where ``free`` cells move and the others keep ``fixed``.

    Returns the point and the multiplier of the total-drug constraint.
    """
    count = int(np.count_nonzero(free))
    d = np.where(free, 0.0, fixed)
    system = np.zeros((count + 1, count + 1))
    system[:count, :count] = qp.S[np.ix_(free, free)]
    system[:count, count] = -1.0
    system[count, :count] = 1.0
    rhs = np.empty(count + 1)
    rhs[:count] = qp.q[free] - qp.S[np.ix_(free, ~free)] @ d[~free]
    rhs[count] = qp.budget - d[~free].sum()
    solution = linalg.lstsq(system, rhs)[0]
    d[free] = solution[:count]
    return d, float(solution[count])


def _active_set_finish(qp: QpProblem, x: np.ndarray, multiplier_tol: float, max_steps: Optional[int] = None) -> np.ndarray:
    """Primal active-set iterations from a feasible point, starting on the face it lies on.

    Each step either moves to the face minimiser, stops at the first bound in the way and
    adds it, or releases the bound with the most negative multiplier.
    """
    upper = qp.upper
    bounded = np.isfinite(upper)
    slack = 1e-12 * max(1.0, qp.budget)
    at_lower = x <= slack
    at_upper = bounded & (x >= upper - slack) & ~at_lower
    x = np.where(at_lower, 0.0, np.where(at_upper, upper, x))
    steps = max_steps if max_steps is not None else 10 * qp.size + 50

    for _ in range(steps):
        free = ~(at_lower | at_upper)
        fixed = np.where(at_upper, upper, 0.0)
        if free.any():
            target, lam = _face_minimiser(qp, free, fixed)
            direction = target - x
            alpha, blocking, to_upper = 1.0, -1, False
            falling = free & (direction < 0)
            if falling.any():
                ratios = x[falling] / -direction[falling]
                k = int(np.argmin(ratios))
                if ratios[k] < alpha:
                    alpha, blocking, to_upper = float(ratios[k]), int(np.flatnonzero(falling)[k]), False
            rising = free & bounded & (direction > 0)
            if rising.any():
                ratios = (upper[rising] - x[rising]) / direction[rising]
                k = int(np.argmin(ratios))
                if ratios[k] < alpha:
                    alpha, blocking, to_upper = float(ratios[k]), int(np.flatnonzero(rising)[k]), True
            if blocking >= 0:
                x = np.clip(x + max(alpha, 0.0) * direction, 0.0, upper)
                x[blocking] = upper[blocking] if to_upper else 0.0
                (at_upper if to_upper else at_lower)[blocking] = True
                continue
            x = np.clip(target, 0.0, upper)
        else:
            gradient = qp.gradient(x)
            candidates = [gradient[at_lower].min()] if at_lower.any() else []
            candidates += [gradient[at_upper].max()] if at_upper.any() else []
            lam = 0.5 * sum(candidates) if len(candidates) == 2 else candidates[0]

        gradient = qp.gradient(x)
        multipliers = np.full(qp.size, np.inf)
        multipliers[at_lower] = gradient[at_lower] - lam
        multipliers[at_upper] = lam - gradient[at_upper]
        worst = int(np.argmin(multipliers))
        if multipliers[worst] >= -multiplier_tol:
            return x
        at_lower[worst] = at_upper[worst] = False
    logger.debug("Active-set finish stopped after %d steps", steps)
    return x


def solve_qp(
    qp: QpProblem,
    x0: Optional[np.ndarray] = None,
    *,
    tol: float = PG_TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
    finish_every: int = 200,
    check_every: int = 10,
) -> OptimizationResult:
    """Accelerated projected gradient with restarts and an active-set finish.

    The run is certified when the projected-gradient norm drops to ``tol * max(1, |q|)``.
    """
    threshold = tol * max(1.0, float(np.linalg.norm(qp.q)))
    multiplier_tol = 0.1 * threshold / math.sqrt(qp.size)
    L = 1.01 * lipschitz_estimate(qp.S)
    if L <= 0:
        L = 1.0
    start = np.full(qp.size, qp.budget / qp.size) if x0 is None else np.asarray(x0, dtype=float)
    x = project_capped_simplex(start, qp.upper, qp.budget)
    y = x.copy()
    momentum = 1.0
    best_x, best_pg = x, projected_gradient_norm(qp, x, L)
    iteration = 0
    finish_interval = next_finish = finish_every

    def finish(point: np.ndarray) -> tuple[np.ndarray, float]:
        finished = _active_set_finish(qp, point, multiplier_tol)
        if qp.objective(finished) > qp.objective(point) + 1e-12 * max(1.0, abs(qp.objective(point))):
            return point, projected_gradient_norm(qp, point, L)
        return finished, projected_gradient_norm(qp, finished, L)

    while best_pg > threshold and iteration < max_iter:
        iteration += 1
        x_next = project_capped_simplex(y - qp.gradient(y) / L, qp.upper, qp.budget)
        if np.dot(y - x_next, x_next - x) > 0:
            momentum = 1.0
            y = x.copy()
            x_next = project_capped_simplex(y - qp.gradient(y) / L, qp.upper, qp.budget)
        momentum_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum**2))
        y = x_next + ((momentum - 1.0) / momentum_next) * (x_next - x)
        x, momentum = x_next, momentum_next

        if iteration >= next_finish:
            finished, pg = finish(x)
            finish_interval *= 2
            next_finish = iteration + finish_interval
            if pg < best_pg:
                best_x, best_pg = finished, pg
            if finished is not x:
                x, y, momentum = finished, finished.copy(), 1.0
        elif iteration % check_every == 0:
            pg = projected_gradient_norm(qp, x, L)
            if pg < best_pg:
                best_x, best_pg = x, pg

    if best_pg > threshold:
        finished, pg = finish(best_x)
        if pg < best_pg:
            best_x, best_pg = finished, pg

    certified = best_pg <= threshold
    H_star = max(qp.objective(best_x), 0.0)
    if certified:
        logger.info("QP certified after %d iterations: H*=%.6e residual=%.3e", iteration, H_star, best_pg)
    else:
        logger.warning("QP not certified after %d iterations: residual=%.3e", iteration, best_pg)
    return OptimizationResult(
        d=best_x, H_star=H_star, kkt_residual=best_pg, certified=certified, iterations=iteration
    )


def multistart(qp: QpProblem, starts: int = 10, seed: int = 0, **options) -> list[OptimizationResult]:
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(starts):
        guess = rng.exponential(size=qp.size)
        guess *= qp.budget / guess.sum()
        results.append(solve_qp(qp, project_capped_simplex(guess, qp.upper, qp.budget), **options))
    return results


def solve_qp_exhaustive(qp: QpProblem, feasibility_tol: float = 1e-10) -> OptimizationResult:
    """Enumerate every lower/free/upper pattern; only for a handful of packets."""
    if qp.size > EXHAUSTIVE_LIMIT:
        raise ConfigError(f"exhaustive search supports at most {EXHAUSTIVE_LIMIT} packets", key="M")
    best: Optional[np.ndarray] = None
    best_value = math.inf
    states = (0, 1, 2)
    for pattern in itertools.product(states, repeat=qp.size):
        codes = np.array(pattern)
        if np.any((codes == 2) & ~np.isfinite(qp.upper)):
            continue
        free = codes == 1
        d = np.where(codes == 2, qp.upper, 0.0)
        if free.any():
            d, _ = _face_minimiser(qp, free, d)
        if abs(d.sum() - qp.budget) > feasibility_tol * max(1.0, qp.budget):
            continue
        if np.any(d < -feasibility_tol) or np.any(d > qp.upper + feasibility_tol):
            continue
        value = qp.objective(d)
        if value < best_value:
            best, best_value = np.clip(d, 0.0, qp.upper), value
    if best is None:
        raise InfeasibleBudgetError("no feasible pattern found")
    return OptimizationResult(d=best, H_star=max(best_value, 0.0), kkt_residual=0.0, certified=True, iterations=0)


def reconstruct(basis: EffluxBasis, d: np.ndarray, target: TargetProfile) -> tuple[np.ndarray, float]:
    """Superposed efflux and its squared misfit to the target on the same quadrature as the QP."""
    d = np.asarray(d, dtype=float)
    if d.shape != (basis.f.shape[0],):
        raise GridMismatchError(f"weights have shape {d.shape}, basis has {basis.f.shape[0]} curves")
    F = d @ basis.f
    n = target.n_tau
    head = trapezoid_weights(basis.times[: n + 1]) @ (F[: n + 1] - target.plateau) ** 2
    tail = trapezoid_weights(basis.times[n:]) @ F[n:] ** 2
    return F, float(head + tail)


def with_reconstruction(result: OptimizationResult, basis: EffluxBasis, target: TargetProfile) -> OptimizationResult:
    F, H = reconstruct(basis, result.d, target)
    return replace(result, F_opt=F, H_integral=H)


def cell_concentration(d: np.ndarray, grid: Grid) -> np.ndarray:
    return np.asarray(d) * grid.packet_heights


def drug_fraction(d: np.ndarray, grid: Grid, eps: float) -> np.ndarray:
    return eps * cell_concentration(d, grid)


def core_extent(d: np.ndarray, upper: np.ndarray, rtol: float = 1e-6) -> int:
    """Number of contiguous cells from the centre loaded at their cap."""
    saturated = np.asarray(d) >= np.asarray(upper) * (1.0 - rtol)
    if not saturated[0]:
        return 0
    unsaturated = np.nonzero(~saturated)[0]
    return int(unsaturated[0]) if unsaturated.size else int(saturated.size)


def support_clusters(d: np.ndarray, threshold: float = 1e-8) -> list[tuple[int, int, float]]:
    """Maximal runs of loaded cells as ``(first, last, weight)``."""
    loaded = np.asarray(d) > threshold * max(1.0, float(np.max(d)))
    clusters: list[tuple[int, int, float]] = []
    start: Optional[int] = None
    for i, flag in enumerate(loaded):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            clusters.append((start, i - 1, float(np.sum(d[start:i]))))
            start = None
    if start is not None:
        clusters.append((start, loaded.size - 1, float(np.sum(d[start:]))))
    return clusters
