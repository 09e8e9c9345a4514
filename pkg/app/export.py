"""Deterministic CSV emitters for every pipeline stage."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .drug import DrugField, fractional_release
from .equilibrium import EquilibriumRow
from .gel import GelHistory
from .optimizer import EffluxBasis, drug_fraction
from .pipeline import OptimizationRun, SweepRow


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else str(value)
    if value is None:
        return ""
    return str(value)


def write_csv(
    path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]], digest: str, comments: Sequence[str] = ()
) -> Path:
    """Write ``# digest=`` and extra comment lines, a header row, then the rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# digest={digest}\n")
        for comment in comments:
            handle.write(f"# {comment}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    return path


def read_csv_column(path: Path, column: str) -> np.ndarray:
    """Read one numeric column, skipping ``#`` comment lines."""
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or column not in reader.fieldnames:
        raise KeyError(column)
    return np.array([float(row[column]) for row in reader], dtype=float)


def equilibrium_csv(path: Path, rows: Sequence[EquilibriumRow], digest: str) -> Path:
    def lines():
        for row in rows:
            state = row.state
            if state is None:
                yield (row.chi, row.Ghat, math.nan, math.nan, math.nan, math.nan, "failed")
            else:
                rate = math.nan if state.decay_rate is None else state.decay_rate
                yield (row.chi, row.Ghat, state.J_inf, state.Dd_eq, state.mobility_eq, rate, "ok")

    return write_csv(path, ("chi", "Ghat", "J_inf", "Dd_eq", "mobility_eq", "decay_rate", "status"), lines(), digest)


def swelling_csv(path: Path, gel: GelHistory) -> Path:
    rows = zip(gel.times, gel.surface_radius, gel.surface_radius**3, gel.water_content, gel.water_uptake)
    return write_csv(path, ("t", "r_surface", "swollen_volume", "water_content", "water_uptake"), rows, gel.digest)


def swelling_profiles_csv(path: Path, gel: GelHistory, snapshots: int = 10) -> Path:
    count = gel.times.size - 1
    indices = sorted({round(k * count / snapshots) for k in range(snapshots + 1)})

    def lines():
        for k in indices:
            for i, R in enumerate(gel.grid.midpoints):
                yield (gel.times[k], R, 0.5 * (gel.r[k, i] + gel.r[k, i + 1]), gel.J[k, i], gel.Nw[k, i], gel.p[k, i], gel.mu_w[k, i])

    return write_csv(path, ("t", "R", "r", "J", "Nw", "p", "mu_w"), lines(), gel.digest)


def release_csv(path: Path, drug: DrugField, digest: str) -> Path:
    released = fractional_release(drug) if drug.initial_mass > 0 else np.zeros_like(drug.mass)
    rows = zip(drug.times, drug.efflux_boundary, drug.efflux_mass, drug.mass, released)
    return write_csv(path, ("t", "F_boundary", "F_mass", "mass", "R"), rows, digest)


def basis_csv(path: Path, basis: EffluxBasis) -> Path:
    columns = ("t",) + tuple(f"f_{i}" for i in range(basis.f.shape[0]))
    rows = (np.concatenate(([t], basis.f[:, k])) for k, t in enumerate(basis.times))
    return write_csv(path, columns, rows, basis.digest)


def basis_summary_csv(path: Path, basis: EffluxBasis) -> Path:
    rates = basis.tail_rates()
    peaks = basis.times[np.argmax(basis.f, axis=1)]
    rows = zip(range(basis.f.shape[0]), basis.grid.midpoints, basis.integrals, peaks, rates)
    return write_csv(path, ("i", "R", "integral", "peak_time", "tail_rate"), rows, basis.digest)


def loading_csv(path: Path, run: OptimizationRun) -> Path:
    d = run.result.d
    rows = zip(
        run.grid.midpoints,
        d,
        run.concentration,
        drug_fraction(d, run.grid, run.params.eps),
        run.qp.upper,
    )
    return write_csv(path, ("R", "weight", "concentration", "phi", "upper"), rows, run.params.digest)


def optimal_efflux_csv(path: Path, run: OptimizationRun) -> Path:
    rows = zip(run.basis.times, run.result.F_opt, run.target.samples, run.released)
    return write_csv(path, ("t", "F_opt", "A", "R"), rows, run.params.digest)


def summary_csv(path: Path, values: dict[str, Any], digest: str) -> Path:
    return write_csv(path, ("key", "value"), values.items(), digest)


def sweep_csv(path: Path, rows: Sequence[SweepRow], digest: str) -> Path:
    lines = ((row.chi, row.Ghat, row.Dhat, row.tau, row.H_star, row.kkt_residual, row.status) for row in rows)
    return write_csv(path, ("chi", "Ghat", "Dhat", "tau", "H_star", "kkt_residual", "status"), lines, digest)
