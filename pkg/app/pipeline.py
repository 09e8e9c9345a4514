"""Cached solve pipeline: gel history, efflux basis, loading optimisation and sweeps."""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import cache, crud
from .config import CACHE_DIR, THREADS
from .database import ledger_url, session_scope
from .drug import DrugField, fractional_release, solve_drug
from .errors import CacheError, GelReleaseError
from .gel import GelHistory, solve_gel
from .grid import Grid, build_grid
from .optimizer import (
    EffluxBasis,
    OptimizationResult,
    QpProblem,
    TargetProfile,
    assemble_qp,
    compute_efflux_basis,
    solve_qp,
    target_profile,
    with_reconstruction,
)
from .schemas import ParamSet, RunManifest

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class OptimizationRun:
    params: ParamSet
    grid: Grid
    target: TargetProfile
    qp: QpProblem
    result: OptimizationResult
    basis: EffluxBasis
    release: DrugField

    @property
    def concentration(self) -> np.ndarray:
        return self.result.d * self.grid.packet_heights

    @property
    def released(self) -> np.ndarray:
        return fractional_release(self.release)


@dataclass(frozen=True)
class SweepRow:
    chi: float
    Ghat: float
    Dhat: float
    tau: float
    H_star: float
    kkt_residual: float
    status: str
    error: Optional[str] = None


@dataclass
class _Bookkeeping:
    hits: int = 0
    misses: int = 0
    seconds: dict[str, float] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)


class Pipeline:
    """Runs the solve stages against a content-addressed cache directory."""

    def __init__(self, cache_dir: Optional[Path] = None, threads: int = THREADS, ledger: Optional[str] = None) -> None:
        self.cache_dir = Path(cache_dir if cache_dir is not None else CACHE_DIR)
        self.threads = max(1, int(threads))
        self.ledger = ledger or ledger_url(self.cache_dir)
        self._book = _Bookkeeping()
        self._lock = threading.Lock()
        self._digest_locks: defaultdict[str, threading.Lock] = defaultdict(threading.Lock)

    @property
    def hits(self) -> int:
        return self._book.hits

    @property
    def misses(self) -> int:
        return self._book.misses

    @property
    def stage_seconds(self) -> dict[str, float]:
        return dict(self._book.seconds)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - started
            with self._lock:
                self._book.seconds[name] = self._book.seconds.get(name, 0.0) + elapsed

    def _count(self, hit: bool) -> None:
        with self._lock:
            if hit:
                self._book.hits += 1
            else:
                self._book.misses += 1

    def _note_digest(self, kind: str, digest: str) -> None:
        with self._lock:
            self._book.digests[kind] = digest

    def _lock_for(self, digest: str) -> threading.Lock:
        with self._lock:
            return self._digest_locks[digest]

    def _touch(self, digest: str) -> None:
        with session_scope(self.ledger) as session:
            crud.touch_cache_entry(session, digest)

    def _record(self, kind: str, digest: str, path: Path, size: int) -> None:
        with session_scope(self.ledger) as session:
            crud.record_cache_entry(session, kind=kind, digest=digest, path=str(path), size_bytes=size)

    def gel(self, params: ParamSet) -> GelHistory:
        digest = params.gel_digest
        self._note_digest("gel", digest)
        with self._lock_for(digest), self.stage("gel"):
            try:
                history = cache.load_gel_history(self.cache_dir, params)
            except CacheError as exc:
                logger.warning("Ignoring unusable gel cache: %s", exc)
                history = None
            if history is not None:
                logger.info("Gel cache hit %s", digest)
                self._count(hit=True)
                self._touch(digest)
                return history
            logger.info("Gel cache miss %s", digest)
            self._count(hit=False)
            history = solve_gel(params, build_grid(params.M))
            path, size = cache.save_gel_history(self.cache_dir, history)
            self._record("gel", digest, path, size)
            # hand back the stored copy so fresh and cached runs see the same arrays
            return cache.load_gel_history(self.cache_dir, params) or history

    def basis(self, params: ParamSet, gel: Optional[GelHistory] = None) -> EffluxBasis:
        digest = params.basis_digest
        self._note_digest("basis", digest)
        with self._lock_for(digest):
            with self.stage("basis"):
                try:
                    basis = cache.load_efflux_basis(self.cache_dir, params)
                except CacheError as exc:
                    logger.warning("Ignoring unusable basis cache: %s", exc)
                    basis = None
                if basis is not None:
                    logger.info("Basis cache hit %s", digest)
                    self._count(hit=True)
                    self._touch(digest)
                    return basis
            gel = gel if gel is not None else self.gel(params)
            with self.stage("basis"):
                logger.info("Basis cache miss %s", digest)
                self._count(hit=False)
                basis = compute_efflux_basis(gel, params, threads=self.threads)
                path, size = cache.save_efflux_basis(self.cache_dir, basis, params.dt_out)
                self._record("basis", digest, path, size)
                return cache.load_efflux_basis(self.cache_dir, params) or basis

    def release(self, params: ParamSet, loading: np.ndarray) -> DrugField:
        gel = self.gel(params)
        with self.stage("drug"):
            return solve_drug(gel, loading, params)

    def optimize(self, params: ParamSet) -> OptimizationRun:
        grid = build_grid(params.M)
        basis = self.basis(params)
        with self.stage("qp"):
            target = target_profile(params.tau, basis.times)
            qp = assemble_qp(basis, target, params.eps, grid)
            result = with_reconstruction(solve_qp(qp), basis, target)
        release = self.release(params, result.d * grid.packet_heights)
        self._note_digest("params", params.digest)
        return OptimizationRun(
            params=params, grid=grid, target=target, qp=qp, result=result, basis=basis, release=release
        )

    def manifest(self, subcommand: str, params: Optional[ParamSet] = None, **fields) -> RunManifest:
        with self._lock:
            digests = dict(self._book.digests)
        if params is not None:
            digests.setdefault("params", params.digest)
        return RunManifest(
            subcommand=subcommand,
            params=None if params is None else params.model_dump(mode="json"),
            digests=digests,
            cache_hits=self.hits,
            cache_misses=self.misses,
            stage_seconds=self.stage_seconds,
            **fields,
        )

    def record_run(self, manifest: RunManifest) -> None:
        with session_scope(self.ledger) as session:
            crud.record_run(session, manifest)

    def cache_entries(self) -> list[dict[str, object]]:
        with session_scope(self.ledger) as session:
            return [
                {"digest": entry.digest, "kind": entry.kind, "size_bytes": entry.size_bytes, "hits": entry.hits, "path": entry.path}
                for entry in crud.list_cache_entries(session)
            ]


def stiffness_sweep(
    base: ParamSet,
    chis: Sequence[float],
    Ghats: Sequence[float],
    taus: Iterable[float],
    Dhats: Sequence[float],
    pipeline: Optional[Pipeline] = None,
) -> list[SweepRow]:
    """Optimal misfit for every stiffness point and release period.

    One gel and basis per (chi, Ghat, Dhat) point; the QP is re-solved for each
    tau against the cached basis. Points run on a bounded worker pool.
    """
    pipeline = pipeline or Pipeline()
    tau_values = list(taus)
    points = [(chi, Ghat, Dhat) for chi in chis for Ghat in Ghats for Dhat in Dhats]

    def run_point(point: tuple[float, float, float]) -> list[SweepRow]:
        chi, Ghat, Dhat = point
        rows: list[SweepRow] = []
        try:
            params = base.model_copy(update={"chi": chi, "Ghat": Ghat, "Dhat": Dhat})
            params = ParamSet(**params.model_dump())
            basis = pipeline.basis(params)
            grid = build_grid(params.M)
        except GelReleaseError as exc:
            logger.warning("Sweep point chi=%s Ghat=%s Dhat=%s failed: %s", chi, Ghat, Dhat, exc)
            return [SweepRow(chi, Ghat, Dhat, tau, math.nan, math.nan, "failed", str(exc)) for tau in tau_values]
        for tau in tau_values:
            try:
                target = target_profile(tau, basis.times)
                result = solve_qp(assemble_qp(basis, target, params.eps, grid))
            except GelReleaseError as exc:
                rows.append(SweepRow(chi, Ghat, Dhat, tau, math.nan, math.nan, "failed", str(exc)))
                continue
            status = "ok" if result.certified else "uncertified"
            rows.append(SweepRow(chi, Ghat, Dhat, tau, result.H_star, result.kkt_residual, status))
        return rows

    workers = min(pipeline.threads, max(1, len(points)))
    if workers == 1:
        chunks = [run_point(point) for point in points]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_point, points))
    return [row for chunk in chunks for row in chunk]
