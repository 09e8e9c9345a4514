"""Regenerate the burst, optimal-loading, stiffness-sweep and drug-fraction case studies as CSV."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app import export  # noqa: E402
from app.config import CACHE_DIR, THREADS  # noqa: E402
from app.drug import release_time  # noqa: E402
from app.errors import GelReleaseError, ReleaseLevelError  # noqa: E402
from app.optimizer import core_extent  # noqa: E402
from app.pipeline import Pipeline, stiffness_sweep  # noqa: E402
from app.schemas import ParamSet  # noqa: E402

logger = logging.getLogger("case_studies")

BURST_GHATS = (7e-5, 7e-4, 7e-3)
OPTIMAL_GHATS = (7e-4, 7e-3)
SWEEP_TAUS = (6.0, 12.0, 18.0, 24.0)
DRUG_FRACTIONS = (0.025, 0.05, 0.1)


def _params(**overrides: float) -> ParamSet:
    values = {"chi": 0.5, "Ghat": 7e-4, "Dhat": 0.1, "tau": 12.0}
    values.update(overrides)
    return ParamSet(**values)


def _t95(drug) -> str:
    try:
        return f"{release_time(drug, 0.95):.3f}"
    except ReleaseLevelError:
        return "not reached"


def burst(pipeline: Pipeline, out: Path) -> None:
    for Ghat in BURST_GHATS:
        params = _params(Ghat=Ghat)
        drug = pipeline.release(params, np.ones(params.M))
        export.release_csv(out / f"burst_Ghat{Ghat:g}.csv", drug, params.digest)
        logger.info("Burst Ghat=%g: half released at t=%.3f", Ghat, release_time(drug, 0.5))


def optimal_loading(pipeline: Pipeline, out: Path) -> None:
    for Ghat in OPTIMAL_GHATS:
        run = pipeline.optimize(_params(Ghat=Ghat))
        export.loading_csv(out / f"optimal_loading_Ghat{Ghat:g}.csv", run)
        export.optimal_efflux_csv(out / f"optimal_efflux_Ghat{Ghat:g}.csv", run)
        logger.info("Optimal Ghat=%g: H*=%.6e, 95%% released at %s", Ghat, run.result.H_star, _t95(run.release))


def sweep(pipeline: Pipeline, out: Path) -> None:
    base = _params()
    Ghats = [float(value) for value in np.geomspace(7e-5, 7e-3, 7)]
    rows = stiffness_sweep(base, [base.chi], Ghats, SWEEP_TAUS, [0.1, 0.01], pipeline=pipeline)
    export.sweep_csv(out / "stiffness_sweep.csv", rows, base.digest)
    failed = sum(1 for row in rows if row.status != "ok")
    logger.info("Sweep finished: %d rows, %d failed or uncertified", len(rows), failed)


def drug_fraction(pipeline: Pipeline, out: Path) -> None:
    for eps in DRUG_FRACTIONS:
        run = pipeline.optimize(_params(eps=eps))
        export.loading_csv(out / f"bounded_loading_eps{eps:g}.csv", run)
        export.optimal_efflux_csv(out / f"bounded_efflux_eps{eps:g}.csv", run)
        logger.info("Bounded eps=%g: core of %d cells at the cap", eps, core_extent(run.result.d, run.qp.upper))


STUDIES = {"burst": burst, "optimal": optimal_loading, "sweep": sweep, "fraction": drug_fraction}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("studies", nargs="*", help="any of: " + ", ".join(STUDIES))
    parser.add_argument("--out", default="case-studies")
    parser.add_argument("--cache", default=str(CACHE_DIR))
    parser.add_argument("--threads", type=int, default=THREADS)
    args = parser.parse_args(argv)
    unknown = [name for name in args.studies if name not in STUDIES]
    if unknown:
        parser.error(f"unknown case study: {', '.join(unknown)}")
    studies = args.studies or list(STUDIES)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline = Pipeline(Path(args.cache), threads=args.threads)
    for name in studies:
        try:
            STUDIES[name](pipeline, out)
        except GelReleaseError as exc:
            logger.error("Case study %s failed: %s", name, exc)
            return exc.exit_code
    logger.info("Cache hits %d, misses %d", pipeline.hits, pipeline.misses)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
