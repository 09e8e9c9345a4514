"""Command-line entry point for the gelrelease pipeline."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, export
from .config import CACHE_DIR, LOG_LEVEL, THREADS, load_config
from .database import dispose_engines
from .drug import release_time
from .equilibrium import equilibrium_table
from .errors import ConfigError, DrugLoadingError, GelReleaseError, ReleaseLevelError
from .optimizer import core_extent, support_clusters
from .pipeline import Pipeline, stiffness_sweep
from .schemas import ParamSet, RunManifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

DEFAULT_GHATS = (7e-5, 7e-4, 7e-3)


def parse_float_list(text: str) -> list[float]:
    try:
        values = [float(item) for item in text.replace(";", ",").split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc
    if not values:
        raise ConfigError(f"empty number list {text!r}")
    return values


def parse_range(text: str) -> list[float]:
    """``start:stop:step`` inclusive of ``stop`` when it lies on the step grid."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"range must be start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(part) for part in parts)
    except ValueError as exc:
        raise ConfigError(f"cannot parse range {text!r}") from exc
    if step <= 0 or stop < start:
        raise ConfigError(f"range {text!r} needs step > 0 and stop >= start")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [start + k * step for k in range(count)]


def parse_log_range(text: str) -> list[float]:
    """``start:stop:count`` logarithmically spaced, both ends included."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"log range must be start:stop:count, got {text!r}")
    try:
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ConfigError(f"cannot parse log range {text!r}") from exc
    if start <= 0 or stop <= 0 or count < 1:
        raise ConfigError(f"log range {text!r} needs positive ends and count >= 1")
    return [float(value) for value in np.geomspace(start, stop, count)]


def _require_config(args: argparse.Namespace) -> ParamSet:
    if not args.config:
        raise ConfigError(f"{args.command}: --config is required")
    return load_config(args.config)


def _finish(args: argparse.Namespace, pipeline: Pipeline, manifest: RunManifest) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest.outputs.append(str(manifest_path))
    manifest_path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    pipeline.record_run(manifest)


def cmd_equilibrate(args: argparse.Namespace, pipeline: Pipeline) -> int:
    params = load_config(args.config) if args.config else None
    chis = parse_range(args.chi_range)
    Ghats = parse_float_list(args.Ghat) if args.Ghat else list(DEFAULT_GHATS)
    beta = args.beta if args.beta is not None else (params.beta if params else 1.0)
    Dhat = args.Dhat if args.Dhat is not None else (params.Dhat if params else None)
    with pipeline.stage("equilibrium"):
        rows = equilibrium_table(chis, Ghats, beta=beta, Dhat=Dhat)
    digest = params.digest if params else f"beta={beta!r},Dhat={Dhat!r}"
    path = export.equilibrium_csv(Path(args.out) / "equilibrium.csv", rows, digest)
    failed = sum(1 for row in rows if row.state is None)
    manifest = pipeline.manifest(
        "equilibrate",
        params,
        outputs=[str(path)],
        inputs=[args.config] if args.config else [],
        notes=[f"{failed} row(s) without a finite equilibrium"] if failed else [],
        version=__version__,
    )
    _finish(args, pipeline, manifest)
    return EXIT_OK


def cmd_swell(args: argparse.Namespace, pipeline: Pipeline) -> int:
    params = _require_config(args)
    gel = pipeline.gel(params)
    out = Path(args.out)
    outputs = [
        export.swelling_csv(out / "swelling.csv", gel),
        export.swelling_profiles_csv(out / "swelling_profiles.csv", gel),
    ]
    manifest = pipeline.manifest(
        "swell", params, inputs=[args.config], outputs=[str(path) for path in outputs], version=__version__
    )
    _finish(args, pipeline, manifest)
    return EXIT_OK


def read_loading(spec: str, params: ParamSet) -> np.ndarray:
    if spec == "uniform":
        return np.ones(params.M)
    path = Path(spec)
    try:
        try:
            values = export.read_csv_column(path, "concentration")
        except KeyError:
            values = np.loadtxt(path, comments="#", ndmin=1)
    except OSError as exc:
        raise ConfigError(f"cannot read loading file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"cannot parse loading file {path}: {exc}") from exc
    if values.shape != (params.M,):
        raise DrugLoadingError(f"loading file {path} has {values.size} values, expected M={params.M}")
    return values


def cmd_release(args: argparse.Namespace, pipeline: Pipeline) -> int:
    params = _require_config(args)
    loading = read_loading(args.loading, params)
    drug = pipeline.release(params, loading)
    path = export.release_csv(Path(args.out) / "release.csv", drug, params.digest)
    notes = []
    if drug.initial_mass > 0:
        for level in (0.5, 0.95):
            try:
                notes.append(f"release_time({level})={release_time(drug, level)!r}")
            except ReleaseLevelError as exc:
                notes.append(str(exc))
    manifest = pipeline.manifest(
        "release",
        params,
        inputs=[args.config] + ([] if args.loading == "uniform" else [args.loading]),
        outputs=[str(path)],
        notes=notes,
        version=__version__,
    )
    _finish(args, pipeline, manifest)
    return EXIT_OK


def cmd_basis(args: argparse.Namespace, pipeline: Pipeline) -> int:
    params = _require_config(args)
    basis = pipeline.basis(params)
    out = Path(args.out)
    outputs = [export.basis_csv(out / "basis.csv", basis), export.basis_summary_csv(out / "basis_summary.csv", basis)]
    manifest = pipeline.manifest(
        "basis", params, inputs=[args.config], outputs=[str(path) for path in outputs], version=__version__
    )
    _finish(args, pipeline, manifest)
    return EXIT_OK


def cmd_optimize(args: argparse.Namespace, pipeline: Pipeline) -> int:
    params = _require_config(args)
    run = pipeline.optimize(params)
    result = run.result
    try:
        t95: object = release_time(run.release, 0.95)
    except ReleaseLevelError:
        t95 = "not reached"
    summary = {
        "H_star": result.H_star,
        "H_integral": result.H_integral,
        "kkt_residual": result.kkt_residual,
        "certified": result.certified,
        "iterations": result.iterations,
        "release_time_95": t95,
        "tail_bound": run.qp.tail_bound,
        "core_extent": core_extent(result.d, run.qp.upper) if params.eps > 0 else 0,
        "clusters": len(support_clusters(result.d)),
    }
    out = Path(args.out)
    outputs = [
        export.loading_csv(out / "loading.csv", run),
        export.optimal_efflux_csv(out / "efflux.csv", run),
        export.summary_csv(out / "summary.csv", summary, params.digest),
    ]
    manifest = pipeline.manifest(
        "optimize",
        params,
        inputs=[args.config],
        outputs=[str(path) for path in outputs],
        status="ok" if result.certified else "uncertified",
        version=__version__,
    )
    _finish(args, pipeline, manifest)
    if not result.certified:
        logger.error("Optimisation not certified: residual %.3e", result.kkt_residual)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, pipeline: Pipeline) -> int:
    params = _require_config(args)
    if args.Ghat_log:
        Ghats = parse_log_range(args.Ghat_log)
    elif args.Ghat:
        Ghats = parse_float_list(args.Ghat)
    else:
        Ghats = [params.Ghat]
    taus = parse_float_list(args.tau) if args.tau else [params.tau]
    Dhats = parse_float_list(args.Dhat) if args.Dhat else [params.Dhat]
    chis = parse_float_list(args.chi) if args.chi else [params.chi]
    base = params
    rows = stiffness_sweep(base, chis, Ghats, taus, Dhats, pipeline=pipeline)
    path = export.sweep_csv(Path(args.out) / "sweep.csv", rows, base.digest)
    failed = [row for row in rows if row.status != "ok"]
    manifest = pipeline.manifest(
        "sweep",
        base,
        inputs=[args.config],
        outputs=[str(path)],
        status="ok" if not failed else "partial",
        notes=[f"{len(failed)} cell(s) failed or uncertified"] if failed else [],
        version=__version__,
    )
    _finish(args, pipeline, manifest)
    return EXIT_OK


def cmd_cache(args: argparse.Namespace, pipeline: Pipeline) -> int:
    entries = pipeline.cache_entries()
    for entry in entries:
        print(f"{entry['kind']:6} {entry['digest']} {entry['size_bytes']:>12} hits={entry['hits']}")
    if not entries:
        print("cache is empty")
    return EXIT_OK


COMMANDS = {
    "equilibrate": cmd_equilibrate,
    "swell": cmd_swell,
    "release": cmd_release,
    "basis": cmd_basis,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "cache": cmd_cache,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gelrelease", description="Swelling-driven drug release and loading optimisation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value parameter document")
    common.add_argument("--out", default="out", help="directory for CSV outputs and manifest.json")
    common.add_argument("--cache", default=str(CACHE_DIR), help="cache directory for gel and basis artifacts")
    common.add_argument("--threads", type=int, default=THREADS, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    subparsers = parser.add_subparsers(dest="command", required=True)
    equilibrate = subparsers.add_parser("equilibrate", parents=[common], help="equilibrium swelling table")
    equilibrate.add_argument("--chi-range", default="0:3:0.05", help="start:stop:step")
    equilibrate.add_argument("--Ghat", help="comma-separated stiffness values")
    equilibrate.add_argument("--beta", type=float)
    equilibrate.add_argument("--Dhat", type=float)

    subparsers.add_parser("swell", parents=[common], help="solve and export the swelling history")
    release = subparsers.add_parser("release", parents=[common], help="drug release for one loading")
    release.add_argument("--loading", default="uniform", help="'uniform' or a file with M concentrations")
    subparsers.add_parser("basis", parents=[common], help="compute the partial efflux basis")
    subparsers.add_parser("optimize", parents=[common], help="optimal initial loading")

    sweep = subparsers.add_parser("sweep", parents=[common], help="optimal misfit over stiffness and release period")
    sweep.add_argument("--Ghat", help="comma-separated stiffness values")
    sweep.add_argument("--Ghat-log", help="start:stop:count log-spaced stiffness values")
    sweep.add_argument("--tau", help="comma-separated release periods")
    sweep.add_argument("--Dhat", help="comma-separated diffusivity ratios")
    sweep.add_argument("--chi", help="comma-separated Flory parameters")

    subparsers.add_parser("cache", parents=[common], help="list cached artifacts")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        logger.error("--threads must be at least 1")
        return EXIT_USAGE
    started = time.perf_counter()
    try:
        pipeline = Pipeline(cache_dir=Path(args.cache), threads=args.threads)
        code = COMMANDS[args.command](args, pipeline)
    except GelReleaseError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exc.exit_code
    finally:
        dispose_engines()
    logger.info("%s finished in %.2fs", args.command, time.perf_counter() - started)
    return code


def run() -> None:
    raise SystemExit(main(sys.argv[1:]))


if __name__ == "__main__":
    run()
