import math
import shutil

import numpy as np
import pytest

from conftest import tiny_params

from app import cache
from app.database import session_scope
from app.crud import list_runs
from app.errors import CacheError
from app.pipeline import Pipeline, stiffness_sweep
from app.schemas import TOTAL_DRUG


def test_gel_is_cached_and_ledgered(cache_dir):
    params = tiny_params()
    pipeline = Pipeline(cache_dir, threads=1)

    first = pipeline.gel(params)
    second = pipeline.gel(params)

    assert (pipeline.misses, pipeline.hits) == (1, 1)
    np.testing.assert_array_equal(first.r, second.r)
    np.testing.assert_array_equal(first.water_uptake, second.water_uptake)
    assert second.steps == first.steps
    assert cache.gel_cache_path(cache_dir, params.gel_digest).exists()
    entries = pipeline.cache_entries()
    assert [(entry["kind"], entry["digest"], entry["hits"]) for entry in entries] == [("gel", params.gel_digest, 1)]
    assert "gel" in pipeline.stage_seconds


def test_basis_reuses_gel_across_drug_parameters(cache_dir):
    pipeline = Pipeline(cache_dir, threads=2)
    slow = pipeline.basis(tiny_params(Dhat=0.05))
    fast = Pipeline(cache_dir, threads=1).basis(tiny_params(Dhat=0.1))

    assert pipeline.misses == 2
    assert slow.digest != fast.digest
    assert fast.decay_rate() > slow.decay_rate()
    kinds = sorted(entry["kind"] for entry in pipeline.cache_entries())
    assert kinds == ["basis", "basis", "gel"]


def test_basis_round_trips_through_the_cache(cache_dir):
    params = tiny_params()
    computed = Pipeline(cache_dir).basis(params)
    reloaded = Pipeline(cache_dir)
    loaded = reloaded.basis(params)

    assert (reloaded.hits, reloaded.misses) == (1, 0)
    np.testing.assert_array_equal(loaded.f, computed.f)
    np.testing.assert_array_equal(loaded.times, computed.times)
    assert loaded.grid.M == params.M


def test_fresh_and_cached_runs_are_bit_identical(cache_dir):
    params = tiny_params()
    fresh = Pipeline(cache_dir, threads=2).optimize(params)
    rerun = Pipeline(cache_dir, threads=1)
    cached = rerun.optimize(params)

    assert rerun.misses == 0
    for array in (cached.basis.f, cached.basis.times):
        assert array.flags.aligned and array.flags.c_contiguous
    np.testing.assert_array_equal(fresh.basis.f, cached.basis.f)
    np.testing.assert_array_equal(fresh.result.d, cached.result.d)
    np.testing.assert_array_equal(fresh.release.mass, cached.release.mass)
    assert fresh.result.H_star == cached.result.H_star

def test_cache_file_for_another_digest_is_rejected(cache_dir):
    params = tiny_params()
    other = tiny_params(chi=0.6)
    Pipeline(cache_dir).gel(params)
    shutil.copy(cache.gel_cache_path(cache_dir, params.gel_digest), cache.gel_cache_path(cache_dir, other.gel_digest))

    with pytest.raises(CacheError, match="digest"):
        cache.load_gel_history(cache_dir, other)

    recovering = Pipeline(cache_dir)
    history = recovering.gel(other)
    assert recovering.misses == 1
    assert history.chi == 0.6
    assert cache.load_gel_history(cache_dir, other).chi == 0.6


def test_corrupt_cache_files_are_rejected(cache_dir):
    params = tiny_params()
    Pipeline(cache_dir).gel(params)
    path = cache.gel_cache_path(cache_dir, params.gel_digest)
    payload = bytearray(path.read_bytes())

    path.write_bytes(b"NOTACACH" + bytes(payload[8:]))
    with pytest.raises(CacheError, match="not a gelrelease cache file"):
        cache.load_gel_history(cache_dir, params)

    path.write_bytes(bytes(payload[:-8]))
    with pytest.raises(CacheError, match="truncated"):
        cache.load_gel_history(cache_dir, params)

    with pytest.raises(CacheError, match="expected 'basis'"):
        cache.read_cache_file(cache.gel_cache_path(cache_dir, params.gel_digest), "basis", params.gel_digest)
    assert cache.load_efflux_basis(cache_dir, params) is None


def test_optimize_superposes_the_released_field(cache_dir):
    params = tiny_params()
    pipeline = Pipeline(cache_dir)
    run = pipeline.optimize(params)

    assert run.result.certified
    assert run.result.d.sum() == pytest.approx(TOTAL_DRUG, rel=1e-10)
    assert run.release.initial_mass == pytest.approx(TOTAL_DRUG, rel=1e-10)
    np.testing.assert_allclose(run.release.efflux_boundary, run.result.F_opt, rtol=1e-9, atol=1e-13)
    assert run.result.H_integral == pytest.approx(run.result.H_star, rel=1e-8, abs=1e-12)
    np.testing.assert_allclose(run.concentration, run.result.d * run.grid.packet_heights)
    assert run.released[-1] > 0.5

    manifest = pipeline.manifest("optimize", params, status="ok")
    assert manifest.digests["params"] == params.digest
    assert manifest.digests["basis"] == params.basis_digest
    assert manifest.cache_misses == 2
    assert set(manifest.stage_seconds) >= {"gel", "basis", "qp", "drug"}

    pipeline.record_run(manifest)
    with session_scope(pipeline.ledger) as session:
        runs = list_runs(session)
        assert [(record.subcommand, record.params_digest) for record in runs] == [("optimize", params.digest)]


def test_sweep_marks_failed_cells(cache_dir):
    base = tiny_params()
    rows = stiffness_sweep(base, [0.5], [7e-3, 7e-2], [2.0, 5.0, 20.0], [0.1], pipeline=Pipeline(cache_dir, threads=2))

    assert [(row.Ghat, row.tau) for row in rows] == [
        (7e-3, 2.0),
        (7e-3, 5.0),
        (7e-3, 20.0),
        (7e-2, 2.0),
        (7e-2, 5.0),
        (7e-2, 20.0),
    ]
    failed = [row for row in rows if row.status == "failed"]
    assert [row.tau for row in failed] == [20.0, 20.0]
    assert all(math.isnan(row.H_star) and "tau" in row.error for row in failed)
    solved = [row for row in rows if row.status != "failed"]
    assert all(row.status in {"ok", "uncertified"} and math.isfinite(row.H_star) for row in solved)
    assert all(row.H_star >= 0.0 for row in solved)
