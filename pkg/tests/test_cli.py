import json

import numpy as np
import pytest

from app import database, export
from app.main import main, parse_log_range, parse_range, read_loading
from app.errors import ConfigError, DrugLoadingError

from conftest import tiny_params

TINY_CONFIG = "chi=0.5 Ghat=7e-3 Dhat=0.1\ntau=5 M=10 dt_out=0.1 T_end=10\n"


@pytest.fixture()
def workspace(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text(TINY_CONFIG, encoding="utf-8")
    return {"config": str(config), "cache": str(tmp_path / "cache"), "root": tmp_path}


def run_cli(workspace, command, out, *extra):
    return main([command, "--config", workspace["config"], "--cache", workspace["cache"], "--out", str(out), *extra])


def test_parse_range_and_log_range():
    assert len(parse_range("0:3:0.05")) == 61
    assert parse_range("1:1:0.5") == [1.0]
    assert parse_log_range("7e-5:7e-3:3") == pytest.approx([7e-5, 7e-4, 7e-3])
    for bad in ("0:3", "a:b:c", "3:0:1", "0:1:0"):
        with pytest.raises(ConfigError):
            parse_range(bad)


def test_equilibrate_writes_the_full_table(tmp_path):
    out = tmp_path / "eq"
    code = main(["equilibrate", "--cache", str(tmp_path / "cache"), "--out", str(out)])

    assert code == 0
    chis = export.read_csv_column(out / "equilibrium.csv", "chi")
    J = export.read_csv_column(out / "equilibrium.csv", "J_inf")
    assert chis.size == 183
    assert np.all(J > 1.0)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["subcommand"] == "equilibrate"
    assert str(out / "equilibrium.csv") in manifest["outputs"]


def test_malformed_range_is_a_usage_error(tmp_path):
    code = main(["equilibrate", "--chi-range", "0:3", "--cache", str(tmp_path / "cache"), "--out", str(tmp_path)])

    assert code == 2


def test_unknown_subcommand_is_a_usage_error():
    assert main(["dissolve"]) == 2


def test_missing_required_key_exits_with_usage_code(workspace):
    broken = workspace["root"] / "broken.cfg"
    broken.write_text("chi=0.5 Ghat=7e-3 Dhat=0.1\n", encoding="utf-8")

    code = main(["swell", "--config", str(broken), "--cache", workspace["cache"], "--out", str(workspace["root"] / "x")])

    assert code == 2
    assert main(["swell", "--cache", workspace["cache"], "--out", str(workspace["root"] / "x")]) == 2


def test_swell_exports_history(workspace):
    out = workspace["root"] / "swell"

    assert run_cli(workspace, "swell", out) == 0
    radius = export.read_csv_column(out / "swelling.csv", "r_surface")
    assert radius.size == 101
    assert radius[0] == 1.0 and radius[-1] > 1.5
    assert (out / "swelling_profiles.csv").read_text(encoding="utf-8").startswith("# digest=")
    assert database._engines == {}


def test_release_uniform_and_file_loadings(workspace):
    root = workspace["root"]
    assert run_cli(workspace, "release", root / "uniform") == 0
    released = export.read_csv_column(root / "uniform" / "release.csv", "R")
    assert released[0] == 0.0 and released[-1] > 0.5

    zeros = root / "zeros.txt"
    np.savetxt(zeros, np.zeros(10))
    assert run_cli(workspace, "release", root / "zero", "--loading", str(zeros)) == 0
    assert np.all(export.read_csv_column(root / "zero" / "release.csv", "F_boundary") == 0.0)

    short = root / "short.txt"
    np.savetxt(short, np.ones(7))
    assert run_cli(workspace, "release", root / "short", "--loading", str(short)) == 2


def test_read_loading_accepts_loading_csv(tmp_path):
    params = tiny_params()
    path = export.write_csv(tmp_path / "loading.csv", ("R", "concentration"), zip(range(10), np.arange(10.0)), "x")

    np.testing.assert_array_equal(read_loading(str(path), params), np.arange(10.0))
    np.testing.assert_array_equal(read_loading("uniform", params), np.ones(10))
    with pytest.raises(ConfigError):
        read_loading(str(tmp_path / "missing.txt"), params)
    with pytest.raises(DrugLoadingError):
        read_loading(str(export.write_csv(tmp_path / "few.csv", ("concentration",), [(1.0,)], "x")), params)


def test_optimize_rerun_hits_the_cache_and_is_reproducible(workspace):
    root = workspace["root"]
    assert run_cli(workspace, "optimize", root / "first") == 0
    assert run_cli(workspace, "optimize", root / "second") == 0

    first = json.loads((root / "first" / "manifest.json").read_text(encoding="utf-8"))
    second = json.loads((root / "second" / "manifest.json").read_text(encoding="utf-8"))
    assert first["cache_misses"] == 2
    assert second["cache_misses"] == 0 and second["cache_hits"] >= 2
    assert second["status"] == "ok"
    for name in ("loading.csv", "efflux.csv", "summary.csv"):
        assert (root / "first" / name).read_bytes() == (root / "second" / name).read_bytes()

    weights = export.read_csv_column(root / "first" / "loading.csv", "weight")
    assert weights.size == 10
    assert weights.sum() == pytest.approx(4.0 * np.pi / 3.0, rel=1e-10)


def test_basis_and_sweep_and_cache_listing(workspace, capsys):
    root = workspace["root"]
    assert run_cli(workspace, "basis", root / "basis") == 0
    integrals = export.read_csv_column(root / "basis" / "basis_summary.csv", "integral")
    assert integrals.size == 10

    assert run_cli(workspace, "sweep", root / "sweep", "--tau", "2,5", "--Ghat", "7e-3,7e-2", "--threads", "2") == 0
    taus = export.read_csv_column(root / "sweep" / "sweep.csv", "tau")
    assert list(taus) == [2.0, 5.0, 2.0, 5.0]

    assert main(["cache", "--cache", workspace["cache"], "--out", str(root / "cache-out")]) == 0
    listing = capsys.readouterr().out
    assert listing.count("basis") == 2
    assert "gel" in listing
