import numpy as np
import pytest

from conftest import synthetic_basis, tiny_params

from app.drug import solve_drug
from app.equilibrium import asymptotic_decay_rate
from app.gel import solve_gel
from app.errors import ConfigError, GridMismatchError, InfeasibleBudgetError
from app.grid import build_grid
from app.optimizer import (
    MAX_DRUG_FRACTION,
    QpProblem,
    assemble_qp,
    cell_concentration,
    compute_efflux_basis,
    core_extent,
    drug_bounds,
    drug_fraction,
    multistart,
    packet_bases,
    project_capped_simplex,
    reconstruct,
    solve_qp,
    solve_qp_exhaustive,
    support_clusters,
    target_profile,
    trapezoid_weights,
    with_reconstruction,
)
from app.schemas import TOTAL_DRUG


@pytest.fixture(scope="module")
def synthetic():
    basis = synthetic_basis()
    target = target_profile(6.0, basis.times)
    return basis, target


@pytest.fixture(scope="module")
def coarse_solved():
    params = tiny_params(M=6)
    basis = compute_efflux_basis(solve_gel(params), params, threads=1)
    return basis, target_profile(params.tau, basis.times)


def h_tolerance(value: float) -> float:
    return 1e-8 * max(1.0, abs(value))


def test_packets_carry_unit_mass():
    grid = build_grid(7)
    packets = packet_bases(grid)

    assert [packet.index for packet in packets] == list(range(7))
    assert packets[0].lower == 0.0 and packets[-1].upper == 1.0
    for packet in packets:
        assert grid.integrate(packet.loading(grid)) == pytest.approx(1.0, rel=1e-12)
    assert packets[0].height > packets[-1].height


def test_trapezoid_weights():
    np.testing.assert_allclose(trapezoid_weights(np.array([0.0, 1.0, 3.0])), [0.5, 1.5, 1.0])
    np.testing.assert_array_equal(trapezoid_weights(np.array([2.0])), [0.0])


def test_target_profile_is_a_plateau_ending_at_tau():
    times = np.arange(401) * 0.05
    target = target_profile(6.0, times)

    assert target.n_tau == 120
    assert target.plateau == pytest.approx(TOTAL_DRUG / 6.0)
    assert target.integral == pytest.approx(TOTAL_DRUG)
    assert target.samples[target.n_tau] == target.plateau
    assert target.samples[target.n_tau + 1] == 0.0
    assert target.weights.sum() == pytest.approx(6.0)
    with pytest.raises(ConfigError, match="tau"):
        target_profile(6.01, times)
    with pytest.raises(ConfigError):
        target_profile(0.0, times)


def test_projection_examples():
    np.testing.assert_allclose(project_capped_simplex(np.full(3, 0.5), None, 1.0), np.full(3, 1.0 / 3.0))
    np.testing.assert_allclose(project_capped_simplex(np.array([2.0, 0.0, 0.0]), None, 1.0), [1.0, 0.0, 0.0])
    capped = project_capped_simplex(np.array([1.0, 0.0, 0.0]), np.array([0.3, 1.0, 1.0]), 1.0)
    np.testing.assert_allclose(capped, [0.3, 0.35, 0.35])
    np.testing.assert_array_equal(project_capped_simplex(np.zeros(2), np.array([0.5, 0.5]), 1.0), [0.5, 0.5])
    np.testing.assert_array_equal(
        project_capped_simplex(np.array([TOTAL_DRUG, 1e-17, 1e-17]), None, TOTAL_DRUG), [TOTAL_DRUG, 0.0, 0.0]
    )
    with pytest.raises(InfeasibleBudgetError):
        project_capped_simplex(np.zeros(2), np.array([0.4, 0.4]), 1.0)
    with pytest.raises(ConfigError):
        project_capped_simplex(np.zeros(2), np.array([0.0, 2.0]), 1.0)


def test_projection_satisfies_variational_inequality():
    rng = np.random.default_rng(3)
    upper = rng.uniform(0.2, 1.0, size=12)
    budget = 0.6 * upper.sum()
    for _ in range(20):
        v = rng.normal(scale=2.0, size=12)
        p = project_capped_simplex(v, upper, budget)
        assert p.sum() == pytest.approx(budget, rel=1e-12)
        assert np.all(p >= 0.0) and np.all(p <= upper)
        for _ in range(5):
            z = project_capped_simplex(rng.normal(size=12), upper, budget)
            assert np.dot(v - p, z - p) <= 1e-10
        assert np.all((p == 0.0) | (p >= np.finfo(float).eps * budget))


def test_drug_bounds_keep_the_fraction_at_the_cap():
    grid = build_grid(199)
    upper = drug_bounds(grid, 0.1)

    np.testing.assert_allclose(upper, 2.0 * 4.0 * np.pi * grid.volumes)
    assert upper.sum() == pytest.approx(2.0 * TOTAL_DRUG)
    np.testing.assert_allclose(drug_fraction(upper, grid, 0.1), MAX_DRUG_FRACTION)
    assert np.all(np.isinf(drug_bounds(grid, 0.0)))


def test_assemble_qp_structure(synthetic):
    basis, target = synthetic
    qp = assemble_qp(basis, target, 0.0, basis.grid)

    assert qp.S.shape == (5, 5)
    np.testing.assert_array_equal(qp.S, qp.S.T)
    assert np.min(np.linalg.eigvalsh(qp.S)) >= -1e-10 * np.max(np.abs(qp.S))
    assert qp.c0 == pytest.approx(TOTAL_DRUG**2 / 6.0)
    assert qp.budget == TOTAL_DRUG
    with pytest.raises(InfeasibleBudgetError, match="eps"):
        assemble_qp(basis, target, 0.25, basis.grid)
    with pytest.raises(GridMismatchError):
        assemble_qp(basis, target_profile(6.0, basis.times[:-1]), 0.0, basis.grid)
    with pytest.raises(GridMismatchError):
        assemble_qp(basis, target, 0.0, build_grid(6))


@pytest.mark.parametrize("eps", [0.0, 0.15])
def test_objective_is_convex_along_segments(synthetic, eps):
    basis, target = synthetic
    qp = assemble_qp(basis, target, eps, basis.grid)
    rng = np.random.default_rng(1)
    for _ in range(10):
        v = project_capped_simplex(rng.exponential(size=5), qp.upper, TOTAL_DRUG)
        w = project_capped_simplex(rng.exponential(size=5), qp.upper, TOTAL_DRUG)
        for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
            mixed = qp.objective(alpha * v + (1.0 - alpha) * w)
            assert alpha * qp.objective(v) + (1.0 - alpha) * qp.objective(w) - mixed >= -1e-10


def test_objective_matches_reconstructed_misfit(synthetic):
    basis, target = synthetic
    qp = assemble_qp(basis, target, 0.0, basis.grid)
    for k in range(5):
        d = np.zeros(5)
        d[k] = TOTAL_DRUG
        F, H = reconstruct(basis, d, target)
        np.testing.assert_allclose(F, TOTAL_DRUG * basis.f[k])
        assert H == pytest.approx(qp.objective(d), rel=1e-10)
    with pytest.raises(GridMismatchError):
        reconstruct(basis, np.ones(4), target)


@pytest.mark.parametrize("eps", [0.0, 0.15])
def test_solve_qp_matches_exhaustive_search(synthetic, eps):
    basis, target = synthetic
    qp = assemble_qp(basis, target, eps, basis.grid)
    result = with_reconstruction(solve_qp(qp), basis, target)
    exact = solve_qp_exhaustive(qp)

    assert result.certified
    assert result.kkt_residual <= 1e-8 * max(1.0, np.linalg.norm(qp.q))
    assert abs(result.H_star - exact.H_star) <= h_tolerance(exact.H_star)
    assert result.d.sum() == pytest.approx(TOTAL_DRUG, rel=1e-10)
    assert np.all(result.d >= 0.0) and np.all(result.d <= qp.upper)
    assert result.H_integral == pytest.approx(result.H_star, rel=1e-8, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.15])
def test_solve_qp_matches_exhaustive_search_on_a_solved_basis(coarse_solved, eps):
    basis, target = coarse_solved
    qp = assemble_qp(basis, target, eps, basis.grid)
    result = solve_qp(qp)
    exact = solve_qp_exhaustive(qp)

    assert qp.size == 6
    assert result.certified
    assert abs(result.H_star - exact.H_star) <= h_tolerance(exact.H_star)


def test_multistart_agrees(synthetic):
    basis, target = synthetic
    qp = assemble_qp(basis, target, 0.0, basis.grid)
    results = multistart(qp)
    values = [result.H_star for result in results]

    assert len(results) == 10
    assert all(result.certified for result in results)
    assert max(values) - min(values) <= h_tolerance(min(values))


def test_solve_qp_certifies_on_a_solved_basis(stiff_basis, stiff_params):
    target = target_profile(stiff_params.tau, stiff_basis.times)
    qp = assemble_qp(stiff_basis, target, 0.0, stiff_basis.grid)
    results = multistart(qp)
    values = [result.H_star for result in results]

    assert all(result.certified for result in results)
    assert all(result.kkt_residual <= 1e-8 * max(1.0, np.linalg.norm(qp.q)) for result in results)
    assert max(values) - min(values) <= h_tolerance(min(values))
    assert solve_qp(qp).H_star == pytest.approx(min(values), rel=1e-8, abs=1e-8)


def test_degenerate_problems():
    single = QpProblem(S=np.array([[2.0]]), q=np.array([1.0]), c0=0.0, budget=TOTAL_DRUG, upper=np.array([np.inf]))
    result = solve_qp(single)

    np.testing.assert_allclose(result.d, [TOTAL_DRUG])
    assert result.certified

    flat = QpProblem(S=np.eye(4), q=np.zeros(4), c0=0.0, budget=2.0, upper=np.full(4, np.inf))
    start = np.array([2.0, 0.0, 0.0, 0.0])
    result = solve_qp(flat, start)

    np.testing.assert_allclose(result.d, np.full(4, 0.5), atol=1e-7)
    assert result.H_star == pytest.approx(0.5, rel=1e-6)
    with pytest.raises(ConfigError):
        solve_qp_exhaustive(QpProblem(S=np.eye(9), q=np.zeros(9), c0=0.0, budget=1.0, upper=np.full(9, np.inf)))


def test_core_extent_and_clusters():
    upper = np.ones(5)

    assert core_extent(np.array([1.0, 1.0, 0.5, 0.0, 0.0]), upper) == 2
    assert core_extent(np.array([0.5, 1.0, 1.0, 0.0, 0.0]), upper) == 0
    assert core_extent(np.ones(5), upper) == 5
    assert support_clusters(np.array([0.0, 1.0, 1.0, 0.0, 2.0])) == [(1, 2, 2.0), (4, 4, 2.0)]
    assert support_clusters(np.array([3.0, 0.0])) == [(0, 0, 3.0)]
    np.testing.assert_allclose(cell_concentration(np.ones(3), build_grid(3)), build_grid(3).packet_heights)


def test_real_basis_curves(stiff_basis, stiff_params):
    f = stiff_basis.f
    peaks = np.argmax(f, axis=1)

    assert f.shape == (stiff_params.M, stiff_params.n_out + 1)
    assert stiff_basis.digest == stiff_params.basis_digest
    np.testing.assert_allclose(stiff_basis.integrals, 1.0, atol=1e-3)
    assert np.all(f >= -1e-15)
    assert peaks[-1] < peaks[stiff_params.M // 2] <= peaks[0]
    expected = asymptotic_decay_rate(stiff_params)
    assert np.median(stiff_basis.tail_rates()) == pytest.approx(expected, rel=0.05)
    assert stiff_basis.decay_rate() == pytest.approx(expected, rel=0.05)


def test_basis_is_independent_of_worker_count(stiff_basis, stiff_gel, stiff_params):
    serial = compute_efflux_basis(stiff_gel, stiff_params, threads=1)

    np.testing.assert_allclose(serial.f, stiff_basis.f, rtol=1e-12, atol=1e-15)


def test_reconstruction_superposes_drug_solutions(stiff_basis, stiff_gel, stiff_params):
    rng = np.random.default_rng(5)
    d = rng.exponential(size=stiff_params.M)
    d *= TOTAL_DRUG / d.sum()
    target = target_profile(stiff_params.tau, stiff_basis.times)
    F, _ = reconstruct(stiff_basis, d, target)
    drug = solve_drug(stiff_gel, cell_concentration(d, stiff_basis.grid), stiff_params)

    np.testing.assert_allclose(F, drug.efflux_boundary, rtol=1e-9, atol=1e-13)
    assert drug.initial_mass == pytest.approx(TOTAL_DRUG, rel=1e-12)
