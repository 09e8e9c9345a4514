import numpy as np
import pytest

from conftest import coarse_params, tiny_params

from app.equilibrium import equilibrium_pressure, equilibrium_swelling
from app.errors import GelSolverError
from app.gel import (
    GelState,
    initial_state,
    is_admissible,
    solve_gel,
    step_gel,
    surface_traction,
    uniform_gel_history,
)
from app.grid import build_grid


def test_gel_reaches_equilibrium(stiff_gel, stiff_params):
    J_inf = equilibrium_swelling(stiff_params.chi, stiff_params.Ghat)
    final_J = stiff_gel.J[-1]

    assert stiff_gel.kind == "transient"
    assert stiff_gel.digest == stiff_params.gel_digest
    assert stiff_gel.times[-1] == pytest.approx(stiff_params.T_end)
    assert np.max(np.abs(final_J / J_inf - 1.0)) < 5e-3
    assert stiff_gel.surface_radius[-1] == pytest.approx(J_inf ** (1.0 / 3.0), rel=5e-3)
    assert np.max(np.abs(stiff_gel.p[-1] / equilibrium_pressure(J_inf) - 1.0)) < 5e-2


def test_gel_geometry_stays_admissible(stiff_gel):
    assert np.all(stiff_gel.r[:, 0] == 0.0)
    assert np.all(np.diff(stiff_gel.r, axis=1) > 0)
    assert np.all(stiff_gel.Nw > 0)
    np.testing.assert_allclose(stiff_gel.J[1:], 1.0 + stiff_gel.Nw[1:], atol=1e-8)


def test_gel_volume_grows_monotonically(stiff_gel):
    radius = stiff_gel.surface_radius

    assert radius[0] == 1.0
    assert np.all(np.diff(radius) >= -1e-9)
    assert radius[-1] > 1.5


def test_gel_water_balance(stiff_gel, stiff_params):
    content = stiff_gel.water_content
    imbalance = content - content[0] - stiff_gel.water_uptake

    assert stiff_gel.water_uptake[0] == 0.0
    assert np.all(np.diff(stiff_gel.water_uptake) >= -1e-12)
    assert np.max(np.abs(imbalance)) <= 1e-7 * stiff_params.T_end * content[-1]


def test_gel_surface_is_traction_free(stiff_gel):
    for k in (1, stiff_gel.times.size // 2, stiff_gel.times.size - 1):
        assert abs(surface_traction(stiff_gel.state(k), stiff_gel.grid)) <= 1e-9


def test_uniform_equilibrium_is_a_fixed_point():
    params = coarse_params()
    J_inf = equilibrium_swelling(params.chi, params.Ghat)
    state = uniform_gel_history(params, J_inf).state(0)

    assert abs(surface_traction(state, build_grid(params.M))) < 1e-12

    advanced = step_gel(state, 0.5, params)

    assert advanced.t == pytest.approx(0.5)
    np.testing.assert_allclose(advanced.Nw, state.Nw, rtol=1e-9)
    np.testing.assert_allclose(advanced.r, state.r, rtol=1e-9)
    np.testing.assert_allclose(advanced.p, state.p, rtol=1e-9)


def test_first_step_swells_the_boundary_cell():
    params = coarse_params()
    grid = build_grid(params.M)
    start = initial_state(grid, params.reg)

    advanced = step_gel(start, 1e-4, params, grid=grid)

    assert is_admissible(advanced)
    assert advanced.Nw[-1] > 2 * params.reg
    np.testing.assert_allclose(advanced.Nw[: params.M // 2], params.reg, rtol=1e-3)
    assert advanced.r[-1] >= 1.0


def test_dry_gel_is_rejected():
    params = tiny_params()
    grid = build_grid(params.M)

    with pytest.raises(GelSolverError):
        step_gel(initial_state(grid, 0.0), 0.1, params, grid=grid)
    with pytest.raises(GelSolverError):
        initial_state(grid, -1e-6)
    with pytest.raises(GelSolverError, match="seed"):
        solve_gel(tiny_params(reg=0.0))


def test_step_gel_checks_cell_count():
    params = tiny_params()
    state = initial_state(build_grid(12), params.reg)

    with pytest.raises(GelSolverError, match="cells"):
        step_gel(state, 0.1, params)


def test_state_packing_interleaves_unknowns():
    grid = build_grid(3)
    state = GelState(t=0.0, r=grid.edges * 2.0, Nw=np.array([1.0, 2.0, 3.0]), p=np.array([4.0, 5.0, 6.0]))
    x = state.pack()

    np.testing.assert_array_equal(x[:3], [1.0, 4.0, 2.0 / 3.0])
    restored = GelState.unpack(1.0, x)
    np.testing.assert_array_equal(restored.r, state.r)
    assert restored.t == 1.0


def test_history_interpolates_coefficients(stiff_gel):
    t0, t1 = stiff_gel.times[10], stiff_gel.times[11]
    J, lam_r = stiff_gel.coefficients_at(0.5 * (t0 + t1))

    np.testing.assert_allclose(J, 0.5 * (stiff_gel.J[10] + stiff_gel.J[11]))
    np.testing.assert_allclose(lam_r, 0.5 * (stiff_gel.lam_r[10] + stiff_gel.lam_r[11]))
    np.testing.assert_array_equal(stiff_gel.coefficients_at(1e9)[0], stiff_gel.J[-1])


def test_uniform_history_is_stationary():
    params = tiny_params()
    history = uniform_gel_history(params, 4.0)

    assert history.kind == "uniform"
    np.testing.assert_allclose(history.J, 4.0)
    np.testing.assert_array_equal(history.water_uptake, 0.0)
    with pytest.raises(ValueError):
        history.Nw[0, 0] = 1.0


def test_surface_radius_converges_at_first_order():
    errors = []
    previous = None
    for M, dt_out in ((10, 0.1), (20, 0.05), (40, 0.025), (80, 0.0125)):
        history = solve_gel(tiny_params(M=M, dt_out=dt_out, T_end=4.0, tau=2.0))
        radius = history.surface_radius[:: round(0.1 / dt_out)]
        if previous is not None:
            errors.append(float(np.max(np.abs(radius - previous))))
        previous = radius

    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert errors[-1] < errors[0]
    assert np.all(orders >= 0.9), (errors, orders)


def test_centre_stays_regular(stiff_gel):
    gap = np.abs(stiff_gel.lam_theta[:, 0] - stiff_gel.lam_r[:, 0])

    assert np.max(gap) <= 10 * stiff_gel.grid.dR


def test_soft_gel_approaches_its_equilibrium():
    params = tiny_params(Ghat=7e-4, T_end=20.0, tau=5.0)
    history = solve_gel(params)
    J_inf = equilibrium_swelling(params.chi, params.Ghat)
    volume_gap = 1.0 - history.surface_radius**3 / J_inf
    half = history.times.size // 2

    assert volume_gap[0] == pytest.approx(1.0 - 1.0 / J_inf)
    assert np.all(np.diff(volume_gap) <= 1e-9)
    assert 0.0 < volume_gap[-1] < volume_gap[half] < volume_gap[0]
