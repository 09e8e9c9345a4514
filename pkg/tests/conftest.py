import numpy as np
import pytest

from app.gel import solve_gel
from app.grid import build_grid
from app.optimizer import EffluxBasis, compute_efflux_basis, trapezoid_weights
from app.schemas import ParamSet


def coarse_params(**overrides) -> ParamSet:
    values = {"chi": 0.5, "Ghat": 7e-3, "Dhat": 0.1, "tau": 12.0, "M": 40, "dt_out": 0.05, "T_end": 50.0}
    values.update(overrides)
    return ParamSet(**values)


def tiny_params(**overrides) -> ParamSet:
    values = {"chi": 0.5, "Ghat": 7e-3, "Dhat": 0.1, "tau": 5.0, "M": 10, "dt_out": 0.1, "T_end": 10.0}
    values.update(overrides)
    return ParamSet(**values)


def synthetic_basis(M: int = 5, T_end: float = 20.0, dt: float = 0.05) -> EffluxBasis:
    """Smooth positive curves with unit integral standing in for solved partial effluxes."""
    times = np.arange(round(T_end / dt) + 1) * dt
    rates = np.linspace(0.4, 1.6, M)
    delays = np.linspace(3.0, 0.2, M)
    curves = np.array([t_peak_curve(times, rate, delay) for rate, delay in zip(rates, delays)])
    curves /= (curves @ trapezoid_weights(times))[:, None]
    grid = build_grid(M)
    return EffluxBasis(times=times, f=curves, integrals=curves @ trapezoid_weights(times), digest="synthetic", grid=grid)


def t_peak_curve(times: np.ndarray, rate: float, delay: float) -> np.ndarray:
    return times * np.exp(-rate * times) + np.exp(-rate * (times - delay) ** 2)


@pytest.fixture(scope="session")
def stiff_params() -> ParamSet:
    return coarse_params()


@pytest.fixture(scope="session")
def stiff_gel(stiff_params):
    return solve_gel(stiff_params)


@pytest.fixture(scope="session")
def stiff_basis(stiff_gel, stiff_params):
    return compute_efflux_basis(stiff_gel, stiff_params, threads=2)


@pytest.fixture()
def cache_dir(tmp_path):
    return tmp_path / "cache"
