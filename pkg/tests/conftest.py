import numpy as np
import pytest
from cachelib import NullCache

from config import N_MODEL
from services.basis_bank import assemble_bank, field_grid
from services.hamiltonian import GridSpec, PhysicalParams, SolverOptions
from services.state_cache import set_cache

# State order of the synthetic bank: S(2,0), S(1,1), T0, T+, T-
SINGLET = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
OCC_LEFT = np.array([0.9, 0.5, 0.5, 0.5, 0.5])
SPIN_X = np.array([0.0, 0.0, 0.0, 1.0, -1.0])
REFERENCE_ENERGIES = np.array([-0.30, -0.10, 0.0, 0.02, -0.02])
ENERGY_SLOPES = np.array([-0.01, 0.0, 0.0, 0.0, 0.0])


def synthetic_dipole():
    mu = np.zeros((N_MODEL, N_MODEL), dtype=complex)
    mu[0, 0] = -100.0
    mu[0, 1] = mu[1, 0] = 20.0
    mu[1, 3] = mu[3, 1] = 5.0
    mu[1, 4] = mu[4, 1] = 3.0
    mu[2, 3] = mu[3, 2] = 4.0
    return mu


def make_synthetic_bank(F_min=220.0, F_max=232.0, dF=0.2, reference_F=226.0, rate_normalization="global",
                        dipole=None):
    """Bank with F-independent eigenvectors (G = I) and energies linear in F."""
    F_grid = field_grid(F_min, F_max, dF)
    n = len(F_grid)
    r = int(np.argmin(np.abs(F_grid - reference_F)))
    energies = REFERENCE_ENERGIES[None, :] + ENERGY_SLOPES[None, :] * (F_grid[:, None] - reference_F)
    overlaps = np.tile(np.eye(N_MODEL, dtype=complex), (n, 1, 1))
    return assemble_bank(
        F_grid, energies,
        np.tile(SINGLET, (n, 1)), np.tile(OCC_LEFT, (n, 1)), np.tile(SPIN_X, (n, 1)),
        overlaps, synthetic_dipole() if dipole is None else dipole, r,
        params=PhysicalParams(), rate_normalization=rate_normalization,
    )


@pytest.fixture
def bank():
    return make_synthetic_bank()


@pytest.fixture
def small_grid():
    return GridSpec(-150.0, 150.0, 32)


@pytest.fixture
def quick_solver():
    return SolverOptions(dtau_start=1e-3, dtau_min=1e-3, dtau_max=0.05, energy_tol=1e-6, max_iterations=20000)


@pytest.fixture(autouse=True)
def no_state_cache():
    set_cache(NullCache())
    yield
    set_cache(None)
