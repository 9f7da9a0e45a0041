"""
hamiltonian.py – Two-electron nanowire Hamiltonian and eigensolver for DotControl

Provides:
- Grid, physical parameter, spinor state and eigenbasis types
- Double-well potential with field tilt and the regularized 1D Coulomb kernel
- Action of the spinor Hamiltonian (kinetic, Rashba, Zeeman, potential, Coulomb)
- Lowest eigenstates by split-operator imaginary-time evolution, refined with LOBPCG
- Singlet character, dot occupations, spin projection and state labels
- Calibration helpers for the well asymmetry, the well width and the S(2,0)-T(2,0) splitting
- Zeeman splitting estimate and a grid-refinement check
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import fft as sfft
from scipy import linalg
from scipy.optimize import brentq, linear_sum_assignment
from scipy.sparse.linalg import LinearOperator, lobpcg
from scipy.special import erf, erfcx

from config import (
    BOHR_MAGNETON,
    COULOMB_CONSTANT,
    DEGENERACY_TOL,
    FIELD_ENERGY,
    HBAR2_OVER_2M0,
    HBAR_MEV_PS,
    S11,
    S20,
    T0,
    T20,
    TMINUS,
    TPLUS,
)
from services.errors import NumericalError, SolverConvergenceError

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid shared by both particle coordinates (nm)."""

    x_min: float = -150.0
    x_max: float = 150.0
    n_points: int = 256

    def __post_init__(self):
        n = int(self.n_points)
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two, got {self.n_points}")
        if not self.x_min < 0.0 < self.x_max:
            raise ValueError(f"grid must straddle the origin, got [{self.x_min}, {self.x_max}]")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_points

    @property
    def cell(self) -> float:
        return self.dx * self.dx

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    @property
    def k(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.n_points, d=self.dx)


@dataclass(frozen=True)
class PhysicalParams:
    m_eff: float = 0.027
    alpha_rashba: float = 110.0     # meV nm
    g_left: float = 7.8
    g_right: float = 6.8
    B_field: float = 0.05           # T, along the wire
    barrier_height: float = 35.0    # meV
    depth_left: float = -41.0       # meV, negative = attractive
    depth_right: float = -35.0
    width_left: float = 80.0        # nm
    width_right: float = 80.0
    center_left: float = -52.0
    center_right: float = 52.0
    edge_smoothing: float = 2.0     # nm
    g_smoothing: float = 2.0        # nm
    coulomb_length: float = 10.0    # nm
    eps_r: float = 15.15
    F_anticross: float = 229.0      # V/cm
    length_scale: float = 100.0     # nm

    def detuning(self, F):
        """Detuning (meV) of an applied field (V/cm)."""
        return (np.asarray(F, dtype=float) - self.F_anticross) * self.length_scale * FIELD_ENERGY

    def field(self, eps):
        """Applied field (V/cm) of a detuning (meV)."""
        return self.F_anticross + np.asarray(eps, dtype=float) / (self.length_scale * FIELD_ENERGY)


@dataclass(frozen=True)
class SolverOptions:
    dtau_start: float = 1.0e-3      # ps
    dtau_min: float = 1.0e-3
    dtau_max: float = 0.05
    energy_tol: float = 1.0e-7      # meV per step
    max_iterations: int = 20000
    ritz_interval: int = 10
    residual_tol: float = 1.0e-4    # meV
    refine_iterations: int = 200


# ─────────────────────────────────────────────────────────────────────────
# Spinor component algebra; arrays are (..., s1, s2, x1, x2), s = 0 up, 1 down
# ─────────────────────────────────────────────────────────────────────────
def _exchange(c):
    return np.swapaxes(np.swapaxes(c, -4, -3), -2, -1)


def _antisymmetrize(c):
    return 0.5 * (c - _exchange(c))


def _spin_axis(particle):
    return -4 if particle == 1 else -3


def _sigma_x(c, particle):
    return np.flip(c, axis=_spin_axis(particle))


def _sigma_y(c, particle):
    axis = _spin_axis(particle)
    up = np.take(c, 0, axis=axis)
    down = np.take(c, 1, axis=axis)
    return np.stack([-1j * down, 1j * up], axis=axis)


def _braket(a, b, cell):
    return np.sum(np.conj(a) * b, axis=(-4, -3, -2, -1)) * cell


@dataclass
class SpinorState:
    """One two-electron state; components indexed [s1, s2, x1, x2]."""

    components: np.ndarray
    grid: GridSpec

    @property
    def phi1(self):
        return self.components[0, 0]

    @property
    def phi2(self):
        return self.components[0, 1]

    @property
    def phi2_swapped(self):
        return self.components[1, 0]

    @property
    def phi3(self):
        return self.components[1, 1]

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.real(_braket(self.components, self.components, self.grid.cell))))

    def inner(self, other: "SpinorState") -> complex:
        if other.grid != self.grid:
            raise ValueError("states live on different grids")
        return complex(_braket(self.components, other.components, self.grid.cell))

    def exchanged(self) -> "SpinorState":
        return SpinorState(_exchange(self.components), self.grid)

    def normalized(self) -> "SpinorState":
        return SpinorState(self.components / self.norm, self.grid)


@dataclass
class EigenBasis:
    field_F: float
    detuning_eps: float
    energies: np.ndarray
    singlet_char: np.ndarray
    occ_left: np.ndarray
    occ_right: np.ndarray
    spin_x: np.ndarray
    labels: tuple = ()
    states: list | None = None
    load_rate: np.ndarray | None = None
    unload_rate: np.ndarray | None = None
    residuals: np.ndarray | None = None
    iterations: int = 0

    @property
    def n_states(self) -> int:
        return len(self.energies)

    def summary_row(self) -> dict:
        row = {"F": self.field_F, "eps": self.detuning_eps}
        for i in range(self.n_states):
            row[f"E_{i + 1}"] = self.energies[i]
            row[f"singlet_{i + 1}"] = self.singlet_char[i]
            row[f"occ_left_{i + 1}"] = self.occ_left[i]
            row[f"occ_right_{i + 1}"] = self.occ_right[i]
            row[f"label_{i + 1}"] = self.labels[i] if self.labels else ""
        return row


def summary_frame(bases) -> pd.DataFrame:
    """Energies, characters and occupations as one row per field value."""
    return pd.DataFrame([b.summary_row() for b in bases])


# ─────────────────────────────────────────────────────────────────────────
# Potential, g-factor profile and Coulomb kernel
# ─────────────────────────────────────────────────────────────────────────
def _window(x, center, width, smoothing):
    return 0.5 * (erf((x - center + 0.5 * width) / smoothing)
                  - erf((x - center - 0.5 * width) / smoothing))


def bare_potential(params: PhysicalParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (params.barrier_height
            + params.depth_left * _window(x, params.center_left, params.width_left, params.edge_smoothing)
            + params.depth_right * _window(x, params.center_right, params.width_right, params.edge_smoothing))


def build_potential(params: PhysicalParams, F: float):
    """
    Single-particle potential V(x) - e x F (meV) for an applied field F (V/cm).
    Returns a callable of x (nm).
    """
    if abs(F - params.F_anticross) > 500.0:
        logger.warning(f"Field {F} V/cm is more than 500 V/cm away from the anticrossing field")

    def potential(x):
        x = np.asarray(x, dtype=float)
        return bare_potential(params, x) - FIELD_ENERGY * F * x

    return potential


def g_factor(params: PhysicalParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    step = 0.5 * (1.0 + erf(x / params.g_smoothing))
    return params.g_left + (params.g_right - params.g_left) * step


def coulomb_1d(d, coulomb_length: float, eps_r: float = 15.15):
    """
    Effective Coulomb repulsion (meV) between two electrons at separation d (nm)
    in a wire with transverse length coulomb_length.
    """
    if coulomb_length <= 0:
        raise ValueError("coulomb_length must be positive")
    d = np.asarray(d, dtype=float)
    strength = COULOMB_CONSTANT / eps_r
    return strength * np.sqrt(np.pi / 2.0) / coulomb_length * erfcx(d / (SQRT2 * coulomb_length))


# ─────────────────────────────────────────────────────────────────────────
# Hamiltonian and imaginary-time propagation
# ─────────────────────────────────────────────────────────────────────────
class TwoElectronHamiltonian:
    """Discretized two-electron spinor Hamiltonian on a GridSpec."""

    def __init__(self, params: PhysicalParams, grid: GridSpec):
        self.params = params
        self.grid = grid
        x = grid.x
        self._x = x
        self._v = bare_potential(params, x)
        self._coulomb = coulomb_1d(np.abs(x[:, None] - x[None, :]), params.coulomb_length, params.eps_r)
        self._zeeman = 0.5 * g_factor(params, x) * BOHR_MAGNETON * params.B_field
        k = grid.k
        self._kinetic = HBAR2_OVER_2M0 / params.m_eff * k ** 2
        # first derivative drops the unpaired Nyquist mode
        k_odd = k.copy()
        k_odd[grid.n_points // 2] = 0.0
        self._k = k_odd

    def diagonal(self, F: float) -> np.ndarray:
        v = self._v - FIELD_ENERGY * F * self._x
        return v[:, None] + v[None, :] + self._coulomb

    def apply(self, components: np.ndarray, F: float) -> np.ndarray:
        c = np.asarray(components, dtype=complex)
        if c.shape[-2:] != (self.grid.n_points, self.grid.n_points):
            raise ValueError(f"state shape {c.shape} does not match the grid")
        ck = sfft.fft2(c, axes=(-2, -1))
        kinetic = self._kinetic[:, None] + self._kinetic[None, :]
        out = sfft.ifft2(kinetic * ck, axes=(-2, -1))
        alpha = self.params.alpha_rashba
        if alpha:
            d1 = sfft.ifft2(self._k[:, None] * ck, axes=(-2, -1))
            d2 = sfft.ifft2(self._k[None, :] * ck, axes=(-2, -1))
            out -= alpha * (_sigma_y(d1, 1) + _sigma_y(d2, 2))
        out += self.diagonal(F) * c
        b = self._zeeman
        out += b[:, None] * _sigma_x(c, 1) + b[None, :] * _sigma_x(c, 2)
        return out

    def split_factors(self, tau: float, F: float) -> dict:
        """Strang factors of exp(-tau H) for an imaginary step tau (1/meV)."""
        half = 0.5 * tau
        b = self._zeeman
        t = self._kinetic
        ak = self.params.alpha_rashba * self._k
        grow = np.exp(-tau * (t - ak))
        decay = np.exp(-tau * (t + ak))
        return {
            "potential": np.exp(-half * self.diagonal(F)),
            "zeeman_cosh": np.cosh(half * b),
            "zeeman_sinh": -np.sinh(half * b),
            "kinetic_even": 0.5 * (grow + decay),
            "kinetic_odd": 0.5 * (grow - decay),
        }

    def _potential_step(self, c, factors):
        c = factors["potential"] * c
        zc, zs = factors["zeeman_cosh"], factors["zeeman_sinh"]
        c = zc[:, None] * c + zs[:, None] * _sigma_x(c, 1)
        return zc[None, :] * c + zs[None, :] * _sigma_x(c, 2)

    def imaginary_step(self, c: np.ndarray, factors: dict) -> np.ndarray:
        c = self._potential_step(c, factors)
        ck = sfft.fft2(c, axes=(-2, -1))
        even, odd = factors["kinetic_even"], factors["kinetic_odd"]
        ck = even[None, :] * ck + odd[None, :] * _sigma_y(ck, 2)
        ck = even[:, None] * ck + odd[:, None] * _sigma_y(ck, 1)
        c = sfft.ifft2(ck, axes=(-2, -1))
        return self._potential_step(c, factors)


def apply_hamiltonian(state: SpinorState, params: PhysicalParams, F: float) -> SpinorState:
    """H psi (unnormalized) at field F."""
    ham = TwoElectronHamiltonian(params, state.grid)
    return SpinorState(ham.apply(state.components, F), state.grid)


# ─────────────────────────────────────────────────────────────────────────
# State characters
# ─────────────────────────────────────────────────────────────────────────
def singlet_character(state: SpinorState) -> float:
    """Weight of the spin-singlet channel (|ud> - |du>)/sqrt(2)."""
    c = state.components
    singlet = (c[0, 1] - c[1, 0]) / SQRT2
    weight = np.sum(np.abs(singlet) ** 2) * state.grid.cell
    return float(np.clip(weight / state.norm ** 2, 0.0, 1.0))


def side_occupation(state: SpinorState, side: str) -> float:
    """Probability of finding one electron in the left (x < 0) or right (x > 0) dot."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    x = state.grid.x
    marginal = np.sum(np.abs(state.components) ** 2, axis=(0, 1, 3))
    weight = np.where(x < 0, 1.0, 0.0) + np.where(x == 0, 0.5, 0.0)
    if side == "right":
        weight = 1.0 - weight
    return float(np.sum(marginal * weight) / np.sum(marginal))


def spin_projection(state: SpinorState) -> float:
    """<sigma_x1 + sigma_x2> / 2, the total spin along the field axis."""
    c = state.components
    flipped = _sigma_x(c, 1) + _sigma_x(c, 2)
    value = np.real(np.vdot(c, flipped)) * state.grid.cell
    return float(0.5 * value / state.norm ** 2)


def _label_scores(singlet, occ_left, spin):
    polarization = 2.0 * occ_left - 1.0
    return {
        S20: polarization + singlet - np.abs(spin),
        S11: singlet - np.abs(polarization) - np.abs(spin),
        T0: (1.0 - singlet) - np.abs(spin) - np.abs(polarization),
        TPLUS: spin,
        TMINUS: -spin,
        T20: polarization + (1.0 - singlet),
    }


def label_states(singlet, occ_left, spin) -> tuple:
    """Assign S(2,0), S(1,1), T0, T+, T- (and T(2,0) for six states) by best overall match."""
    singlet = np.asarray(singlet, dtype=float)
    occ_left = np.asarray(occ_left, dtype=float)
    spin = np.asarray(spin, dtype=float)
    n = len(singlet)
    names = [S20, S11, T0, TPLUS, TMINUS, T20][:max(n, 5)]
    scores = _label_scores(singlet, occ_left, spin)
    score = np.column_stack([scores[name] for name in names])
    rows, cols = linear_sum_assignment(-score)
    labels = [""] * n
    for r, c in zip(rows, cols):
        labels[r] = names[c]
    return tuple(labels)


def _tie_break_order(energies, singlet, occ_left):
    order = list(np.argsort(energies, kind="stable"))
    i = 0
    while i < len(order):
        j = i + 1
        while j < len(order) and energies[order[j]] - energies[order[i]] < DEGENERACY_TOL:
            j += 1
        order[i:j] = sorted(order[i:j], key=lambda a: (-singlet[a], -occ_left[a]))
        i = j
    return order


# ─────────────────────────────────────────────────────────────────────────
# Seeds and the imaginary-time solver
# ─────────────────────────────────────────────────────────────────────────
def _spin_pair(kind):
    right = np.array([1.0, 1.0]) / SQRT2     # spin along +x
    left = np.array([1.0, -1.0]) / SQRT2     # spin along -x
    if kind == "singlet":
        return np.array([[0.0, 1.0], [-1.0, 0.0]]) / SQRT2
    if kind == "t0":
        return (np.outer(right, left) + np.outer(left, right)) / SQRT2
    if kind == "tplus":
        return np.outer(right, right)
    return np.outer(left, left)


def seed_states(params: PhysicalParams, grid: GridSpec, n_states: int = 5) -> np.ndarray:
    """Antisymmetrized products of single-well Gaussians, one per expected state."""
    x = grid.x
    s_left = params.width_left / 4.0
    s_right = params.width_right / 4.0
    left = np.exp(-((x - params.center_left) ** 2) / (2.0 * s_left ** 2))
    right = np.exp(-((x - params.center_right) ** 2) / (2.0 * s_right ** 2))
    left_excited = (x - params.center_left) / s_left * left

    def spatial(a, b, sign):
        return np.outer(a, b) + sign * np.outer(b, a)

    recipes = [
        (np.outer(left, left), "singlet"),
        (spatial(left, right, +1.0), "singlet"),
        (spatial(left, right, -1.0), "t0"),
        (spatial(left, right, -1.0), "tplus"),
        (spatial(left, right, -1.0), "tminus"),
        (spatial(left, left_excited, -1.0), "tplus"),
    ]
    seeds = []
    for space, spin in recipes[:n_states]:
        seeds.append(_spin_pair(spin)[:, :, None, None] * space[None, None, :, :])
    seeds = _antisymmetrize(np.array(seeds, dtype=complex))
    return _gram_schmidt(seeds, grid.cell)


def _gram_schmidt(states, cell):
    out = np.array(states, dtype=complex)
    for i in range(len(out)):
        for j in range(i):
            out[i] -= _braket(out[j], out[i], cell) * out[j]
        norm = np.sqrt(np.real(_braket(out[i], out[i], cell)))
        if norm == 0.0:
            raise NumericalError(f"state {i} vanished during orthogonalization")
        out[i] /= norm
    return out


def _ritz(ham, states, F, cell):
    hs = ham.apply(states, F)
    h = np.einsum("iabxy,jabxy->ij", np.conj(states), hs) * cell
    h = 0.5 * (h + h.conj().T)
    energies, vecs = linalg.eigh(h)
    states = np.tensordot(vecs.T, states, axes=(1, 0))
    hs = np.tensordot(vecs.T, hs, axes=(1, 0))
    return energies, states, hs


def _refine(ham, states, energies, F, options):
    """
    Block preconditioned eigen refinement (LOBPCG) of a converged imaginary-time
    block, preconditioned by the inverse shifted kinetic energy.
    """
    grid = ham.grid
    shape = states.shape[1:]
    size = int(np.prod(shape))
    scale = np.sqrt(grid.cell)
    shift = max(float(np.max(np.abs(energies))), 1.0)
    inverse_kinetic = 1.0 / (ham._kinetic[:, None] + ham._kinetic[None, :] + shift)

    def unpack(block):
        return np.asarray(block).T.reshape((-1,) + shape)

    def pack(c):
        return c.reshape(len(c), size).T

    def matmat(block):
        return pack(ham.apply(unpack(block), F))

    def precondition(block):
        c = sfft.ifft2(inverse_kinetic * sfft.fft2(unpack(block), axes=(-2, -1)), axes=(-2, -1))
        return pack(_antisymmetrize(c))

    operator = LinearOperator((size, size), matvec=matmat, matmat=matmat, dtype=complex)
    preconditioner = LinearOperator((size, size), matvec=precondition, matmat=precondition, dtype=complex)
    try:
        _, vectors = lobpcg(operator, pack(states) * scale, M=preconditioner, tol=options.residual_tol,
                            maxiter=options.refine_iterations, largest=False)
    except (linalg.LinAlgError, ValueError) as e:
        logger.warning(f"F={F:.3f}: eigen refinement failed ({e}); keeping the imaginary-time block")
        return _ritz(ham, states, F, grid.cell)
    refined = _gram_schmidt(_antisymmetrize(unpack(vectors) / scale), grid.cell)
    return _ritz(ham, refined, F, grid.cell)


def solve_lowest(params: PhysicalParams, F: float, n_states: int = 5, seed_states_=None,
                 grid: GridSpec | None = None, options: SolverOptions | None = None) -> EigenBasis:
    """
    Lowest n_states antisymmetric eigenstates at field F by imaginary-time evolution.

    The trial block is evolved with Strang split steps, antisymmetrized and
    re-orthonormalized (modified Gram-Schmidt) every step, and rotated onto
    Ritz vectors of the exact Hamiltonian every ritz_interval steps. A
    converged block is then refined until every residual |H psi - E psi|
    falls below residual_tol (or refine_iterations run out).
    """
    grid = grid or GridSpec()
    options = options or SolverOptions()
    if not 1 <= n_states <= 6:
        raise ValueError(f"n_states must be between 1 and 6, got {n_states}")
    narrowest = min(params.width_left, params.width_right)
    if narrowest / grid.dx < 8:
        raise ValueError(f"grid spacing {grid.dx:.2f} nm does not resolve {narrowest} nm wells")

    ham = TwoElectronHamiltonian(params, grid)
    cell = grid.cell
    if seed_states_ is None:
        states = seed_states(params, grid, n_states)
    else:
        states = np.array([s.components if isinstance(s, SpinorState) else s for s in seed_states_],
                          dtype=complex)[:n_states]
        states = _gram_schmidt(_antisymmetrize(states), cell)

    energies, states, hs = _ritz(ham, states, F, cell)
    dtau = options.dtau_start
    annealing = False
    converged = False
    iterations = 0
    factors_cache = {}
    while iterations < options.max_iterations:
        if dtau not in factors_cache:
            factors_cache[dtau] = ham.split_factors(dtau / HBAR_MEV_PS, F)
        factors = factors_cache[dtau]
        for _ in range(options.ritz_interval):
            states = ham.imaginary_step(states, factors)
            states = _gram_schmidt(_antisymmetrize(states), cell)
        iterations += options.ritz_interval
        previous = energies
        energies, states, hs = _ritz(ham, states, F, cell)
        change = (energies - previous) / options.ritz_interval

        if np.any(change > 1.0e-9):
            logger.debug(f"F={F:.3f}: energy rose by {change.max():.2e} meV/step at dtau={dtau:.2e} ps")
            dtau = max(0.5 * dtau, options.dtau_min)
            annealing = True
        elif np.max(np.abs(change)) < options.energy_tol:
            if dtau <= options.dtau_min * (1.0 + 1e-12):
                converged = True
                break
            dtau = max(0.5 * dtau, options.dtau_min)
            annealing = True
        elif not annealing:
            dtau = min(2.0 * dtau, options.dtau_max)

    if converged and options.refine_iterations > 0:
        energies, states, hs = _refine(ham, states, energies, F, options)
    residuals = np.sqrt(np.real(_braket(hs - energies[:, None, None, None, None] * states,
                                        hs - energies[:, None, None, None, None] * states, cell)))
    if converged and residuals.max() > options.residual_tol:
        logger.warning(f"F={F:.3f}: largest eigen residual {residuals.max():.2e} meV exceeds "
                       f"{options.residual_tol:.1e} meV")
    if not converged:
        logger.error(f"Imaginary-time solve at F={F} V/cm did not converge after {iterations} steps")
        raise SolverConvergenceError(
            f"eigensolver did not converge at F={F} V/cm after {iterations} steps",
            field=F, residuals=residuals)

    spinors = [SpinorState(s, grid) for s in states]
    singlet = np.array([singlet_character(s) for s in spinors])
    occ_left = np.array([side_occupation(s, "left") for s in spinors])
    spin = np.array([spin_projection(s) for s in spinors])
    order = _tie_break_order(energies, singlet, occ_left)

    basis = EigenBasis(
        field_F=float(F),
        detuning_eps=float(params.detuning(F)),
        energies=energies[order],
        singlet_char=singlet[order],
        occ_left=occ_left[order],
        occ_right=1.0 - occ_left[order],
        spin_x=spin[order],
        states=[spinors[i] for i in order],
        residuals=residuals[order],
        iterations=iterations,
    )
    basis.labels = label_states(basis.singlet_char, basis.occ_left, basis.spin_x)
    logger.info(f"Solved F={F:.2f} V/cm in {iterations} steps, max residual {residuals.max():.2e} meV")
    return basis


# ─────────────────────────────────────────────────────────────────────────
# Calibration
# ─────────────────────────────────────────────────────────────────────────
def singlet_triplet_splitting(params: PhysicalParams, grid: GridSpec | None = None,
                              options: SolverOptions | None = None,
                              field_offset: float = -500.0) -> float:
    """E[T(2,0)] - E[S(2,0)] (meV) at far negative detuning."""
    basis = solve_lowest(params, params.F_anticross + field_offset, n_states=6,
                         grid=grid, options=options)
    s20 = basis.labels.index(S20)
    t20 = basis.labels.index(T20)
    return float(basis.energies[t20] - basis.energies[s20])


def _lower_singlet_occupation(params, grid, options):
    basis = solve_lowest(params, params.F_anticross, n_states=5, grid=grid, options=options)
    singlet_like = np.flatnonzero(basis.singlet_char >= 0.5)
    if singlet_like.size == 0:
        raise NumericalError("no singlet-dominated state at the anticrossing field")
    return float(basis.occ_left[singlet_like[0]])


def calibrate_well_asymmetry(params: PhysicalParams, grid: GridSpec | None = None,
                             options: SolverOptions | None = None,
                             bracket: tuple = (-12.0, -1.0), xtol: float = 0.01) -> PhysicalParams:
    """
    Adjust depth_left so the S(2,0)/S(1,1) anticrossing sits at F_anticross,
    i.e. the lower singlet branch there is an equal (2,0)/(1,1) mixture.
    """
    def mismatch(offset):
        trial = replace(params, depth_left=params.depth_right + offset)
        value = _lower_singlet_occupation(trial, grid, options) - 0.75
        logger.info(f"Calibration: depth offset {offset:.3f} meV -> occupation mismatch {value:+.4f}")
        return value

    try:
        offset = brentq(mismatch, bracket[0], bracket[1], xtol=xtol)
    except ValueError as e:
        raise NumericalError(f"anticrossing not bracketed by depth offsets {bracket}") from e
    return replace(params, depth_left=params.depth_right + offset)


def calibrate_well_width(params: PhysicalParams, target: float = 6.0, grid: GridSpec | None = None,
                         options: SolverOptions | None = None, bracket: tuple = (40.0, 120.0),
                         xtol: float = 0.1) -> PhysicalParams:
    """Adjust width_left so the far-detuning S(2,0)-T(2,0) splitting equals target (meV)."""
    grid = grid or GridSpec()
    if min(bracket) / grid.dx < 8:
        raise ValueError(f"grid spacing {grid.dx:.2f} nm does not resolve widths down to {min(bracket)} nm")

    def mismatch(width):
        value = singlet_triplet_splitting(replace(params, width_left=width), grid, options) - target
        logger.info(f"Calibration: width_left {width:.2f} nm -> splitting mismatch {value:+.4f} meV")
        return value

    try:
        width = brentq(mismatch, bracket[0], bracket[1], xtol=xtol)
    except ValueError as e:
        raise NumericalError(f"splitting {target} meV not bracketed by widths {bracket} nm") from e
    return replace(params, width_left=width)


def zeeman_splitting(params: PhysicalParams, occ_left: float) -> float:
    """
    E[T+] - E[T-] (meV) without spin-orbit coupling: mu_B B <g(x1) + g(x2)>,
    with the g-factor averaged over the left/right occupation.
    """
    g_mean = params.g_left * occ_left + params.g_right * (1.0 - occ_left)
    return float(2.0 * g_mean * BOHR_MAGNETON * params.B_field)


def grid_refinement_shift(params: PhysicalParams, F: float, grid: GridSpec, n_states: int = 5,
                          options: SolverOptions | None = None) -> float:
    """Largest change (meV) of the lowest energies when the grid spacing is halved over the same box."""
    fine = replace(grid, n_points=2 * grid.n_points)
    coarse_energies = np.sort(solve_lowest(params, F, n_states, grid=grid, options=options).energies)
    fine_energies = np.sort(solve_lowest(params, F, n_states, grid=fine, options=options).energies)
    shift = float(np.max(np.abs(fine_energies - coarse_energies)))
    logger.info(f"Grid refinement {grid.n_points} -> {fine.n_points} points at F={F} V/cm moves energies by {shift:.2e} meV")
    return shift
