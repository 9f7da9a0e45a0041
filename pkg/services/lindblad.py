"""
lindblad.py – Open-system dynamics of the six-level double-dot model

Provides:
- Time-dependent model Hamiltonian and master-equation right-hand side
- Fixed-step RK4 propagation with trace, Hermiticity and positivity monitoring
- Liouvillian exponentiation for constant detuning (reference solution)
- The current proxy, state projectors and parallel parameter scans
- Landau-Zener formula, a two-level sweep and a sweep of a bank state pair on the same integrator
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg

from config import BaseConfig, EMPTY, EMPTY_INDEX, FIELD_ENERGY, HBAR_MEV_NS, N_MODEL
from services.basis_bank import BasisBank, model_hamiltonian, snap_to_bank
from services.errors import InvariantViolation
from services.pulses import PulseProfile

logger = logging.getLogger(__name__)

DEFAULT_DT = 1.0e-4           # ns
MAX_SAMPLES = 10_000
TRACE_TOL = 1.0e-8
HERMITICITY_TOL = 1.0e-10
POSITIVITY_WARN = -1.0e-8
POSITIVITY_ABORT = -1.0e-6


# ─────────────────────────────────────────────────────────────────────────
# States
# ─────────────────────────────────────────────────────────────────────────
def projector(index: int, n: int = N_MODEL) -> np.ndarray:
    rho = np.zeros((n, n), dtype=complex)
    rho[index, index] = 1.0
    return rho


def pure_state(vector) -> np.ndarray:
    v = np.asarray(vector, dtype=complex)
    v = v / np.linalg.norm(v)
    return np.outer(v, v.conj())


def initial_state(bank: BasisBank, label) -> np.ndarray:
    """Projector on a reference state given by label, index or the one-electron state."""
    if label == EMPTY:
        return projector(EMPTY_INDEX)
    return projector(bank.state_index(label))


def model_labels(bank: BasisBank) -> list:
    return list(bank.labels) + [EMPTY]


# ─────────────────────────────────────────────────────────────────────────
# Master equation
# ─────────────────────────────────────────────────────────────────────────
class MasterEquation:
    """d rho / dt = -i/hbar [H(t), rho] + M(eps(t)) rho for one pulse and one pair of rates."""

    def __init__(self, bank: BasisBank, pulse: PulseProfile, gamma_L: float = 0.0, gamma_U: float = 0.0):
        self.bank = bank
        self.pulse = pulse
        self.gamma_L = gamma_L
        self.gamma_U = gamma_U
        self.h0 = model_hamiltonian(bank)
        self.mu_eff = FIELD_ENERGY * bank.dipole
        self.F_ref = bank.reference_F
        self.dissipative = bool(gamma_L or gamma_U)
        self.clamped = 0
        self._dissipators = {}

    def field(self, t):
        return float(self.pulse.field(t, self.bank.params))

    def hamiltonian(self, t) -> np.ndarray:
        return self.h0 - self.mu_eff * (self.field(t) - self.F_ref)

    def bank_index(self, t) -> int:
        F = self.field(t)
        F_min, F_max = self.bank.F_grid[0], self.bank.F_grid[-1]
        if F < F_min or F > F_max:
            if self.clamped == 0:
                logger.warning(f"Pulse leaves the bank range at t={t:.4f} ns (F={F:.3f} V/cm); clamping")
            self.clamped += 1
        return snap_to_bank(self.bank, F, warn=False)

    def dissipator(self, t) -> np.ndarray:
        idx = self.bank_index(t)
        if idx not in self._dissipators:
            self._dissipators[idx] = self.bank.dissipator(idx, self.gamma_L, self.gamma_U)
        return self._dissipators[idx]

    def __call__(self, t, rho):
        h = self.hamiltonian(t)
        out = (-1j / HBAR_MEV_NS) * (h @ rho - rho @ h)
        if self.dissipative:
            out = out + (self.dissipator(t) @ rho.ravel()).reshape(rho.shape)
        return out


def hamiltonian_at(t: float, pulse: PulseProfile, bank: BasisBank) -> np.ndarray:
    """Model Hamiltonian (meV) at time t: diag(E_n(ref)) - mu * kappa * (F(t) - F_ref)."""
    return MasterEquation(bank, pulse).hamiltonian(t)


def rhs(rho: np.ndarray, t: float, pulse: PulseProfile, bank: BasisBank,
        gamma_L: float = 0.0, gamma_U: float = 0.0) -> np.ndarray:
    return MasterEquation(bank, pulse, gamma_L, gamma_U)(t, np.asarray(rho, dtype=complex))


def liouvillian(h: np.ndarray, m: np.ndarray | None = None) -> np.ndarray:
    """36x36 generator acting on row-major vec(rho)."""
    n = h.shape[0]
    eye = np.eye(n)
    generator = (-1j / HBAR_MEV_NS) * (np.kron(h, eye) - np.kron(eye, h.T))
    if m is not None:
        generator = generator + m
    return generator


# ─────────────────────────────────────────────────────────────────────────
# Integrator
# ─────────────────────────────────────────────────────────────────────────
def rk4_step(f, t, y, dt):
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_grid(duration: float, dt: float):
    """Number of steps and the adjusted step that divides duration exactly."""
    if duration <= 0:
        return 0, 0.0
    n = max(1, math.ceil(duration / dt - 1e-9))
    return n, duration / n


def integrate_rk4(f, y0, duration: float, dt: float, t0: float = 0.0, max_samples: int = MAX_SAMPLES,
                  check=None):
    """
    Fixed-step RK4 from t0 to t0 + duration. Returns (times, samples) with at
    most max_samples entries, the last one always the final state. check(t, y)
    runs after every step.
    """
    n, h = step_grid(duration, dt)
    stride = max(1, math.ceil(n / max(max_samples - 2, 1)))
    y = np.array(y0, dtype=complex)
    times, samples = [t0], [y.copy()]
    for k in range(1, n + 1):
        y = rk4_step(f, t0 + (k - 1) * h, y, h)
        t = t0 + k * h
        if check is not None:
            check(t, y)
        if k % stride == 0 or k == n:
            if times[-1] != t:
                times.append(t)
                samples.append(y.copy())
    return np.array(times), np.array(samples)


def check_density_matrix(rho: np.ndarray, t: float = 0.0, positivity: bool = False) -> float:
    """
    Raise InvariantViolation when the trace or Hermiticity drifts beyond
    tolerance or, with positivity, when an eigenvalue drops below
    POSITIVITY_ABORT. Returns the smallest eigenvalue (inf when unchecked).
    """
    trace_error = abs(np.trace(rho) - 1.0)
    hermiticity_error = float(np.max(np.abs(rho - rho.conj().T)))
    if trace_error > TRACE_TOL or hermiticity_error > HERMITICITY_TOL:
        diagnostics = {"t": t, "trace_error": float(trace_error), "hermiticity_error": hermiticity_error}
        logger.error(f"Density matrix invariant violated at t={t:.6f} ns: {diagnostics}")
        raise InvariantViolation(f"density matrix invariants violated at t={t} ns", diagnostics)
    if not positivity:
        return float("inf")
    smallest = float(np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))))
    if smallest < POSITIVITY_ABORT:
        diagnostics = {"t": float(t), "min_eigenvalue": smallest}
        logger.error(f"Density matrix lost positivity at t={t:.6f} ns: {smallest:.3e}")
        raise InvariantViolation(f"negative eigenvalue {smallest:.3e} at t={t} ns", diagnostics)
    return smallest


class InvariantMonitor:
    """Per-step density-matrix check that remembers the smallest eigenvalue seen."""

    def __init__(self):
        self.min_eigenvalue = float("inf")

    def __call__(self, t, rho):
        self.min_eigenvalue = min(self.min_eigenvalue, check_density_matrix(rho, t, positivity=True))


# ─────────────────────────────────────────────────────────────────────────
# Trajectories
# ─────────────────────────────────────────────────────────────────────────
@dataclass
class Trajectory:
    t: np.ndarray                      # (m,) ns
    eps: np.ndarray                    # (m,) meV
    rho: np.ndarray                    # (m, 6, 6) sampled density matrices
    current: np.ndarray                # (m,)
    labels: list = field(default_factory=list)
    min_eigenvalue: float = 0.0

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.einsum("mii->mi", self.rho))

    @property
    def final_rho(self) -> np.ndarray:
        return self.rho[-1]

    def coherence(self, a: int, b: int) -> np.ndarray:
        return self.rho[:, a, b]

    def population(self, label) -> np.ndarray:
        index = label if isinstance(label, (int, np.integer)) else self.labels.index(label)
        return self.populations[:, index]

    def final_populations(self) -> dict:
        final = self.populations[-1]
        names = self.labels or [str(i + 1) for i in range(len(final))]
        return {name: float(p) for name, p in zip(names, final)}

    def to_frame(self, coherences=((0, 1),)) -> pd.DataFrame:
        data = {"t": self.t, "eps": self.eps}
        pops = self.populations
        for i in range(pops.shape[1]):
            data[f"rho_{i + 1}{i + 1}"] = pops[:, i]
        for a, b in coherences:
            data[f"abs_rho_{a + 1}{b + 1}"] = np.abs(self.coherence(a, b))
        data["I"] = self.current
        return pd.DataFrame(data)

    def summary(self) -> dict:
        return {
            "duration_ns": float(self.t[-1] - self.t[0]) if len(self.t) else 0.0,
            "n_samples": int(len(self.t)),
            "final_populations": self.final_populations(),
            "final_current": float(self.current[-1]) if len(self.current) else 0.0,
            "min_eigenvalue": self.min_eigenvalue,
        }


def current_proxy(rho: np.ndarray, bank: BasisBank, index: int, gamma_L: float) -> float:
    """I ~ gamma_L * w * rho_66, with w the total load rate of the bank entry."""
    return float(gamma_L * bank.w(index) * np.real(rho[EMPTY_INDEX, EMPTY_INDEX]))


def propagate(rho0: np.ndarray, pulse: PulseProfile, bank: BasisBank, gamma_L: float = 0.0,
              gamma_U: float = 0.0, dt: float = DEFAULT_DT, max_samples: int = MAX_SAMPLES) -> Trajectory:
    """
    Integrate the master equation over the pulse with fixed-step RK4.
    Trace, Hermiticity and positivity are checked after every step.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    monitor = InvariantMonitor()
    monitor(0.0, rho0)
    equation = MasterEquation(bank, pulse, gamma_L, gamma_U)
    times, rhos = integrate_rk4(equation, rho0, pulse.duration, dt, max_samples=max_samples, check=monitor)

    min_eig = monitor.min_eigenvalue
    if min_eig < POSITIVITY_WARN:
        logger.warning(f"Smallest density-matrix eigenvalue reached {min_eig:.3e}")
    if equation.clamped:
        logger.warning(f"Detuning was clamped to the bank edge in {equation.clamped} evaluations")

    eps = np.asarray(pulse.eps(times), dtype=float).reshape(-1)
    current = np.array([current_proxy(rho, bank, equation.bank_index(t), gamma_L) for t, rho in zip(times, rhos)])
    logger.debug(f"Propagated {pulse} with dt={dt} ns into {len(times)} samples")
    return Trajectory(t=times, eps=eps, rho=rhos, current=current, labels=model_labels(bank), min_eigenvalue=min_eig)


def propagate_exact(rho0: np.ndarray, eps: float, duration: float, bank: BasisBank,
                    gamma_L: float = 0.0, gamma_U: float = 0.0) -> np.ndarray:
    """rho(duration) at constant detuning eps by exponentiating the Liouvillian."""
    F = float(bank.params.field(eps))
    h = model_hamiltonian(bank) - FIELD_ENERGY * bank.dipole * (F - bank.reference_F)
    idx = snap_to_bank(bank, F)
    generator = liouvillian(h, bank.dissipator(idx, gamma_L, gamma_U))
    rho0 = np.asarray(rho0, dtype=complex)
    return (linalg.expm(generator * duration) @ rho0.ravel()).reshape(rho0.shape)


# ─────────────────────────────────────────────────────────────────────────
# Scans
# ─────────────────────────────────────────────────────────────────────────
def _final_observables(trajectory: Trajectory) -> dict:
    row = trajectory.final_populations()
    row["I"] = float(trajectory.current[-1])
    return row


def scan(values, make_pulse, bank: BasisBank, rho0: np.ndarray, gamma_L: float = 0.0, gamma_U: float = 0.0,
         dt: float = DEFAULT_DT, observable=None, parameter: str = "value", max_workers: int | None = None,
         make_bank=None) -> pd.DataFrame:
    """
    Propagate one pulse per parameter value concurrently and tabulate observable(trajectory).
    make_bank(value), when given, supplies a per-value bank (e.g. a moved reference).
    Failed runs are recorded in the 'error' column and the scan carries on.
    """
    values = list(values)
    observable = observable or _final_observables
    if not values:
        return pd.DataFrame(columns=[parameter, "error"])

    def run(value):
        try:
            run_bank = make_bank(value) if make_bank is not None else bank
            trajectory = propagate(rho0, make_pulse(value), run_bank, gamma_L, gamma_U, dt)
            row = {parameter: value, **observable(trajectory), "error": ""}
        except Exception as e:
            logger.warning(f"Scan run at {parameter}={value} failed: {e}")
            row = {parameter: value, "error": str(e)}
        return row

    workers = max(1, min(max_workers or BaseConfig.MAX_WORKERS, len(values)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(run, values))
    return pd.DataFrame(rows)


# ─────────────────────────────────────────────────────────────────────────
# Landau-Zener
# ─────────────────────────────────────────────────────────────────────────
def landau_zener_probability(delta: float, v: float) -> float:
    """Diabatic survival exp(-2 pi delta^2 / (hbar v)); delta in meV, v in meV/ns."""
    return float(np.exp(-2.0 * np.pi * delta ** 2 / (HBAR_MEV_NS * v)))


def sweep_two_level(delta: float, v: float, span: float = 20.0, dt: float | None = None) -> float:
    """
    Diabatic survival after sweeping H = [[-v t/2, delta], [delta, v t/2]]
    from energy difference -span*delta to +span*delta.
    """
    t_half = span * delta / v
    omega = math.hypot(0.5 * span * delta, delta) / HBAR_MEV_NS
    dt = dt or 0.02 / omega

    def f(t, rho):
        h = np.array([[-0.5 * v * t, delta], [delta, 0.5 * v * t]], dtype=complex)
        return (-1j / HBAR_MEV_NS) * (h @ rho - rho @ h)

    _, rhos = integrate_rk4(f, projector(0, 2), 2.0 * t_half, dt, t0=-t_half, max_samples=2)
    return float(np.real(rhos[-1][0, 0]))


def sweep_bank_pair(bank: BasisBank, start, other, F_start: float, F_stop: float, duration: float,
                    dt: float | None = None) -> float:
    """
    Diabatic survival of `start` after a linear field sweep F_start -> F_stop
    of the bank model restricted to the states {start, other}.
    """
    idx = [bank.state_index(start), bank.state_index(other)]
    h0 = model_hamiltonian(bank)[np.ix_(idx, idx)]
    mu = FIELD_ENERGY * bank.dipole[np.ix_(idx, idx)]
    rate = (F_stop - F_start) / duration

    def hamiltonian(F):
        return h0 - mu * (F - bank.reference_F)

    if dt is None:
        spread = max(np.ptp(np.linalg.eigvalsh(hamiltonian(F))) for F in (F_start, F_stop))
        dt = 0.04 * HBAR_MEV_NS / max(spread, 1e-12)

    def f(t, rho):
        h = hamiltonian(F_start + rate * t)
        return (-1j / HBAR_MEV_NS) * (h @ rho - rho @ h)

    _, rhos = integrate_rk4(f, projector(0, 2), duration, dt, max_samples=2)
    survival = float(np.real(rhos[-1][0, 0]))
    logger.debug(f"Sweep {start} -> {other} over F=[{F_start:.3f}, {F_stop:.3f}] V/cm in {duration} ns: "
                 f"survival {survival:.4f}")
    return survival
