"""
qoct.py – Multi-target optimal control of the detuning field

Implements the two-point boundary-value control iteration:
observables are evolved backward under the current field, then the initial
states are evolved forward while the field is corrected step by step, which
makes the summed objective sum_j Tr(rho_j(t_f) O_j) non-decreasing.

Provides:
- ControlSystem (H0, coupling, optional transport dissipator) built from a bank
- ControlField and OptimizationResult containers
- backward_evolve, field_correction, forward_update_sweep, optimize
- Gate propagators and the unitary gate fidelity
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import FIELD_ENERGY, HBAR_MEV_NS
from services.basis_bank import BasisBank, model_hamiltonian, rereference, snap_to_bank
from services.errors import InvariantViolation, ObjectiveDecrease
from services.gates import GateSpec, build_gate_targets
from services.pulses import PulseProfile, sampled_pulse

logger = logging.getLogger(__name__)

DECREASE_ABORT = 1.0e-6
DECREASE_FLAG = 1.0e-9
IMAG_TOL = 1.0e-10


@dataclass
class ControlSystem:
    """H(F) = h0 - mu_eff (F - reference_field), plus an optional dissipator looked up by F."""

    h0: np.ndarray
    mu_eff: np.ndarray
    reference_field: float = 0.0
    bank: BasisBank | None = None
    gamma_L: float = 0.0
    gamma_U: float = 0.0

    def __post_init__(self):
        self.h0 = np.asarray(self.h0, dtype=complex)
        self.mu_eff = np.asarray(self.mu_eff, dtype=complex)
        self._dissipators = {}

    @classmethod
    def from_bank(cls, bank: BasisBank, gamma_L: float = 0.0, gamma_U: float = 0.0) -> "ControlSystem":
        return cls(model_hamiltonian(bank), FIELD_ENERGY * bank.dipole, bank.reference_F, bank, gamma_L, gamma_U)

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def dissipative(self) -> bool:
        return self.bank is not None and bool(self.gamma_L or self.gamma_U)

    def hamiltonian(self, F):
        """H for a scalar F, or a stack of H for an array of F."""
        F = np.asarray(F, dtype=float)
        return self.h0 - self.mu_eff * (F[..., None, None] - self.reference_field)

    def step_unitaries(self, F, dt: float) -> np.ndarray:
        energies, vecs = np.linalg.eigh(self.hamiltonian(F))
        phases = np.exp(-1j * energies * dt / HBAR_MEV_NS)
        return np.einsum("...ij,...j,...kj->...ik", vecs, phases, vecs.conj())

    def dissipator(self, F: float) -> np.ndarray:
        idx = snap_to_bank(self.bank, F, warn=False)
        if idx not in self._dissipators:
            self._dissipators[idx] = self.bank.dissipator(idx, self.gamma_L, self.gamma_U)
        return self._dissipators[idx]

    def step(self, rho: np.ndarray, F: float, dt: float, unitary: bool = False) -> np.ndarray:
        """Advance a stack of density matrices over one interval at constant F."""
        if unitary or not self.dissipative:
            u = self.step_unitaries(F, dt)
            return u @ rho @ u.conj().T
        h = self.hamiltonian(F)
        m = self.dissipator(F)
        shape = rho.shape

        def f(r):
            flat = r.reshape(-1, self.dim * self.dim)
            incoherent = (flat @ m.T).reshape(shape)
            return (-1j / HBAR_MEV_NS) * (h @ r - r @ h) + incoherent

        k1 = f(rho)
        k2 = f(rho + 0.5 * dt * k1)
        k3 = f(rho + 0.5 * dt * k2)
        k4 = f(rho + dt * k3)
        return rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class ControlField:
    values: np.ndarray        # (n + 1,) V/cm at t_k = k dt
    dt: float                 # ns
    reference_field: float = 0.0

    @property
    def t_f(self) -> float:
        return self.dt * (len(self.values) - 1)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.values))

    @property
    def n_steps(self) -> int:
        return len(self.values) - 1

    @classmethod
    def constant(cls, t_f: float, dt: float, value: float, reference_field: float,
                 pin_endpoints: bool = True) -> "ControlField":
        n = int(round(t_f / dt))
        if n < 1:
            raise ValueError(f"t_f={t_f} ns is shorter than one step of {dt} ns")
        values = np.full(n + 1, float(value))
        if pin_endpoints:
            values[0] = values[-1] = reference_field
        return cls(values, t_f / n, reference_field)

    def to_frame(self, params=None) -> pd.DataFrame:
        df = pd.DataFrame({"t": self.times, "F": self.values})
        if params is not None:
            df["eps"] = params.detuning(self.values)
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, reference_field: float = 0.0) -> "ControlField":
        t = df["t"].to_numpy(dtype=float)
        if len(t) < 2:
            raise ValueError("a control field needs at least two samples")
        return cls(df["F"].to_numpy(dtype=float), float(t[1] - t[0]), reference_field)

    def to_pulse(self, params) -> PulseProfile:
        """Zero-order hold pulse: the field propagated over [t_k, t_k+1) is values[k]."""
        return sampled_pulse(params.detuning(self.values), self.dt, hold=True)

    def shifted(self, offset: float) -> "ControlField":
        return ControlField(self.values + offset, self.dt, self.reference_field + offset)


@dataclass
class OptimizationResult:
    field: ControlField
    history: np.ndarray
    fidelities: np.ndarray
    final_states: np.ndarray
    iterations: int
    violations: list = field(default_factory=list)
    aborted: bool = False

    @property
    def objective(self) -> float:
        return float(self.history[-1])

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iteration": np.arange(len(self.history)), "objective": self.history})


def sine_squared_envelope(times: np.ndarray, t_f: float) -> np.ndarray:
    return np.sin(np.pi * times / t_f) ** 2


# ─────────────────────────────────────────────────────────────────────────
# Sweeps
# ─────────────────────────────────────────────────────────────────────────
def backward_evolve(system: ControlSystem, targets: np.ndarray, control: ControlField) -> np.ndarray:
    """
    O_j(t_k) for every grid time, from O_j(t_f) = targets[j] under the unitary
    dynamics of the given field. Returns (n + 1, n_targets, d, d).
    """
    targets = np.asarray(targets, dtype=complex)
    n = control.n_steps
    unitaries = system.step_unitaries(control.values[:-1], control.dt)
    observables = np.empty((n + 1,) + targets.shape, dtype=complex)
    observables[n] = targets
    for k in range(n - 1, -1, -1):
        u = unitaries[k]
        observables[k] = u.conj().T @ observables[k + 1] @ u
    return observables


def field_correction(observable: np.ndarray, rho: np.ndarray, mu_eff: np.ndarray) -> np.ndarray:
    """
    f = (i / hbar) Tr([O, mu] rho), the first-order gain of Tr(rho O) per unit
    field change and unit time. Works on single matrices or stacks.
    """
    commutator = observable @ mu_eff - mu_eff @ observable
    value = (1j / HBAR_MEV_NS) * np.trace(commutator @ rho, axis1=-2, axis2=-1)
    residue = np.max(np.abs(np.imag(value))) if np.size(value) else 0.0
    scale = 1.0 + np.max(np.abs(np.real(value))) if np.size(value) else 1.0
    if residue > IMAG_TOL * scale:
        logger.error(f"Field correction has an imaginary part {residue:.3e}")
        raise InvariantViolation("field correction is not real", {"imaginary_residue": float(residue)})
    return np.real(value)


def forward_update_sweep(system: ControlSystem, initial: np.ndarray, observables: np.ndarray,
                         control: ControlField, eta: float, envelope: np.ndarray,
                         unitary_forward: bool = False):
    """
    Evolve all initial states forward while building the new field: at each
    step the correction uses the states already advanced under the new field.
    Returns (final states, new ControlField).
    """
    rho = np.array(initial, dtype=complex)
    old = control.values
    new = np.array(old, dtype=float)
    for k in range(control.n_steps):
        if eta:
            new[k] = old[k] + eta * envelope[k] * np.sum(field_correction(observables[k], rho, system.mu_eff))
        rho = system.step(rho, new[k], control.dt, unitary=unitary_forward)
    if eta:
        n = control.n_steps
        new[n] = old[n] + eta * envelope[n] * np.sum(field_correction(observables[n], rho, system.mu_eff))
    return rho, ControlField(new, control.dt, control.reference_field)


def evolve_states(system: ControlSystem, initial: np.ndarray, control: ControlField,
                  unitary: bool = False) -> np.ndarray:
    """Final states under a fixed field."""
    rho = np.array(initial, dtype=complex)
    for k in range(control.n_steps):
        rho = system.step(rho, control.values[k], control.dt, unitary=unitary)
    return rho


def objective(final_states: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-target Tr(rho_j(t_f) O_j)."""
    return np.real(np.einsum("jab,jba->j", final_states, targets))


def optimize(system: ControlSystem, gate: GateSpec, t_f: float, dt: float = 1.0e-4, eta: float = 5.0e-4,
             iterations: int = 4000, trial_offset: float = 0.035, initial_field: ControlField | None = None,
             envelope=None, pin_endpoints: bool = True, unitary_forward: bool = False,
             early_stop: bool = False, early_stop_gain: float = 1.0e-8, early_stop_window: int = 50,
             strict: bool = False, log_every: int = 100) -> OptimizationResult:
    """
    Iterate backward/forward sweeps from the trial field. An objective drop
    beyond DECREASE_ABORT stops the run and returns the last good iterate
    (or raises ObjectiveDecrease when strict).
    """
    if t_f <= 0:
        raise ValueError(f"t_f must be positive, got {t_f}")
    control = initial_field or ControlField.constant(
        t_f, dt, system.reference_field + trial_offset, system.reference_field, pin_endpoints)
    envelope = sine_squared_envelope(control.times, control.t_f) if envelope is None else np.asarray(envelope)
    if pin_endpoints:
        envelope = np.array(envelope, dtype=float)
        envelope[0] = envelope[-1] = 0.0

    states = evolve_states(system, gate.initial, control, unitary=unitary_forward)
    scores = objective(states, gate.targets)
    history = [float(scores.sum())]
    violations = []
    aborted = False
    logger.info(f"Optimizing {gate.name}: t_f={control.t_f} ns, {control.n_steps} steps, initial objective {history[0]:.6f}")

    done = 0
    for iteration in range(1, iterations + 1):
        observables = backward_evolve(system, gate.targets, control)
        new_states, new_control = forward_update_sweep(
            system, gate.initial, observables, control, eta, envelope, unitary_forward)
        new_scores = objective(new_states, gate.targets)
        value = float(new_scores.sum())
        drop = history[-1] - value
        if drop > DECREASE_FLAG:
            violations.append((iteration, drop))
            logger.warning(f"Objective fell by {drop:.3e} at iteration {iteration}")
        if drop > DECREASE_ABORT:
            aborted = True
            logger.error(f"Objective decrease {drop:.3e} at iteration {iteration}; keeping iteration {iteration - 1}")
            if strict:
                last_good = OptimizationResult(control, np.array(history), scores, states, done, violations, True)
                raise ObjectiveDecrease(f"objective decreased by {drop:.3e} at iteration {iteration}", last_good)
            break
        control, states, scores = new_control, new_states, new_scores
        history.append(value)
        done = iteration
        if log_every and iteration % log_every == 0:
            logger.info(f"Iteration {iteration}: objective {value:.8f}")
        if early_stop and len(history) > early_stop_window:
            if history[-1] - history[-1 - early_stop_window] < early_stop_gain:
                logger.info(f"Early stop at iteration {iteration}")
                break

    logger.info(f"Finished {gate.name} after {done} iterations, objective {history[-1]:.6f} of {gate.n_targets}")
    return OptimizationResult(control, np.array(history), scores, states, done, violations, aborted)


def optimize_gate(bank: BasisBank, gate_name: str, t_f: float, eps0: float | None = None,
                  gamma_L: float = 0.0, gamma_U: float = 0.0, **kwargs) -> OptimizationResult:
    """Move the bank to eps0 (when given), build the gate targets and optimize."""
    if eps0 is not None:
        bank = rereference(bank, bank.F_grid[snap_to_bank(bank, eps=eps0)])
    system = ControlSystem.from_bank(bank, gamma_L, gamma_U)
    gate = build_gate_targets(gate_name, labels=bank.labels)
    return optimize(system, gate, t_f, **kwargs)


# ─────────────────────────────────────────────────────────────────────────
# Propagators
# ─────────────────────────────────────────────────────────────────────────
def propagator(system: ControlSystem, control: ControlField) -> np.ndarray:
    """Unitary of the whole field (coherent part only)."""
    u = np.eye(system.dim, dtype=complex)
    for step in system.step_unitaries(control.values[:-1], control.dt):
        u = step @ u
    return u


def gate_fidelity(system: ControlSystem, control: ControlField, gate: GateSpec) -> float:
    """|Tr(G^dagger U_logical)|^2 / 16 on the logical block."""
    e = gate.embedding
    logical = e.conj().T @ propagator(system, control) @ e
    return float(abs(np.trace(gate.gate.conj().T @ logical)) ** 2 / 16.0)
