"""
analysis.py – Gate fidelity, charge-noise averaging and field spectra

Provides:
- Uhlmann fidelity and the five-state mean fidelity of a gate
- Gate evaluation of a control field (with or without the transport cycle)
- Gaussian charge-noise averaging over shifted reference detunings
- Power spectrum of a control field and its dominant peaks
- Fidelity-vs-gamma and fidelity-vs-sigma tables
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import fft as sfft
from scipy import signal

from config import EMPTY_INDEX, BaseConfig
from services.basis_bank import BasisBank, rereference, snap_to_bank
from services.errors import BankError, BankRangeError
from services.gates import GateSpec, build_gate_targets
from services.qoct import ControlField, ControlSystem, evolve_states

logger = logging.getLogger(__name__)

CLIP_WARN = 1.0e-6


def _psd_sqrt(matrix: np.ndarray, name: str) -> np.ndarray:
    values, vecs = np.linalg.eigh(0.5 * (matrix + matrix.conj().T))
    clipped = -min(float(values.min()), 0.0)
    if clipped > CLIP_WARN:
        logger.warning(f"Clipped negative eigenvalue {-clipped:.3e} of {name} in fidelity")
    elif clipped:
        logger.debug(f"Clipped negative eigenvalue {-clipped:.3e} of {name}")
    return (vecs * np.sqrt(np.clip(values, 0.0, None))) @ vecs.conj().T


def fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2 for density matrices rho and sigma."""
    root = _psd_sqrt(np.asarray(rho, dtype=complex), "rho")
    inner = root @ np.asarray(sigma, dtype=complex) @ root
    values = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    value = float(np.sum(np.sqrt(np.clip(values, 0.0, None))) ** 2)
    return min(max(value, 0.0), 1.0)


def mean_fidelity(final_states: np.ndarray, gate: GateSpec) -> float:
    """Mean over the gate's five targets of fidelity(rho_j(t_f), O rho_j O^dagger)."""
    final_states = np.asarray(final_states)
    if len(final_states) != gate.n_targets:
        raise ValueError(f"expected {gate.n_targets} final states, got {len(final_states)}")
    return float(np.mean([fidelity(r, o) for r, o in zip(final_states, gate.targets)]))


@dataclass
class GateEvaluation:
    gate: GateSpec
    final_states: np.ndarray
    fidelities: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.fidelities))

    def to_frame(self) -> pd.DataFrame:
        names = ["|00>", "|01>", "|10>", "|11>", "|psi5>"]
        return pd.DataFrame({"target": names[:len(self.fidelities)], "fidelity": self.fidelities})


def evaluate_gate(bank: BasisBank, control: ControlField, gate_name: str, gamma_L: float = 0.0,
                  gamma_U: float = 0.0) -> GateEvaluation:
    """Run all five initial states through the field on the bank's reference and score them."""
    system = ControlSystem.from_bank(bank, gamma_L, gamma_U)
    gate = build_gate_targets(gate_name, labels=bank.labels)
    final = evolve_states(system, gate.initial, control)
    scores = np.array([fidelity(r, o) for r, o in zip(final, gate.targets)])
    logger.info(f"Gate {gate.name} at gamma=({gamma_L}, {gamma_U}) GHz: mean fidelity {scores.mean():.4f}")
    return GateEvaluation(gate, final, scores)


# ─────────────────────────────────────────────────────────────────────────
# Charge noise
# ─────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class NoiseSpec:
    sigma: float              # meV
    n_nodes: int = 21
    width: float = 4.0        # integration half-range in units of sigma

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.n_nodes < 1 or self.n_nodes % 2 == 0:
            raise ValueError(f"node count must be odd, got {self.n_nodes}")

    def nodes(self):
        """Detuning offsets (meV) and normalized Gaussian quadrature weights."""
        if self.sigma == 0:
            return np.zeros(1), np.ones(1)
        x, w = np.polynomial.legendre.leggauss(self.n_nodes)
        half = self.width * self.sigma
        offsets = half * x
        weights = w * np.exp(-0.5 * (offsets / self.sigma) ** 2)
        return offsets, weights / weights.sum()

    @property
    def reach(self) -> float:
        """Largest |offset| (meV) any node visits."""
        offsets, _ = self.nodes()
        return float(np.max(np.abs(offsets)))


@dataclass
class NoiseResult:
    spec: NoiseSpec
    averaged_states: np.ndarray
    fidelities: np.ndarray
    nodes: pd.DataFrame

    @property
    def mean_fidelity(self) -> float:
        return float(np.mean(self.fidelities))


def check_noise_coverage(bank: BasisBank, specs) -> None:
    """
    Raise BankRangeError naming the first sigma whose outermost node falls
    outside the bank, before any node is propagated.
    """
    eps0 = bank.reference_eps
    for spec in specs:
        reach = spec.reach
        for eps in (eps0 - reach, eps0 + reach):
            try:
                snap_to_bank(bank, eps=eps, warn=False)
            except BankRangeError as e:
                F = float(bank.params.field(eps))
                logger.error(f"Noise scan sigma={spec.sigma} meV needs F={F:.2f} V/cm: {e}")
                raise BankRangeError(
                    f"sigma={spec.sigma} meV reaches F={F:.2f} V/cm; the bank [{bank.F_grid[0]}, "
                    f"{bank.F_grid[-1]}] V/cm must be widened to cover eps0 +/- {reach:.4f} meV") from e


def node_permutation(node_labels, labels) -> np.ndarray:
    """Model indices of a node basis listed in the order of another label set (|(1,0)> last)."""
    node_labels = list(node_labels)
    try:
        order = [node_labels.index(label) for label in labels]
    except ValueError as e:
        raise BankError(f"node labels {tuple(node_labels)} do not match {tuple(labels)}") from e
    return np.array(order + [EMPTY_INDEX])


def noise_average(bank: BasisBank, control: ControlField, gate_name: str, spec: NoiseSpec,
                  gamma_L: float = 0.0, gamma_U: float = 0.0, max_workers: int | None = None) -> NoiseResult:
    """
    Average the final states over Gaussian-distributed reference detunings.
    Each node re-runs the same field on the bank moved to eps0 + offset, with
    the field shifted by the reference change. Node states are put back into
    the central label order before they are averaged.
    """
    check_noise_coverage(bank, [spec])
    offsets, weights = spec.nodes()
    gate = build_gate_targets(gate_name, labels=bank.labels)
    eps0 = bank.reference_eps

    def run(offset):
        idx = snap_to_bank(bank, eps=eps0 + offset)
        node_bank = rereference(bank, bank.F_grid[idx])
        shift = node_bank.reference_F - bank.reference_F
        node_gate = build_gate_targets(gate_name, labels=node_bank.labels)
        system = ControlSystem.from_bank(node_bank, gamma_L, gamma_U)
        final = evolve_states(system, node_gate.initial, control.shifted(shift))
        order = node_permutation(node_bank.labels, bank.labels)
        if np.any(order != np.arange(len(order))):
            logger.debug(f"Node F={node_bank.reference_F:.2f} V/cm relabelled by {order.tolist()}")
        return node_bank.reference_F, final[:, order[:, None], order[None, :]]

    workers = max(1, min(max_workers or BaseConfig.MAX_WORKERS, len(offsets)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, offsets))

    averaged = np.einsum("i,ijab->jab", weights, np.array([states for _, states in results]))
    scores = np.array([fidelity(r, o) for r, o in zip(averaged, gate.targets)])
    nodes = pd.DataFrame({
        "offset": offsets,
        "weight": weights,
        "F_reference": [F for F, _ in results],
        "mean_fidelity": [float(np.mean([fidelity(r, o) for r, o in zip(states, gate.targets)]))
                          for _, states in results],
    })
    logger.info(f"Noise average sigma={spec.sigma} meV over {len(offsets)} nodes: mean fidelity {scores.mean():.4f}")
    return NoiseResult(spec, averaged, scores, nodes)


# ─────────────────────────────────────────────────────────────────────────
# Spectra
# ─────────────────────────────────────────────────────────────────────────
@dataclass
class SpectrumResult:
    frequency: np.ndarray       # GHz
    power: np.ndarray           # normalized to max 1
    time_energy: float
    spectral_energy: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"f": self.frequency, "power": self.power})


def power_spectrum(values, dt: float, window: str | None = "hann") -> SpectrumResult:
    """One-sided |DFT|^2 of the mean-removed (optionally windowed) signal, bins in GHz for dt in ns."""
    x = np.asarray(values.values if isinstance(values, ControlField) else values, dtype=float)
    if x.size < 64:
        raise ValueError(f"power spectrum needs at least 64 samples, got {x.size}")
    x = x - x.mean()
    if window:
        x = x * signal.get_window(window, x.size, fftbins=False)
    n = x.size
    spectrum = sfft.rfft(x)
    power = np.abs(spectrum) ** 2
    power[1:(n + 1) // 2] *= 2.0
    time_energy = float(np.sum(x ** 2))
    spectral_energy = float(np.sum(power) / n)
    if abs(spectral_energy - time_energy) > 1e-6 * max(time_energy, 1e-300):
        logger.warning(f"Parseval mismatch in spectrum: {spectral_energy} vs {time_energy}")
    peak = power.max()
    return SpectrumResult(sfft.rfftfreq(n, d=dt), power / peak if peak > 0 else power, time_energy, spectral_energy)


def dominant_peaks(spectrum: SpectrumResult, n: int = 2, f_max: float | None = None) -> pd.DataFrame:
    """The n strongest local maxima of the spectrum below f_max."""
    power = spectrum.power
    if f_max is not None:
        power = np.where(spectrum.frequency <= f_max, power, 0.0)
    peaks, _ = signal.find_peaks(power)
    order = peaks[np.argsort(power[peaks])[::-1]][:n]
    return pd.DataFrame({"f": spectrum.frequency[order], "power": spectrum.power[order]})


# ─────────────────────────────────────────────────────────────────────────
# Tables
# ─────────────────────────────────────────────────────────────────────────
def fidelity_vs_gamma(bank: BasisBank, control: ControlField, gate_name: str, gammas) -> pd.DataFrame:
    """Mean fidelity with gamma_L = gamma_U = gamma for each gamma (GHz)."""
    rows = []
    for gamma in gammas:
        result = evaluate_gate(bank, control, gate_name, gamma, gamma)
        rows.append({"gamma": gamma, "mean_fidelity": result.mean,
                     **{f"F_{i + 1}": v for i, v in enumerate(result.fidelities)}})
    return pd.DataFrame(rows)


def fidelity_vs_sigma(bank: BasisBank, control: ControlField, gate_name: str, sigmas, gamma_L: float = 0.0,
                      gamma_U: float = 0.0, n_nodes: int = 21, width: float = 4.0) -> pd.DataFrame:
    specs = [NoiseSpec(sigma, n_nodes, width) for sigma in sigmas]
    check_noise_coverage(bank, specs)
    rows = []
    for sigma, spec in zip(sigmas, specs):
        result = noise_average(bank, control, gate_name, spec, gamma_L, gamma_U)
        rows.append({"sigma": sigma, "mean_fidelity": result.mean_fidelity,
                     **{f"F_{i + 1}": v for i, v in enumerate(result.fidelities)}})
    return pd.DataFrame(rows)
