"""
gates.py – Logical gate targets for DotControl

Provides:
- Two-qubit gate matrices (first qubit is the control of CNOT)
- GateSpec: the five initial density matrices and their gate-mapped targets,
  embedded in the six-level model through the logical-state map
"""

import logging
from dataclasses import dataclass

import numpy as np

from config import GATE_ALIASES, LOGICAL_MAP, N_MODEL, TWO_ELECTRON_LABELS
from services.errors import UnknownGateError

logger = logging.getLogger(__name__)

_HADAMARD = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex) / np.sqrt(2.0)
_T = np.diag([1.0, np.exp(1j * np.pi / 4.0)])
_I2 = np.eye(2, dtype=complex)

GATE_MATRICES = {
    "CNOT": np.array([[1, 0, 0, 0],
                      [0, 1, 0, 0],
                      [0, 0, 0, 1],
                      [0, 0, 1, 0]], dtype=complex),
    "HxI": np.kron(_HADAMARD, _I2),
    "IxH": np.kron(_I2, _HADAMARD),
    "TxI": np.kron(_T, _I2),
    "IxT": np.kron(_I2, _T),
    "IxI": np.eye(4, dtype=complex),
}

LOGICAL_ORDER = ("00", "01", "10", "11")

_ALIASES = {key.casefold(): value for key, value in GATE_ALIASES.items()}


def canonical_gate_name(name: str) -> str:
    key = str(name).strip().replace(" ", "").casefold()
    if key not in _ALIASES:
        raise UnknownGateError(f"Unknown gate '{name}'; supported: {sorted(set(GATE_ALIASES.values()))}")
    return _ALIASES[key]


@dataclass
class GateSpec:
    name: str
    gate: np.ndarray              # 4x4 on |00>, |01>, |10>, |11>
    logical_indices: tuple        # model index of each logical state
    initial: np.ndarray           # (5, 6, 6)
    targets: np.ndarray           # (5, 6, 6)

    @property
    def n_targets(self) -> int:
        return len(self.initial)

    @property
    def embedding(self) -> np.ndarray:
        e = np.zeros((N_MODEL, 4), dtype=complex)
        for k, idx in enumerate(self.logical_indices):
            e[idx, k] = 1.0
        return e

    def embedded_gate(self) -> np.ndarray:
        """6x6 gate acting on the logical block, zero elsewhere."""
        e = self.embedding
        return e @ self.gate @ e.conj().T


def default_logical_indices() -> tuple:
    return tuple(TWO_ELECTRON_LABELS.index(LOGICAL_MAP[k]) for k in LOGICAL_ORDER)


def logical_indices_from_labels(labels) -> tuple:
    labels = list(labels)
    return tuple(labels.index(LOGICAL_MAP[k]) for k in LOGICAL_ORDER)


def build_gate_targets(name: str, labels=None, logical_indices=None) -> GateSpec:
    """
    Five (rho_j, O_j) pairs: the four logical projectors and the equal
    superposition (|00>+|01>+|10>+|11>)/2, mapped through the gate.
    """
    canonical = canonical_gate_name(name)
    if logical_indices is None:
        logical_indices = logical_indices_from_labels(labels) if labels else default_logical_indices()
    gate = GATE_MATRICES[canonical]

    e = np.zeros((N_MODEL, 4), dtype=complex)
    for k, idx in enumerate(logical_indices):
        e[idx, k] = 1.0
    vectors = list(np.eye(4, dtype=complex)) + [np.full(4, 0.5, dtype=complex)]
    initial = np.array([e @ np.outer(v, v.conj()) @ e.conj().T for v in vectors])
    mapped = [gate @ v for v in vectors]
    targets = np.array([e @ np.outer(v, v.conj()) @ e.conj().T for v in mapped])
    logger.debug(f"Built targets for gate {canonical} on model states {logical_indices}")
    return GateSpec(canonical, gate, tuple(int(i) for i in logical_indices), initial, targets)
