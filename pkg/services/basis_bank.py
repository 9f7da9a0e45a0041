"""
basis_bank.py – Detuning-indexed eigenbasis bank for DotControl

Provides:
- The BasisBank container (energies, characters, rates, overlaps, dipole, dissipators)
- Bank generation over a field grid with parallel, cached eigensolves
- Gauge fixing, continuity checks and unitary projection of the overlaps
- Load/unload rates, the transport rate matrix and its change of basis
- Nearest-entry snapping, re-referencing and diagnostic tables
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from config import (
    BaseConfig,
    DEGENERACY_TOL,
    EMPTY_INDEX,
    N_MODEL,
    N_TWO_ELECTRON,
    PLANCK_MEV_NS,
)
from services.errors import BankError, BankRangeError
from services.hamiltonian import (
    EigenBasis,
    GridSpec,
    PhysicalParams,
    SolverOptions,
    label_states,
)
from services.state_cache import cached_solve

logger = logging.getLogger(__name__)

CONTINUITY_THRESHOLD = 0.5
CLAMP_TOLERANCE = 1.0      # V/cm beyond the bank edge that is clamped instead of rejected


@dataclass
class BasisBank:
    F_grid: np.ndarray                 # (n,) V/cm
    energies: np.ndarray               # (n, 5) meV
    singlet_char: np.ndarray           # (n, 5)
    occ_left: np.ndarray               # (n, 5)
    spin_x: np.ndarray                 # (n, 5)
    load_rate: np.ndarray              # (n, 5)
    unload_rate: np.ndarray            # (n, 5)
    overlaps: np.ndarray               # (n, 6, 6) G[n, alpha] = <psi_n(ref)|psi_alpha(F)>
    dipole: np.ndarray                 # (6, 6) e nm, reference basis
    dissipator_load: np.ndarray        # (n, 36, 36) per unit gamma_L
    dissipator_unload: np.ndarray      # (n, 36, 36) per unit gamma_U
    reference_index: int
    labels: tuple = ()
    params: PhysicalParams = field(default_factory=PhysicalParams)
    grid: GridSpec = field(default_factory=GridSpec)
    rate_normalization: str = "global"
    states: np.ndarray | None = None   # (n, 5, 2, 2, N, N) when kept
    metadata: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return len(self.F_grid)

    @property
    def dF(self) -> float:
        if self.n_points < 2:
            return 0.0
        return float(self.F_grid[1] - self.F_grid[0])

    @property
    def reference_F(self) -> float:
        return float(self.F_grid[self.reference_index])

    @property
    def reference_eps(self) -> float:
        return float(self.params.detuning(self.reference_F))

    @property
    def occ_right(self) -> np.ndarray:
        return 1.0 - self.occ_left

    def w(self, index: int) -> float:
        """Total load rate sum_alpha l_alpha at a grid point."""
        return float(np.sum(self.load_rate[index]))

    def dissipator(self, index: int, gamma_L: float, gamma_U: float) -> np.ndarray:
        return gamma_L * self.dissipator_load[index] + gamma_U * self.dissipator_unload[index]

    def state_index(self, label) -> int:
        """Model index of a state given by label or index."""
        if isinstance(label, (int, np.integer)):
            return int(label)
        try:
            return self.labels.index(label)
        except ValueError as e:
            raise BankError(f"no state labelled {label!r} in the reference basis {self.labels}") from e

    def index_of(self, F: float) -> int:
        """Grid index of an on-grid field value."""
        idx = int(np.argmin(np.abs(self.F_grid - F)))
        if abs(self.F_grid[idx] - F) > 1e-6 * max(self.dF, 1.0):
            raise BankRangeError(f"F={F} V/cm is not a bank grid point")
        return idx


# ─────────────────────────────────────────────────────────────────────────
# Grids and matrix elements
# ─────────────────────────────────────────────────────────────────────────
def field_grid(F_min: float, F_max: float, dF: float) -> np.ndarray:
    if dF <= 0 or F_max < F_min:
        raise ValueError(f"invalid field grid [{F_min}, {F_max}] step {dF}")
    n = int(round((F_max - F_min) / dF)) + 1
    return F_min + dF * np.arange(n)


def _state_block(states):
    if isinstance(states, EigenBasis):
        states = states.states
    return np.array([s.components if hasattr(s, "components") else s for s in states], dtype=complex)


def overlap_matrix(reference_states, states, cell: float) -> np.ndarray:
    """6x6 G[n, alpha] = <psi_n(ref)|psi_alpha>, identity on the |(1,0)> entry."""
    ref = _state_block(reference_states)
    cur = _state_block(states)
    g = np.zeros((N_MODEL, N_MODEL), dtype=complex)
    g[:N_TWO_ELECTRON, :N_TWO_ELECTRON] = np.einsum("iabxy,jabxy->ij", np.conj(ref), cur) * cell
    g[EMPTY_INDEX, EMPTY_INDEX] = 1.0
    return g


def project_unitary(g: np.ndarray, F: float | None = None) -> np.ndarray:
    """Nearest unitary to the two-electron block of G (polar decomposition)."""
    block = g[:N_TWO_ELECTRON, :N_TWO_ELECTRON]
    u, _ = linalg.polar(block)
    deviation = float(np.max(np.abs(block - u)))
    if deviation > 1e-2:
        logger.warning(f"Overlap block at F={F} is far from unitary (deviation {deviation:.2e})")
    else:
        logger.debug(f"Overlap block at F={F} unitary deviation {deviation:.2e}")
    out = np.zeros_like(g, dtype=complex)
    out[:N_TWO_ELECTRON, :N_TWO_ELECTRON] = u
    out[EMPTY_INDEX, EMPTY_INDEX] = 1.0
    return out


def dipole_matrix(reference_basis, grid: GridSpec | None = None) -> np.ndarray:
    """
    mu[i, j] = <psi_i|x1 + x2|psi_j> (e nm) on the reference basis, zero on |(1,0)>.
    The tilt enters the Hamiltonian as -FIELD_ENERGY * F * (x1 + x2), so H(F) = H(F0) - kappa mu (F - F0).
    """
    if isinstance(reference_basis, EigenBasis):
        grid = reference_basis.states[0].grid
    if grid is None:
        raise ValueError("a grid is needed for raw state arrays")
    c = _state_block(reference_basis)
    x = grid.x
    position = x[:, None] + x[None, :]
    mu = np.zeros((N_MODEL, N_MODEL), dtype=complex)
    mu[:N_TWO_ELECTRON, :N_TWO_ELECTRON] = np.einsum(
        "iabxy,xy,jabxy->ij", np.conj(c), position, c) * grid.cell
    return 0.5 * (mu + mu.conj().T)


def bohr_frequency(bank: BasisBank, a, b) -> float:
    """|E_a - E_b| / h at the reference point, in GHz."""
    e = bank.energies[bank.reference_index]
    return float(abs(e[bank.state_index(a)] - e[bank.state_index(b)]) / PLANCK_MEV_NS)


def model_hamiltonian(bank: BasisBank) -> np.ndarray:
    """
    diag(E_n(ref) - mean, 0): the field-free part of the six-level model.

    The two-electron energies are shifted by their mean so H stays small in
    meV; within the two-electron block the shift is a global phase and does
    not change populations, coherences or fidelities.
    """
    e = bank.energies[bank.reference_index]
    h = np.zeros((N_MODEL, N_MODEL), dtype=complex)
    h[np.arange(N_TWO_ELECTRON), np.arange(N_TWO_ELECTRON)] = e - e.mean()
    return h


# ─────────────────────────────────────────────────────────────────────────
# Rates and dissipators
# ─────────────────────────────────────────────────────────────────────────
def raw_rates(basis: EigenBasis):
    """Unnormalized (load, unload) = (occ_right, occ_left * singlet_char)."""
    return np.asarray(basis.occ_right, dtype=float), np.asarray(basis.occ_left * basis.singlet_char, dtype=float)


def normalize_rates(raw_load: np.ndarray, raw_unload: np.ndarray, mode: str = "global"):
    """
    Scale rate tables (n, 5) into [0, 1]. 'global' divides each family by its
    maximum over the whole bank, 'per-state' divides each state track by its own maximum.
    """
    raw_load = np.atleast_2d(raw_load)
    raw_unload = np.atleast_2d(raw_unload)
    if mode == "global":
        load_norm = np.max(raw_load)
        unload_norm = np.max(raw_unload)
    elif mode == "per-state":
        load_norm = np.max(raw_load, axis=0)
        unload_norm = np.max(raw_unload, axis=0)
    else:
        raise ValueError(f"Unknown rate normalization: {mode}")
    load = raw_load / np.where(load_norm > 0, load_norm, 1.0)
    unload = raw_unload / np.where(unload_norm > 0, unload_norm, 1.0)
    return np.clip(load, 0.0, 1.0), np.clip(unload, 0.0, 1.0)


def rates_from_states(basis: EigenBasis, mode: str = "global"):
    """(l_alpha, u_alpha) for a single basis, normalized over that basis alone."""
    load, unload = normalize_rates(*raw_rates(basis), mode=mode)
    return load[0], unload[0]


def transport_rates_matrix(load_rate, unload_rate, gamma_L: float, gamma_U: float) -> np.ndarray:
    """
    Gamma[a*6 + b, c*6 + d] of the load/unload cycle in the instantaneous basis,
    with index 5 the one-electron state |(1,0)>.
    """
    load = np.asarray(load_rate, dtype=float)
    unload = np.asarray(unload_rate, dtype=float)
    w = float(np.sum(load))
    e = EMPTY_INDEX
    gamma = np.zeros((N_MODEL * N_MODEL, N_MODEL * N_MODEL))

    def idx(a, b):
        return a * N_MODEL + b

    for a in range(N_TWO_ELECTRON):
        for b in range(N_TWO_ELECTRON):
            gamma[idx(a, b), idx(a, b)] = -0.5 * gamma_U * (unload[a] + unload[b])
        gamma[idx(a, e), idx(a, e)] = -0.5 * (gamma_L * w + gamma_U * unload[a])
        gamma[idx(e, a), idx(e, a)] = -0.5 * (gamma_L * w + gamma_U * unload[a])
        gamma[idx(a, a), idx(e, e)] = gamma_L * load[a]
        gamma[idx(e, e), idx(a, a)] = gamma_U * unload[a]
    gamma[idx(e, e), idx(e, e)] = -gamma_L * w
    return gamma


def assemble_dissipator(load_rate, unload_rate, overlap: np.ndarray, gamma_L: float, gamma_U: float) -> np.ndarray:
    """M = W Gamma W^dagger with W = G (x) conj(G): the rate matrix in the reference basis."""
    gamma = transport_rates_matrix(load_rate, unload_rate, gamma_L, gamma_U)
    w = np.kron(overlap, np.conj(overlap))
    return w @ gamma @ w.conj().T


# ─────────────────────────────────────────────────────────────────────────
# Gauge and continuity
# ─────────────────────────────────────────────────────────────────────────
def adjacent_overlaps(overlaps: np.ndarray, i: int, j: int) -> np.ndarray:
    """<psi(F_i)|psi(F_j)> on the two-electron block, through the reference basis."""
    block_i = overlaps[i, :N_TWO_ELECTRON, :N_TWO_ELECTRON]
    block_j = overlaps[j, :N_TWO_ELECTRON, :N_TWO_ELECTRON]
    return block_i.conj().T @ block_j


def gauge_fix(bank: BasisBank) -> BasisBank:
    """
    Fix each state's phase so <psi_a(F_i)|psi_a(F_i+1)> is real and positive,
    walking outward from the reference point. Dissipators are gauge invariant
    and are left as they are.
    """
    overlaps = np.array(bank.overlaps, dtype=complex)
    states = None if bank.states is None else np.array(bank.states, dtype=complex)
    r = bank.reference_index
    walk = [(i - 1, i) for i in range(r + 1, bank.n_points)] + [(i + 1, i) for i in range(r - 1, -1, -1)]
    for prev, cur in walk:
        d = np.diag(adjacent_overlaps(overlaps, prev, cur))
        magnitude = np.abs(d)
        phase = np.where(magnitude > 1e-12, np.conj(d) / np.where(magnitude > 0, magnitude, 1.0), 1.0)
        overlaps[cur, :, :N_TWO_ELECTRON] *= phase[None, :]
        if states is not None:
            states[cur] *= phase[:, None, None, None, None]
    return replace(bank, overlaps=overlaps, states=states)


def check_continuity(bank: BasisBank, threshold: float = CONTINUITY_THRESHOLD) -> pd.DataFrame:
    """Per adjacent pair and state, |<psi_a(F_i)|psi_a(F_i+1)>| and whether it breaks continuity."""
    rows = []
    for i in range(bank.n_points - 1):
        d = np.abs(np.diag(adjacent_overlaps(bank.overlaps, i, i + 1)))
        for a in range(N_TWO_ELECTRON):
            rows.append({
                "F": bank.F_grid[i],
                "F_next": bank.F_grid[i + 1],
                "state": a + 1,
                "overlap": d[a],
                "flagged": bool(d[a] < threshold),
            })
    df = pd.DataFrame(rows, columns=["F", "F_next", "state", "overlap", "flagged"])
    n_flagged = int(df["flagged"].sum()) if not df.empty else 0
    if n_flagged:
        logger.warning(f"Continuity check flagged {n_flagged} state steps below overlap {threshold}")
    return df


def _relabel_degenerate(F_grid, energies, tables, overlaps, reference_index, threshold=CONTINUITY_THRESHOLD):
    """
    Swap state columns at a grid point when continuity breaks between states
    that are degenerate there; otherwise energy order is kept.
    """
    r = reference_index
    walk = [(i - 1, i) for i in range(r + 1, len(F_grid))] + [(i + 1, i) for i in range(r - 1, -1, -1)]
    for prev, cur in walk:
        o = np.abs(adjacent_overlaps(overlaps, prev, cur))
        if np.all(np.diag(o) >= threshold):
            continue
        _, perm = linear_sum_assignment(-o)
        moved = [a for a in range(N_TWO_ELECTRON) if perm[a] != a]
        e = energies[cur]
        if moved and np.ptp(e[moved]) < DEGENERACY_TOL:
            logger.info(f"Relabelled degenerate states {[a + 1 for a in moved]} at F={F_grid[cur]:.3f} V/cm")
            energies[cur] = e[perm]
            for table in tables:
                table[cur] = table[cur][perm]
            overlaps[cur, :, :N_TWO_ELECTRON] = overlaps[cur][:, perm]
        else:
            logger.warning(f"State continuity broken at F={F_grid[cur]:.3f} V/cm; keeping energy order")


# ─────────────────────────────────────────────────────────────────────────
# Assembly and generation
# ─────────────────────────────────────────────────────────────────────────
def assemble_bank(F_grid, energies, singlet_char, occ_left, spin_x, overlaps, dipole, reference_index: int,
                  params: PhysicalParams | None = None, grid: GridSpec | None = None,
                  rate_normalization: str = "global", states=None, metadata: dict | None = None) -> BasisBank:
    """
    Build a BasisBank from per-point arrays: projects overlaps to unitaries,
    fixes the gauge, normalizes the rates and assembles unit-rate dissipators.
    """
    F_grid = np.asarray(F_grid, dtype=float)
    n = len(F_grid)
    if not 0 <= reference_index < n:
        raise BankRangeError(f"reference index {reference_index} outside a bank of {n} points")
    energies = np.array(energies, dtype=float).reshape(n, N_TWO_ELECTRON)
    singlet_char = np.array(singlet_char, dtype=float).reshape(n, N_TWO_ELECTRON)
    occ_left = np.array(occ_left, dtype=float).reshape(n, N_TWO_ELECTRON)
    spin_x = np.array(spin_x, dtype=float).reshape(n, N_TWO_ELECTRON)
    overlaps = np.array([project_unitary(g, F) for g, F in zip(np.asarray(overlaps, dtype=complex), F_grid)])
    overlaps[reference_index] = np.eye(N_MODEL)

    raw_load, raw_unload = 1.0 - occ_left, occ_left * singlet_char
    load, unload = normalize_rates(raw_load, raw_unload, mode=rate_normalization)
    dissipator_load = np.array([assemble_dissipator(load[i], unload[i], overlaps[i], 1.0, 0.0) for i in range(n)])
    dissipator_unload = np.array([assemble_dissipator(load[i], unload[i], overlaps[i], 0.0, 1.0) for i in range(n)])

    params = params or PhysicalParams()
    bank = BasisBank(
        F_grid=F_grid,
        energies=energies,
        singlet_char=singlet_char,
        occ_left=occ_left,
        spin_x=spin_x,
        load_rate=load,
        unload_rate=unload,
        overlaps=overlaps,
        dipole=np.asarray(dipole, dtype=complex),
        dissipator_load=dissipator_load,
        dissipator_unload=dissipator_unload,
        reference_index=int(reference_index),
        labels=label_states(singlet_char[reference_index], occ_left[reference_index], spin_x[reference_index]),
        params=params,
        grid=grid or GridSpec(),
        rate_normalization=rate_normalization,
        states=states,
        metadata=dict(metadata or {}),
    )
    return gauge_fix(bank)


def generate_bank(params: PhysicalParams, F_min: float = 214.0, F_max: float = 244.0, dF: float = 0.2,
                  reference_F: float = 226.0, grid: GridSpec | None = None, options: SolverOptions | None = None,
                  rate_normalization: str = "global", keep_states: bool = False,
                  max_workers: int | None = None, cache=None) -> BasisBank:
    """
    Solve every grid point (in parallel, through the state cache) and assemble
    the bank against the basis at reference_F.
    """
    grid = grid or GridSpec()
    options = options or SolverOptions()
    F_grid = field_grid(F_min, F_max, dF)
    matches = np.flatnonzero(np.abs(F_grid - reference_F) <= 1e-6 * max(dF, 1.0))
    if matches.size == 0:
        raise BankRangeError(f"reference field {reference_F} V/cm is not on the grid [{F_min}, {F_max}] step {dF}")
    r = int(matches[0])

    reference = cached_solve(params, F_grid[r], grid=grid, options=options, cache=cache)
    dipole = dipole_matrix(reference)

    def solve(F):
        basis = cached_solve(params, F, grid=grid, options=options, cache=cache)
        g = overlap_matrix(reference, basis, grid.cell)
        block = np.array([s.components for s in basis.states]) if keep_states else None
        logger.info(f"Bank point F={F:.2f} V/cm solved")
        return replace(basis, states=None), g, block

    workers = max(1, min(max_workers or BaseConfig.MAX_WORKERS, len(F_grid)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(solve, F_grid))

    bases = [b for b, _, _ in results]
    energies = np.array([b.energies for b in bases])
    singlet = np.array([b.singlet_char for b in bases])
    occ_left = np.array([b.occ_left for b in bases])
    spin = np.array([b.spin_x for b in bases])
    overlaps = np.array([g for _, g, _ in results])
    states = np.array([s for _, _, s in results]) if keep_states else None

    tables = [singlet, occ_left, spin] + ([states] if states is not None else [])
    _relabel_degenerate(F_grid, energies, tables, overlaps, r)

    bank = assemble_bank(F_grid, energies, singlet, occ_left, spin, overlaps, dipole, r,
                         params=params, grid=grid, rate_normalization=rate_normalization, states=states,
                         metadata={"max_residual": float(max(np.max(b.residuals) for b in bases))})
    logger.info(f"Generated bank of {bank.n_points} points, reference F={bank.reference_F} V/cm, labels {bank.labels}")
    return bank


# ─────────────────────────────────────────────────────────────────────────
# Lookup and re-referencing
# ─────────────────────────────────────────────────────────────────────────
def snap_to_bank(bank: BasisBank, F: float | None = None, eps: float | None = None, warn: bool = True) -> int:
    """
    Index of the grid point nearest to F (or to the field of detuning eps),
    rounding half up. Values up to CLAMP_TOLERANCE outside the bank are clamped.
    """
    if F is None:
        if eps is None:
            raise ValueError("snap_to_bank needs F or eps")
        F = float(bank.params.field(eps))
    F_min, F_max = bank.F_grid[0], bank.F_grid[-1]
    if F < F_min or F > F_max:
        edge = F_min if F < F_min else F_max
        if abs(F - edge) > CLAMP_TOLERANCE + 1e-9:
            raise BankRangeError(f"F={F:.4f} V/cm is outside the bank range [{F_min}, {F_max}]")
        if warn:
            logger.warning(f"F={F:.4f} V/cm clamped to bank edge {edge} V/cm")
        return 0 if F < F_min else bank.n_points - 1
    if bank.n_points == 1:
        return 0
    idx = int(np.floor((F - F_min) / bank.dF + 0.5 + 1e-9))
    return min(max(idx, 0), bank.n_points - 1)


def rereference(bank: BasisBank, reference_F: float) -> BasisBank:
    """
    Move the projection basis to another grid point. Uses stored states when
    present; otherwise goes through the five-state space of the overlaps.
    """
    r = bank.index_of(reference_F)
    if r == bank.reference_index:
        return bank
    if bank.states is not None:
        ref_states = bank.states[r]
        cell = bank.grid.cell
        overlaps = np.array([overlap_matrix(ref_states, s, cell) for s in bank.states])
        dipole = dipole_matrix(ref_states, bank.grid)
    else:
        g_r = bank.overlaps[r]
        overlaps = np.einsum("ji,njk->nik", np.conj(g_r), bank.overlaps)
        dipole = g_r.conj().T @ bank.dipole @ g_r
        dipole = 0.5 * (dipole + dipole.conj().T)
    moved = assemble_bank(bank.F_grid, bank.energies, bank.singlet_char, bank.occ_left, bank.spin_x,
                          overlaps, dipole, r, params=bank.params, grid=bank.grid,
                          rate_normalization=bank.rate_normalization, states=bank.states,
                          metadata=bank.metadata)
    logger.info(f"Re-referenced bank from F={bank.reference_F} to F={moved.reference_F} V/cm")
    return moved


# ─────────────────────────────────────────────────────────────────────────
# Tables
# ─────────────────────────────────────────────────────────────────────────
def energy_table(bank: BasisBank) -> pd.DataFrame:
    """Energies, singlet character and occupations per F (one row per grid point)."""
    data = {"F": bank.F_grid, "eps": bank.params.detuning(bank.F_grid)}
    for a in range(N_TWO_ELECTRON):
        data[f"E_{a + 1}"] = bank.energies[:, a]
    for a in range(N_TWO_ELECTRON):
        data[f"singlet_{a + 1}"] = bank.singlet_char[:, a]
    for a in range(N_TWO_ELECTRON):
        data[f"occ_left_{a + 1}"] = bank.occ_left[:, a]
        data[f"occ_right_{a + 1}"] = bank.occ_right[:, a]
    return pd.DataFrame(data)


def rate_table(bank: BasisBank) -> pd.DataFrame:
    data = {"F": bank.F_grid, "eps": bank.params.detuning(bank.F_grid)}
    for a in range(N_TWO_ELECTRON):
        data[f"l_{a + 1}"] = bank.load_rate[:, a]
    for a in range(N_TWO_ELECTRON):
        data[f"u_{a + 1}"] = bank.unload_rate[:, a]
    data["w"] = bank.load_rate.sum(axis=1)
    return pd.DataFrame(data)


def overlap_table(bank: BasisBank) -> pd.DataFrame:
    """G-matrix diagnostics: unitarity error and |G_aa| per grid point."""
    rows = []
    eye = np.eye(N_TWO_ELECTRON)
    for i, F in enumerate(bank.F_grid):
        block = bank.overlaps[i, :N_TWO_ELECTRON, :N_TWO_ELECTRON]
        row = {"F": F, "unitarity_error": float(np.max(np.abs(block.conj().T @ block - eye)))}
        for a in range(N_TWO_ELECTRON):
            row[f"G_{a + 1}{a + 1}"] = abs(block[a, a])
        rows.append(row)
    return pd.DataFrame(rows)
