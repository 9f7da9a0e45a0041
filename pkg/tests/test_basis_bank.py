import logging

import numpy as np
import pytest
from cachelib import FileSystemCache, NullCache, SimpleCache

import services.state_cache as state_cache
from config import EMPTY_INDEX, N_MODEL, N_TWO_ELECTRON, PLANCK_MEV_NS, S11, TPLUS
from services.bank_store import load_bank, save_bank
from services.basis_bank import (
    _relabel_degenerate,
    adjacent_overlaps,
    assemble_bank,
    assemble_dissipator,
    bohr_frequency,
    check_continuity,
    energy_table,
    field_grid,
    gauge_fix,
    generate_bank,
    model_hamiltonian,
    normalize_rates,
    project_unitary,
    rate_table,
    raw_rates,
    rereference,
    snap_to_bank,
    transport_rates_matrix,
)
from services.errors import BankChecksumError, BankFormatError, BankRangeError
from services.hamiltonian import EigenBasis, GridSpec, PhysicalParams, SolverOptions
from tests.conftest import OCC_LEFT, SINGLET, SPIN_X, make_synthetic_bank, synthetic_dipole


def _vec(rho):
    return np.asarray(rho, dtype=complex).ravel()


def _phased_bank(seed=3, swap_at=None):
    """Synthetic bank whose overlaps carry random phases (and optionally a column swap)."""
    rng = np.random.default_rng(seed)
    F_grid = field_grid(224.0, 228.0, 0.2)
    n = len(F_grid)
    overlaps = np.tile(np.eye(N_MODEL, dtype=complex), (n, 1, 1))
    overlaps[:, np.arange(N_TWO_ELECTRON), np.arange(N_TWO_ELECTRON)] = np.exp(
        1j * rng.uniform(0, 2 * np.pi, size=(n, N_TWO_ELECTRON)))
    if swap_at is not None:
        overlaps[swap_at][:, [3, 4]] = overlaps[swap_at][:, [4, 3]]
    energies = np.tile([-0.3, -0.1, 0.0, 0.02, -0.02], (n, 1))
    return assemble_bank(F_grid, energies, np.tile(SINGLET, (n, 1)), np.tile(OCC_LEFT, (n, 1)),
                         np.tile(SPIN_X, (n, 1)), overlaps, synthetic_dipole(), 10)


# ─────────────────────────────────────────────────────────────────────────
# Grid and snapping
# ─────────────────────────────────────────────────────────────────────────
def test_default_grid_has_151_points():
    grid = field_grid(214.0, 244.0, 0.2)
    assert len(grid) == 151
    assert grid[-1] == pytest.approx(244.0)


def test_snap_to_bank_rounds_to_nearest():
    bank = make_synthetic_bank(F_min=214.0, F_max=244.0)
    i229 = int(np.argmin(np.abs(bank.F_grid - 229.0)))
    assert snap_to_bank(bank, 229.0) == i229
    assert snap_to_bank(bank, 229.09) == i229
    assert snap_to_bank(bank, 229.1) == i229 + 1
    assert snap_to_bank(bank, eps=0.0) == i229


def test_snap_clamps_near_edges_and_rejects_far_values(caplog):
    bank = make_synthetic_bank(F_min=214.0, F_max=244.0)
    assert snap_to_bank(bank, 213.5) == 0
    assert "clamped" in caplog.text
    assert snap_to_bank(bank, 244.8) == bank.n_points - 1
    with pytest.raises(BankRangeError):
        snap_to_bank(bank, 212.5)
    with pytest.raises(ValueError):
        snap_to_bank(bank)


# ─────────────────────────────────────────────────────────────────────────
# Rates and dissipators
# ─────────────────────────────────────────────────────────────────────────
def _basis(singlet, occ_left):
    singlet = np.asarray(singlet, dtype=float)
    occ_left = np.asarray(occ_left, dtype=float)
    return EigenBasis(226.0, -0.03, np.zeros(len(singlet)), singlet, occ_left, 1.0 - occ_left,
                      np.zeros(len(singlet)))


def test_raw_rates_follow_position_and_singlet_character():
    load, unload = raw_rates(_basis([1.0, 0.0, 1.0], [0.98, 0.5, 0.5]))
    # S(2,0): mostly unloads
    assert unload[0] > 0.9 and load[0] < 0.1
    # triplet: never unloads
    assert unload[1] == 0.0
    # symmetric (1,1) singlet: both products are 0.5 before normalization
    assert load[2] == pytest.approx(0.5) and unload[2] == pytest.approx(0.5)


def test_normalize_rates_modes():
    raw_load = np.array([[0.1, 0.5], [0.2, 0.25]])
    raw_unload = np.array([[0.9, 0.0], [0.45, 0.0]])
    load, unload = normalize_rates(raw_load, raw_unload, "global")
    assert load.max() == pytest.approx(1.0) and unload.max() == pytest.approx(1.0)
    assert np.all(unload[:, 1] == 0.0)

    load, _ = normalize_rates(raw_load, raw_unload, "per-state")
    np.testing.assert_allclose(load.max(axis=0), [1.0, 1.0])
    with pytest.raises(ValueError):
        normalize_rates(raw_load, raw_unload, "bogus")


def test_synthetic_bank_rates(bank):
    np.testing.assert_allclose(bank.load_rate[0], [0.2, 1.0, 1.0, 1.0, 1.0])
    np.testing.assert_allclose(bank.unload_rate[0], [1.0, 0.5 / 0.9, 0.0, 0.0, 0.0])
    assert bank.w(0) == pytest.approx(4.2)


def test_zero_rates_give_zero_dissipator(bank):
    m = assemble_dissipator(bank.load_rate[0], bank.unload_rate[0], np.eye(N_MODEL), 0.0, 0.0)
    assert np.all(m == 0)


def test_rate_matrix_preserves_trace(bank):
    gamma = transport_rates_matrix(bank.load_rate[3], bank.unload_rate[3], 1.3, 0.7)
    diagonal = [a * N_MODEL + a for a in range(N_MODEL)]
    column_sums = gamma[diagonal, :].sum(axis=0)
    np.testing.assert_allclose(column_sums[diagonal], 0.0, atol=1e-14)


def test_loading_from_one_electron_state(bank):
    gamma_L = 2.0
    rho = np.zeros((N_MODEL, N_MODEL), dtype=complex)
    rho[EMPTY_INDEX, EMPTY_INDEX] = 1.0
    i = bank.reference_index
    drho = (bank.dissipator(i, gamma_L, 1.0) @ _vec(rho)).reshape(N_MODEL, N_MODEL)
    assert drho[EMPTY_INDEX, EMPTY_INDEX].real == pytest.approx(-gamma_L * bank.w(i))
    np.testing.assert_allclose(np.diag(drho)[:N_TWO_ELECTRON].real, gamma_L * bank.load_rate[i])


def test_dissipator_is_trace_preserving_in_rotated_basis():
    bank = _phased_bank()
    m = bank.dissipator(4, 1.0, 2.0)
    trace_row = np.eye(N_MODEL).ravel()
    np.testing.assert_allclose(trace_row @ m, 0.0, atol=1e-12)


def test_dissipator_keeps_hermitian_matrices_hermitian():
    rng = np.random.default_rng(9)
    g = project_unitary(np.eye(N_MODEL) + 0.3 * (rng.normal(size=(N_MODEL, N_MODEL))
                                                 + 1j * rng.normal(size=(N_MODEL, N_MODEL))))
    m = assemble_dissipator(rng.uniform(size=N_TWO_ELECTRON), rng.uniform(size=N_TWO_ELECTRON), g, 1.3, 0.7)
    a = rng.normal(size=(N_MODEL, N_MODEL)) + 1j * rng.normal(size=(N_MODEL, N_MODEL))
    out = (m @ _vec(a + a.conj().T)).reshape(N_MODEL, N_MODEL)
    assert np.max(np.abs(out)) > 0.0
    np.testing.assert_allclose(out, out.conj().T, atol=1e-12)
    assert abs(np.trace(out)) < 1e-12


# ─────────────────────────────────────────────────────────────────────────
# Matrix elements
# ─────────────────────────────────────────────────────────────────────────
def test_project_unitary_returns_nearest_unitary():
    rng = np.random.default_rng(0)
    g = np.eye(N_MODEL) + 1e-3 * rng.normal(size=(N_MODEL, N_MODEL))
    u = project_unitary(g)
    np.testing.assert_allclose(u.conj().T @ u, np.eye(N_MODEL), atol=1e-12)
    np.testing.assert_allclose(u, g, atol=1e-2)


def test_model_hamiltonian_is_mean_shifted_diagonal(bank):
    h = model_hamiltonian(bank)
    e = bank.energies[bank.reference_index]
    np.testing.assert_allclose(np.diag(h)[:N_TWO_ELECTRON].real, e - e.mean())
    assert h[EMPTY_INDEX, EMPTY_INDEX] == 0
    assert np.count_nonzero(h - np.diag(np.diag(h))) == 0


def test_bohr_frequency(bank):
    assert bank.labels[1] == S11 and bank.labels[3] == TPLUS
    assert bohr_frequency(bank, TPLUS, S11) == pytest.approx(0.12 / PLANCK_MEV_NS)


def test_dipole_is_hermitian_and_decoupled_from_one_electron_state(bank):
    np.testing.assert_allclose(bank.dipole, bank.dipole.conj().T, atol=1e-8)
    assert np.all(bank.dipole[EMPTY_INDEX] == 0) and np.all(bank.dipole[:, EMPTY_INDEX] == 0)


# ─────────────────────────────────────────────────────────────────────────
# Gauge and continuity
# ─────────────────────────────────────────────────────────────────────────
def test_gauge_fix_makes_adjacent_overlaps_real_positive():
    bank = _phased_bank()
    for i in range(bank.n_points - 1):
        d = np.diag(adjacent_overlaps(bank.overlaps, i, i + 1))
        assert np.max(np.abs(d.imag)) <= 1e-6
        assert np.all(d.real > 0)


def test_gauge_fix_is_idempotent():
    bank = _phased_bank()
    np.testing.assert_allclose(gauge_fix(bank).overlaps, bank.overlaps, atol=1e-12)


def test_gauge_fix_keeps_dissipators_unchanged():
    bank = _phased_bank()
    i = 2
    rebuilt = assemble_dissipator(bank.load_rate[i], bank.unload_rate[i], bank.overlaps[i], 1.0, 0.0)
    np.testing.assert_allclose(rebuilt, bank.dissipator_load[i], atol=1e-12)


def test_continuity_check_flags_swapped_states():
    table = check_continuity(_phased_bank(swap_at=15))
    flagged = table[table["flagged"]]
    assert set(flagged["state"]) == {4, 5}
    F_grid = field_grid(224.0, 228.0, 0.2)
    assert set(flagged["F"].round(6)) == {round(F_grid[14], 6), round(F_grid[15], 6)}

    clean = check_continuity(_phased_bank())
    assert not clean["flagged"].any()


def _exchanged_tables(upper_energies):
    F_grid = field_grid(226.0, 226.4, 0.2)
    energies = np.tile([-0.3, -0.1, 0.0, *upper_energies], (3, 1))
    spin = np.tile(SPIN_X, (3, 1))
    overlaps = np.tile(np.eye(N_MODEL, dtype=complex), (3, 1, 1))
    overlaps[1][:, [3, 4]] = overlaps[1][:, [4, 3]]
    spin[1, [3, 4]] = spin[1, [4, 3]]
    return F_grid, energies, spin, overlaps


def test_relabel_swaps_back_exchanged_degenerate_states(caplog):
    F_grid, energies, spin, overlaps = _exchanged_tables([0.01, 0.01])
    with caplog.at_level(logging.INFO, logger="services.basis_bank"):
        _relabel_degenerate(F_grid, energies, [spin], overlaps, 0)
    assert "Relabelled degenerate states [4, 5]" in caplog.text
    np.testing.assert_array_equal(spin[1], SPIN_X)
    np.testing.assert_allclose(overlaps[1], np.eye(N_MODEL))
    assert check_continuity(assemble_bank(F_grid, energies, np.tile(SINGLET, (3, 1)), np.tile(OCC_LEFT, (3, 1)),
                                          spin, overlaps, synthetic_dipole(), 0))["flagged"].sum() == 0


def test_relabel_keeps_energy_order_of_split_states(caplog):
    F_grid, energies, spin, overlaps = _exchanged_tables([0.02, -0.02])
    before = overlaps.copy()
    with caplog.at_level(logging.WARNING, logger="services.basis_bank"):
        _relabel_degenerate(F_grid, energies, [spin], overlaps, 0)
    assert "State continuity broken" in caplog.text
    np.testing.assert_array_equal(overlaps, before)
    assert spin[1, 3] == -1.0 and spin[1, 4] == 1.0


def test_rereference_moves_reference_point(bank):
    new_F = bank.F_grid[bank.reference_index + 5]
    moved = rereference(bank, new_F)
    assert moved.reference_F == pytest.approx(new_F)
    np.testing.assert_allclose(moved.overlaps[moved.reference_index], np.eye(N_MODEL))
    np.testing.assert_allclose(moved.dipole, bank.dipole, atol=1e-12)
    assert rereference(bank, bank.reference_F) is bank
    with pytest.raises(BankRangeError):
        rereference(bank, 226.05)


def test_tables_have_one_row_per_point(bank):
    assert len(energy_table(bank)) == bank.n_points
    rates = rate_table(bank)
    np.testing.assert_allclose(rates["w"], bank.load_rate.sum(axis=1))


# ─────────────────────────────────────────────────────────────────────────
# Persistence
# ─────────────────────────────────────────────────────────────────────────
def test_save_load_round_trip(tmp_path, bank):
    path = save_bank(bank, str(tmp_path / "bank.dqd"))
    loaded = load_bank(path)
    for name in ("F_grid", "energies", "load_rate", "unload_rate", "overlaps", "dipole",
                 "dissipator_load", "dissipator_unload"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(bank, name))
    assert loaded.labels == bank.labels
    assert loaded.reference_index == bank.reference_index
    assert loaded.params == bank.params


def test_corrupted_bank_fails_checksum(tmp_path, bank):
    path = save_bank(bank, str(tmp_path / "bank.dqd"))
    raw = bytearray(open(path, "rb").read())
    raw[-10] ^= 0xFF
    with open(path, "wb") as f:
        f.write(raw)
    with pytest.raises(BankChecksumError):
        load_bank(path)


def test_corrupted_header_fails_checksum(tmp_path, bank):
    path = save_bank(bank, str(tmp_path / "bank.dqd"))
    raw = open(path, "rb").read()
    original = f'"reference_index": {bank.reference_index}'.encode()
    tampered = f'"reference_index": {bank.reference_index + 1}'.encode()
    assert raw.count(original) == 1 and len(original) == len(tampered)
    with open(path, "wb") as f:
        f.write(raw.replace(original, tampered))
    with pytest.raises(BankChecksumError):
        load_bank(path)


def test_bank_without_header_checksum_is_rejected(tmp_path, bank, monkeypatch):
    monkeypatch.setattr("services.bank_store._header_digest", lambda header: None)
    path = save_bank(bank, str(tmp_path / "bank.dqd"))
    monkeypatch.undo()
    with pytest.raises(BankFormatError):
        load_bank(path)


def test_bank_format_errors(tmp_path, bank, monkeypatch):
    junk = tmp_path / "junk.dqd"
    junk.write_bytes(b"not a bank at all")
    with pytest.raises(BankFormatError):
        load_bank(str(junk))

    path = save_bank(bank, str(tmp_path / "bank.dqd"))
    monkeypatch.setattr("services.bank_store.BANK_FILE_VERSION", 99)
    with pytest.raises(BankFormatError):
        load_bank(path)


# ─────────────────────────────────────────────────────────────────────────
# State cache
# ─────────────────────────────────────────────────────────────────────────
def test_state_key_depends_on_field():
    params = PhysicalParams()
    a = state_cache.state_key(params, GridSpec(), SolverOptions(), 226.0, 5)
    b = state_cache.state_key(params, GridSpec(), SolverOptions(), 226.2, 5)
    assert a.startswith("eigenbasis:") and a != b
    assert a == state_cache.state_key(params, GridSpec(), SolverOptions(), 226.0, 5)


def test_make_cache_backends(tmp_path):
    assert isinstance(state_cache.make_cache("null"), NullCache)
    assert isinstance(state_cache.make_cache("filesystem", cache_dir=str(tmp_path)), FileSystemCache)
    with pytest.raises(ValueError):
        state_cache.make_cache("memcached")


def test_cached_solve_solves_once(monkeypatch):
    calls = []

    def fake_solve(params, F, n_states=5, grid=None, options=None):
        calls.append(F)
        return {"F": F}

    monkeypatch.setattr(state_cache, "solve_lowest", fake_solve)
    cache = SimpleCache()
    first = state_cache.cached_solve(PhysicalParams(), 226.0, cache=cache)
    second = state_cache.cached_solve(PhysicalParams(), 226.0, cache=cache)
    assert first == second == {"F": 226.0}
    assert calls == [226.0]


@pytest.mark.slow
def test_single_point_bank_has_identity_overlap(small_grid, quick_solver):
    bank = generate_bank(PhysicalParams(), 229.0, 229.0, 0.2, 229.0, grid=small_grid, options=quick_solver,
                         cache=NullCache())
    assert bank.n_points == 1
    np.testing.assert_allclose(bank.overlaps[0], np.eye(N_MODEL), atol=1e-12)
    assert np.all((bank.load_rate >= 0) & (bank.load_rate <= 1))
    assert np.all((bank.unload_rate >= 0) & (bank.unload_rate <= 1))
