import numpy as np
import pytest

import services.analysis as analysis
from config import HBAR_MEV_NS, N_MODEL, S11
from services.analysis import (
    NoiseSpec,
    check_noise_coverage,
    dominant_peaks,
    evaluate_gate,
    fidelity,
    fidelity_vs_gamma,
    fidelity_vs_sigma,
    mean_fidelity,
    noise_average,
    power_spectrum,
)
from services.basis_bank import assemble_bank, field_grid, rereference
from services.errors import BankRangeError
from services.gates import build_gate_targets
from services.qoct import ControlField
from services.run_config import RunConfig
from tests.conftest import (
    ENERGY_SLOPES,
    OCC_LEFT,
    REFERENCE_ENERGIES,
    SINGLET,
    SPIN_X,
    make_synthetic_bank,
    synthetic_dipole,
)


def _pure(v):
    v = np.asarray(v, dtype=complex)
    v = v / np.linalg.norm(v)
    return np.outer(v, v.conj())


def _reference_field(bank, t_f=0.05):
    return ControlField.constant(t_f, 1e-4, bank.reference_F, bank.reference_F)


def _swapped_bank(swap_from=227.0):
    """The synthetic bank with its T+ and T- columns traded for F >= swap_from."""
    F_grid = field_grid(220.0, 232.0, 0.2)
    n = len(F_grid)
    r = int(np.argmin(np.abs(F_grid - 226.0)))
    energies = REFERENCE_ENERGIES[None, :] + ENERGY_SLOPES[None, :] * (F_grid[:, None] - 226.0)
    spin = np.tile(SPIN_X, (n, 1))
    overlaps = np.tile(np.eye(N_MODEL, dtype=complex), (n, 1, 1))
    swapped = np.flatnonzero(F_grid >= swap_from - 1e-9)
    for table in (energies, spin):
        table[np.ix_(swapped, [3, 4])] = table[np.ix_(swapped, [4, 3])]
    overlaps[np.ix_(swapped, np.arange(N_MODEL), [3, 4])] = overlaps[np.ix_(swapped, np.arange(N_MODEL), [4, 3])]
    return assemble_bank(F_grid, energies, np.tile(SINGLET, (n, 1)), np.tile(OCC_LEFT, (n, 1)), spin,
                         overlaps, synthetic_dipole(), r)


# ─────────────────────────────────────────────────────────────────────────
# Fidelity
# ─────────────────────────────────────────────────────────────────────────
def test_fidelity_of_identical_and_orthogonal_states():
    a = _pure([1.0, 0.0, 0.0])
    b = _pure([0.0, 1.0, 0.0])
    assert fidelity(a, a) == pytest.approx(1.0)
    assert fidelity(a, b) == pytest.approx(0.0, abs=1e-12)


def test_fidelity_with_pure_state_is_overlap():
    psi = np.array([1.0, 1j, 0.5])
    rng = np.random.default_rng(3)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    sigma = m @ m.conj().T
    sigma /= np.trace(sigma)
    expected = np.real(psi.conj() @ sigma @ psi) / np.real(psi.conj() @ psi)
    assert fidelity(_pure(psi), sigma) == pytest.approx(expected, rel=1e-8)
    assert fidelity(sigma, _pure(psi)) == pytest.approx(expected, rel=1e-8)


def test_fidelity_between_mixed_states_is_bounded():
    mixed = np.eye(N_MODEL) / N_MODEL
    assert fidelity(mixed, mixed) == pytest.approx(1.0)
    assert 0.0 < fidelity(mixed, _pure(np.eye(N_MODEL)[0])) < 1.0


def test_mean_fidelity_requires_all_targets():
    gate = build_gate_targets("CNOT")
    assert mean_fidelity(gate.targets, gate) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mean_fidelity(gate.targets[:3], gate)


# ─────────────────────────────────────────────────────────────────────────
# Gate evaluation
# ─────────────────────────────────────────────────────────────────────────
def test_reference_field_acts_as_phase_gate(bank):
    control = _reference_field(bank)
    result = evaluate_gate(bank, control, "IxI")
    np.testing.assert_allclose(result.fidelities[:4], 1.0, atol=1e-9)

    energies = bank.energies[bank.reference_index][list(result.gate.logical_indices)]
    amplitude = np.mean(np.exp(-1j * energies * control.t_f / HBAR_MEV_NS))
    assert result.fidelities[4] == pytest.approx(abs(amplitude) ** 2, abs=1e-8)
    assert result.mean == pytest.approx(result.fidelities.mean())
    assert list(result.to_frame().columns) == ["target", "fidelity"]


def test_transport_cycle_drains_singlet_but_not_triplets(bank):
    control = _reference_field(bank, t_f=0.2)
    clean = evaluate_gate(bank, control, "IxI")
    noisy = evaluate_gate(bank, control, "IxI", 2.0, 2.0)
    li = clean.gate.logical_indices
    assert bank.labels[li[3]] == S11
    assert noisy.fidelities[3] < clean.fidelities[3] - 1e-3
    np.testing.assert_allclose(noisy.fidelities[:3], 1.0, atol=1e-9)


def test_fidelity_vs_gamma_table(bank):
    control = _reference_field(bank, t_f=0.02)
    table = fidelity_vs_gamma(bank, control, "IxI", [0.0, 2.0])
    assert list(table.columns) == ["gamma", "mean_fidelity", "F_1", "F_2", "F_3", "F_4", "F_5"]
    assert table["mean_fidelity"].iloc[1] < table["mean_fidelity"].iloc[0]


# ─────────────────────────────────────────────────────────────────────────
# Charge noise
# ─────────────────────────────────────────────────────────────────────────
def test_noise_spec_nodes():
    offsets, weights = NoiseSpec(0.0).nodes()
    assert offsets.tolist() == [0.0] and weights.tolist() == [1.0]

    offsets, weights = NoiseSpec(0.01, n_nodes=7).nodes()
    assert len(offsets) == 7
    assert weights.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(offsets, -offsets[::-1])
    assert abs(offsets).max() < 4.0 * 0.01
    assert weights[3] == weights.max()


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(-0.01)
    with pytest.raises(ValueError):
        NoiseSpec(0.01, n_nodes=4)


def test_zero_noise_matches_noiseless_evaluation(bank):
    control = _reference_field(bank, t_f=0.02)
    clean = evaluate_gate(bank, control, "HxI", 1.0, 1.0)
    result = noise_average(bank, control, "HxI", NoiseSpec(0.0), 1.0, 1.0)
    np.testing.assert_allclose(result.fidelities, clean.fidelities, atol=1e-12)
    assert len(result.nodes) == 1


def test_noise_average_returns_density_matrices(bank):
    control = _reference_field(bank, t_f=0.02)
    result = noise_average(bank, control, "HxI", NoiseSpec(0.005, n_nodes=5), 1.0, 1.0, max_workers=2)
    assert list(result.nodes.columns) == ["offset", "weight", "F_reference", "mean_fidelity"]
    assert result.nodes["weight"].sum() == pytest.approx(1.0)
    for rho in result.averaged_states:
        np.testing.assert_allclose(rho, rho.conj().T, atol=1e-12)
        assert np.trace(rho).real == pytest.approx(1.0, abs=1e-10)


def test_noise_average_follows_state_labels_across_the_window():
    straight = make_synthetic_bank()
    swapped = _swapped_bank()
    assert swapped.labels == straight.labels
    assert rereference(swapped, 229.6).labels != swapped.labels

    control = _reference_field(straight, t_f=0.02)
    spec = NoiseSpec(0.01, n_nodes=5)
    expected = noise_average(straight, control, "HxI", spec, 1.0, 1.0)
    result = noise_average(swapped, control, "HxI", spec, 1.0, 1.0)
    assert result.nodes["F_reference"].max() >= 227.0
    np.testing.assert_allclose(result.averaged_states, expected.averaged_states, atol=1e-10)
    np.testing.assert_allclose(result.fidelities, expected.fidelities, atol=1e-10)


def test_default_noise_scan_stays_inside_default_bank():
    cfg = RunConfig()
    bank = make_synthetic_bank(cfg.bank.F_min, cfg.bank.F_max, cfg.bank.dF, cfg.bank.reference_F)
    assert bank.reference_eps == pytest.approx(cfg.qoct.eps0)
    specs = [NoiseSpec(s, cfg.noise.n_nodes, cfg.noise.width) for s in cfg.noise.sigmas]
    check_noise_coverage(bank, specs)
    reach = max(spec.reach for spec in specs)
    assert bank.F_grid[0] <= bank.params.field(cfg.qoct.eps0 - reach)
    assert bank.F_grid[-1] >= bank.params.field(cfg.qoct.eps0 + reach)


def test_noise_scan_rejects_narrow_bank_before_running_nodes(monkeypatch):
    bank = make_synthetic_bank(214.0, 244.0, 0.2, 226.0)
    calls = []
    monkeypatch.setattr(analysis, "evolve_states", lambda *args, **kwargs: calls.append(args))
    control = _reference_field(bank, t_f=0.02)
    with pytest.raises(BankRangeError, match="sigma=0.04"):
        fidelity_vs_sigma(bank, control, "IxI", [0.0, 0.005, 0.01, 0.02, 0.04])
    assert calls == []
    check_noise_coverage(bank, [NoiseSpec(0.02)])


def test_reference_field_is_insensitive_to_noise(bank):
    """At the reference point the logical energies do not move with the field."""
    control = _reference_field(bank, t_f=0.02)
    table = fidelity_vs_sigma(bank, control, "IxI", [0.0, 0.01], n_nodes=3)
    assert table["mean_fidelity"].iloc[1] == pytest.approx(table["mean_fidelity"].iloc[0], abs=1e-10)


# ─────────────────────────────────────────────────────────────────────────
# Spectra
# ─────────────────────────────────────────────────────────────────────────
def test_spectrum_finds_tone():
    dt = 1e-3
    t = dt * np.arange(4000)
    spectrum = power_spectrum(226.0 + 0.5 * np.sin(2.0 * np.pi * 4.45 * t), dt)
    assert spectrum.frequency[np.argmax(spectrum.power)] == pytest.approx(4.45, abs=0.25)
    assert spectrum.power.max() == pytest.approx(1.0)
    assert spectrum.spectral_energy == pytest.approx(spectrum.time_energy, rel=1e-9)


def test_dominant_peaks_are_ordered_by_power():
    dt = 1e-3
    t = dt * np.arange(8000)
    values = np.sin(2.0 * np.pi * 2.0 * t) + 0.5 * np.sin(2.0 * np.pi * 6.0 * t)
    spectrum = power_spectrum(values, dt, window=None)
    peaks = dominant_peaks(spectrum, n=2)
    assert peaks["f"].tolist() == pytest.approx([2.0, 6.0])
    assert dominant_peaks(spectrum, n=1, f_max=4.0)["f"].tolist() == pytest.approx([2.0])


def test_spectrum_of_control_field():
    control = ControlField(226.0 + np.cos(2.0 * np.pi * 5.0 * 1e-3 * np.arange(2000)), 1e-3)
    spectrum = power_spectrum(control, control.dt)
    assert spectrum.frequency[np.argmax(spectrum.power)] == pytest.approx(5.0, abs=0.5)


def test_spectrum_needs_enough_samples():
    with pytest.raises(ValueError):
        power_spectrum(np.ones(32), 1e-3)
