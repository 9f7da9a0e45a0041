"""
main.py - Command definitions for DotControl.

Handles the batch commands: bank generation and calibration, pulse
simulation and scans, gate optimization, evaluation, noise averaging and
field spectra. Every command reads the RunConfig from the group context and
writes CSV tables with provenance headers plus JSON summaries.
"""

import logging
import os
import time
from dataclasses import replace

import click
import numpy as np

from config import S11, TPLUS
from helpers import file_digest, log_timing, read_csv, write_csv, write_json
from services.analysis import (
    NoiseSpec,
    check_noise_coverage,
    dominant_peaks,
    evaluate_gate,
    fidelity_vs_sigma,
    power_spectrum,
)
from services.bank_store import load_bank, save_bank
from services.basis_bank import (
    bohr_frequency,
    check_continuity,
    energy_table,
    generate_bank,
    overlap_table,
    rate_table,
    rereference,
    snap_to_bank,
)
from services.errors import ConfigError
from services.gates import build_gate_targets
from services.hamiltonian import calibrate_well_asymmetry, calibrate_well_width, singlet_triplet_splitting
from services.lindblad import initial_state, propagate, scan
from services.pulses import (
    constant_protocol,
    pulse_from_json,
    pulse_to_json,
    sinusoidal_protocol,
    stepped_protocol,
)
from services.qoct import ControlField, ControlSystem, gate_fidelity, optimize_gate

logger = logging.getLogger(__name__)

SCAN_PARAMETERS = ("eps_ac", "eps_c", "eps0", "frequency")


def timed_step(label, func, *args, **kwargs):
    """Times and logs the execution of a function call with the given label."""
    start = time.time()
    result = func(*args, **kwargs)
    elapsed = time.time() - start
    logger.info(f"[PROFILE] {label} took {elapsed:.3f} seconds.")
    return result


# ─────────────────────────────────────────────────────────────────────────
# Shared plumbing
# ─────────────────────────────────────────────────────────────────────────
def _out(cfg, name):
    return os.path.join(cfg.output.directory, name)


def _provenance(ctx, command, bank_path=None):
    cfg = ctx.obj["config"]
    return {
        "command": command,
        "config_sha256": cfg.digest(),
        "bank_sha256": file_digest(bank_path) if bank_path else "",
    }


def _load_bank(cfg, bank_path=None):
    path = bank_path or cfg.bank.path
    return path, load_bank(path)


def bank_at(bank, eps0):
    """The bank moved to the grid point nearest to eps0."""
    return rereference(bank, bank.F_grid[snap_to_bank(bank, eps=eps0)])


def build_pulse(settings, bank):
    """PulseProfile for the [pulse] settings against a bank referenced at settings.eps0."""
    protocol = settings.protocol
    if protocol == "constant":
        return constant_protocol(settings.eps0, settings.duration)
    if protocol == "stepped":
        return stepped_protocol(settings.eps0, settings.eps_peak, settings.t_fwd, settings.t_back)
    if protocol == "sinusoidal":
        f = settings.frequency or bohr_frequency(bank, TPLUS, S11)
        return sinusoidal_protocol(settings.eps0, settings.eps_c, settings.eps_ac, f, settings.n_cycles,
                                   ramp_time=settings.ramp_time)
    if protocol == "file":
        if not settings.file:
            raise ConfigError("pulse.protocol = file needs pulse.file")
        return pulse_from_json(settings.file)
    raise ConfigError(f"unknown pulse protocol '{protocol}'")


def _load_field(path, bank):
    if not os.path.exists(path):
        raise ConfigError(f"field file {path} does not exist")
    control = ControlField.from_frame(read_csv(path), bank.reference_F)
    low, high = control.values.min(), control.values.max()
    if low < bank.F_grid[0] - 1.0 or high > bank.F_grid[-1] + 1.0:
        raise ConfigError(
            f"field range [{low:.3f}, {high:.3f}] V/cm does not fit the bank [{bank.F_grid[0]}, {bank.F_grid[-1]}]")
    return control


# ─────────────────────────────────────────────────────────────────────────
# Commands
# ─────────────────────────────────────────────────────────────────────────
@click.command("bank")
@click.option("--output", "bank_path", default=None, help="Bank file to write (default: bank.path).")
@click.option("--no-states", is_flag=True, help="Store matrices only, without eigenstate grids.")
@click.pass_context
def cmd_bank(ctx, bank_path, no_states):
    """Solve the detuning grid and write the basis bank plus diagnostics."""
    cfg = ctx.obj["config"]
    path = bank_path or cfg.bank.path
    with log_timing("generate_bank"):
        bank = generate_bank(cfg.physics, cfg.bank.F_min, cfg.bank.F_max, cfg.bank.dF, cfg.bank.reference_F,
                             grid=cfg.grid, options=cfg.solver, rate_normalization=cfg.bank.rate_normalization,
                             keep_states=cfg.bank.keep_states)
    save_bank(bank, path, include_states=not no_states)
    meta = _provenance(ctx, "bank", path)
    write_csv(energy_table(bank), _out(cfg, "energies.csv"), meta)
    write_csv(rate_table(bank), _out(cfg, "rates.csv"), meta)
    write_csv(overlap_table(bank), _out(cfg, "overlaps.csv"), meta)
    write_csv(check_continuity(bank), _out(cfg, "continuity.csv"), meta)
    write_json({**meta, "n_points": bank.n_points, "reference_F": bank.reference_F,
                "labels": list(bank.labels)}, _out(cfg, "bank_summary.json"))
    click.echo(f"Bank with {bank.n_points} points written to {path}")


@click.command("calibrate")
@click.option("--splitting-only", is_flag=True, help="Only report the S(2,0)-T(2,0) splitting.")
@click.option("--target-splitting", type=float, default=None,
              help="Also fit the left-well width to this S(2,0)-T(2,0) splitting (meV), e.g. 6.0.")
@click.pass_context
def cmd_calibrate(ctx, splitting_only, target_splitting):
    """Fit the well geometry to the anticrossing field (and splitting) and report the singlet-triplet splitting."""
    cfg = ctx.obj["config"]
    params = cfg.physics
    if not splitting_only:
        if target_splitting is not None:
            params = timed_step("calibrate_well_width", calibrate_well_width, params, target_splitting,
                                cfg.grid, cfg.solver)
        params = timed_step("calibrate_well_asymmetry", calibrate_well_asymmetry, params, cfg.grid, cfg.solver)
    splitting = timed_step("singlet_triplet_splitting", singlet_triplet_splitting, params, cfg.grid, cfg.solver)
    summary = {**_provenance(ctx, "calibrate"), "depth_left": params.depth_left,
               "depth_right": params.depth_right, "width_left": params.width_left,
               "singlet_triplet_splitting_meV": splitting}
    write_json(summary, _out(cfg, "calibration.json"))
    click.echo(f"depth_left = {params.depth_left!r}\nwidth_left = {params.width_left!r}\n"
               f"S(2,0)-T(2,0) splitting = {splitting:.4f} meV")


@click.command("simulate")
@click.option("--bank", "bank_path", default=None, help="Bank file (default: bank.path).")
@click.pass_context
def cmd_simulate(ctx, bank_path):
    """Propagate the density matrix under the configured pulse."""
    cfg = ctx.obj["config"]
    path, bank = _load_bank(cfg, bank_path)
    bank = bank_at(bank, cfg.pulse.eps0)
    pulse = build_pulse(cfg.pulse, bank)
    rho0 = initial_state(bank, cfg.dynamics.initial_state)
    with log_timing("propagate"):
        trajectory = propagate(rho0, pulse, bank, cfg.dynamics.gamma_L, cfg.dynamics.gamma_U,
                               cfg.dynamics.dt, cfg.dynamics.max_samples)
    meta = _provenance(ctx, "simulate", path)
    write_csv(trajectory.to_frame(), _out(cfg, "trajectory.csv"), meta)
    write_json({**meta, "pulse": repr(pulse), "initial_state": cfg.dynamics.initial_state,
                **trajectory.summary()}, _out(cfg, "trajectory_summary.json"))
    finals = ", ".join(f"{k}: {v:.3f}" for k, v in trajectory.final_populations().items())
    click.echo(f"Final populations: {finals}")


@click.command("scan")
@click.option("--bank", "bank_path", default=None, help="Bank file (default: bank.path).")
@click.pass_context
def cmd_scan(ctx, bank_path):
    """Scan one pulse parameter and tabulate the final occupations and current."""
    cfg = ctx.obj["config"]
    settings = cfg.scan
    if settings.parameter not in SCAN_PARAMETERS:
        raise ConfigError(f"scan.parameter must be one of {SCAN_PARAMETERS}")
    path, bank = _load_bank(cfg, bank_path)
    base = bank_at(bank, cfg.pulse.eps0)
    values = np.linspace(settings.start, settings.stop, settings.num) if settings.num > 0 else []

    scale = 1.0
    if settings.parameter == "frequency" and settings.relative_frequency:
        scale = cfg.pulse.frequency or bohr_frequency(base, TPLUS, S11)

    def make_pulse(value):
        if settings.parameter == "eps0":
            return build_pulse(replace(cfg.pulse, eps0=value), bank_at(bank, value))
        if settings.parameter == "frequency":
            return build_pulse(replace(cfg.pulse, frequency=value * scale), base)
        return build_pulse(replace(cfg.pulse, **{settings.parameter: value}), base)

    make_bank = (lambda value: bank_at(bank, value)) if settings.parameter == "eps0" else None
    rho0 = initial_state(base, cfg.dynamics.initial_state)
    with log_timing(f"scan over {settings.parameter}"):
        table = scan(values, make_pulse, base, rho0, cfg.dynamics.gamma_L, cfg.dynamics.gamma_U,
                     cfg.dynamics.dt, parameter=settings.parameter, make_bank=make_bank)
    write_csv(table, _out(cfg, f"scan_{settings.parameter}.csv"), _provenance(ctx, "scan", path))
    click.echo(f"Scanned {len(table)} values of {settings.parameter}")


@click.command("optimize")
@click.option("--bank", "bank_path", default=None, help="Bank file (default: bank.path).")
@click.pass_context
def cmd_optimize(ctx, bank_path):
    """Optimize a detuning field for the configured gate."""
    cfg = ctx.obj["config"]
    q = cfg.qoct
    path, bank = _load_bank(cfg, bank_path)
    bank = bank_at(bank, q.eps0)
    build_gate_targets(q.gate)
    with log_timing(f"optimize {q.gate}"):
        result = optimize_gate(bank, q.gate, q.t_f, gamma_L=q.gamma_L, gamma_U=q.gamma_U, dt=q.dt, eta=q.eta,
                               iterations=q.iterations, trial_offset=q.trial_offset,
                               pin_endpoints=q.pin_endpoints, unitary_forward=q.unitary_forward,
                               early_stop=q.early_stop, log_every=q.log_every)
    meta = _provenance(ctx, "optimize", path)
    write_csv(result.field.to_frame(bank.params), cfg.output.field_file, meta)
    pulse_to_json(result.field.to_pulse(bank.params), result.field.dt,
                  os.path.splitext(cfg.output.field_file)[0] + ".json", extra=meta)
    write_csv(result.history_frame(), _out(cfg, "history.csv"), meta)
    write_json({**meta, "gate": q.gate, "iterations": result.iterations, "objective": result.objective,
                "target_scores": result.fidelities, "aborted": result.aborted,
                "monotonicity_violations": len(result.violations)}, _out(cfg, "optimize_summary.json"))
    if result.aborted:
        logger.warning("Optimization stopped on an objective decrease; the last good field was written")
    click.echo(f"{q.gate}: objective {result.objective:.6f} after {result.iterations} iterations")


@click.command("evaluate")
@click.option("--bank", "bank_path", default=None, help="Bank file (default: bank.path).")
@click.option("--field", "field_path", default=None, help="Field CSV (default: output.field_file).")
@click.pass_context
def cmd_evaluate(ctx, bank_path, field_path):
    """Run all five initial states through a field and report per-target and mean fidelity."""
    cfg = ctx.obj["config"]
    q = cfg.qoct
    path, bank = _load_bank(cfg, bank_path)
    bank = bank_at(bank, q.eps0)
    control = _load_field(field_path or cfg.output.field_file, bank)
    noisy = evaluate_gate(bank, control, q.gate, q.gamma_L, q.gamma_U)
    clean = evaluate_gate(bank, control, q.gate)
    unitary = gate_fidelity(ControlSystem.from_bank(bank), control, clean.gate)
    table = noisy.to_frame().rename(columns={"fidelity": "fidelity_gamma"})
    table["fidelity_unitary"] = clean.fidelities
    meta = _provenance(ctx, "evaluate", path)
    write_csv(table, _out(cfg, "fidelities.csv"), meta)
    write_json({**meta, "gate": q.gate, "mean_fidelity": noisy.mean, "mean_fidelity_unitary": clean.mean,
                "gate_fidelity_unitary": unitary}, _out(cfg, "evaluate_summary.json"))
    click.echo(f"{q.gate}: mean fidelity {noisy.mean:.4f} (gamma), {clean.mean:.4f} (coherent)")


@click.command("noise")
@click.option("--bank", "bank_path", default=None, help="Bank file (default: bank.path).")
@click.option("--field", "field_path", default=None, help="Field CSV (default: output.field_file).")
@click.pass_context
def cmd_noise(ctx, bank_path, field_path):
    """Charge-noise averaged mean fidelity for each configured sigma."""
    cfg = ctx.obj["config"]
    n = cfg.noise
    path, bank = _load_bank(cfg, bank_path)
    bank = bank_at(bank, cfg.qoct.eps0)
    check_noise_coverage(bank, [NoiseSpec(s, n.n_nodes, n.width) for s in n.sigmas])
    control = _load_field(field_path or cfg.output.field_file, bank)
    with log_timing("noise scan"):
        table = fidelity_vs_sigma(bank, control, cfg.qoct.gate, n.sigmas, n.gamma_L, n.gamma_U, n.n_nodes, n.width)
    write_csv(table, _out(cfg, "noise.csv"), _provenance(ctx, "noise", path))
    rising = np.flatnonzero(np.diff(table["mean_fidelity"].to_numpy()) > 1e-9)
    if rising.size:
        logger.warning(f"Mean fidelity rises with sigma at rows {rising.tolist()}")
    click.echo(table.to_string(index=False))


@click.command("spectrum")
@click.option("--field", "field_path", default=None, help="Field CSV (default: output.field_file).")
@click.option("--window", default="hann", help="Window name, or 'none'.")
@click.option("--peaks", default=2, show_default=True, help="Number of dominant peaks to report.")
@click.option("--f-max", default=None, type=float, help="Ignore peaks above this frequency (GHz).")
@click.pass_context
def cmd_spectrum(ctx, field_path, window, peaks, f_max):
    """Power spectrum of an optimized field."""
    cfg = ctx.obj["config"]
    path = field_path or cfg.output.field_file
    if not os.path.exists(path):
        raise ConfigError(f"field file {path} does not exist")
    df = read_csv(path)
    control = ControlField.from_frame(df)
    spectrum = power_spectrum(control, control.dt, None if window == "none" else window)
    meta = {**_provenance(ctx, "spectrum"), "field_sha256": file_digest(path)}
    write_csv(spectrum.to_frame(), _out(cfg, "spectrum.csv"), meta)
    top = dominant_peaks(spectrum, peaks, f_max)
    write_json({**meta, "peaks_GHz": top["f"].to_numpy(), "time_energy": spectrum.time_energy,
                "spectral_energy": spectrum.spectral_energy}, _out(cfg, "spectrum_summary.json"))
    click.echo("Dominant peaks (GHz): " + ", ".join(f"{f:.3f}" for f in top["f"]))


COMMANDS = [cmd_bank, cmd_calibrate, cmd_simulate, cmd_scan, cmd_optimize, cmd_evaluate, cmd_noise, cmd_spectrum]
