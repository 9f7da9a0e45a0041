import json
import os
from dataclasses import replace

import pytest
from click.testing import CliRunner

import commands.main as main
from config import EXIT_CONFIG_ERROR, EXIT_NUMERICAL_ERROR
from dotControl import cli, exit_code_for
from helpers import read_csv, read_provenance
from services.bank_store import save_bank
from services.errors import BankChecksumError, ConfigError, InvariantViolation, UnknownGateError
from services.run_config import RunConfig, dump_config, load_config, parse_config
from tests.conftest import make_synthetic_bank


# ─────────────────────────────────────────────────────────────────────────
# Run configuration
# ─────────────────────────────────────────────────────────────────────────
def test_empty_config_gives_defaults():
    assert parse_config("") == RunConfig()


def test_dump_parses_back_to_same_config():
    cfg = parse_config("[qoct]\ngate = HxI\nt_f = 0.8\n[noise]\nsigmas = 0.0, 0.01\n",
                       overrides=["pulse.protocol=sinusoidal", "qoct.early_stop=yes"])
    assert cfg.qoct.gate == "HxI"
    assert cfg.qoct.t_f == 0.8
    assert cfg.qoct.early_stop is True
    assert cfg.noise.sigmas == (0.0, 0.01)
    assert cfg.pulse.protocol == "sinusoidal"
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(cfg)).digest() == cfg.digest()


def test_shipped_config_matches_defaults():
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    assert load_config(os.path.join(here, "data", "default.ini")) == RunConfig()


@pytest.mark.parametrize("text, overrides", [
    ("[nonsense]\nkey = 1\n", ()),
    ("[qoct]\nnot_a_key = 1\n", ()),
    ("[qoct]\niterations = many\n", ()),
    ("[qoct]\npin_endpoints = maybe\n", ()),
    ("", ["qoct.gate"]),
    ("", ["gate=CNOT"]),
    ("[grid]\nn_points = 100\n", ()),
    ("not an ini file", ()),
])
def test_bad_config_raises_config_error(text, overrides):
    with pytest.raises(ConfigError):
        parse_config(text, overrides)


def test_missing_config_file_raises(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.ini"))


def test_exit_codes():
    assert exit_code_for(ConfigError("x")) == EXIT_CONFIG_ERROR
    assert exit_code_for(UnknownGateError("x")) == EXIT_CONFIG_ERROR
    assert exit_code_for(BankChecksumError("x")) == EXIT_CONFIG_ERROR
    assert exit_code_for(InvariantViolation("x")) == EXIT_NUMERICAL_ERROR
    assert exit_code_for(KeyError("x")) == 1


# ─────────────────────────────────────────────────────────────────────────
# Command line
# ─────────────────────────────────────────────────────────────────────────
@pytest.fixture
def workspace(tmp_path):
    bank_path = str(tmp_path / "bank.dqd")
    save_bank(make_synthetic_bank(), bank_path)
    out = tmp_path / "out"
    args = [
        "--cache-type", "null",
        "--set", f"bank.path={bank_path}",
        "--set", f"output.directory={out}",
        "--set", f"output.field_file={out / 'field.csv'}",
        "--set", "qoct.t_f=0.01",
        "--set", "qoct.iterations=2",
        "--set", "qoct.log_every=0",
        "--set", "qoct.gamma_L=0.0",
        "--set", "qoct.gamma_U=0.0",
    ]
    return out, args


def _run(args):
    return CliRunner().invoke(cli, args, catch_exceptions=False)


def test_show_config_prints_resolved_ini():
    result = _run(["--cache-type", "null", "--set", "qoct.gate=IxH", "show-config"])
    assert result.exit_code == 0
    assert "[qoct]" in result.output
    assert "gate = IxH" in result.output


def test_unknown_key_exits_with_config_code():
    result = _run(["--cache-type", "null", "--set", "qoct.speed=3", "show-config"])
    assert result.exit_code == EXIT_CONFIG_ERROR


def test_missing_bank_exits_with_config_code(tmp_path):
    result = _run(["--cache-type", "null", "--set", f"bank.path={tmp_path / 'none.dqd'}",
                   "--set", f"output.directory={tmp_path}", "evaluate"])
    assert result.exit_code == EXIT_CONFIG_ERROR


def test_unknown_gate_exits_with_config_code(workspace):
    out, args = workspace
    result = _run(args + ["--set", "qoct.gate=SWAP", "optimize"])
    assert result.exit_code == EXIT_CONFIG_ERROR


def test_optimize_evaluate_and_spectrum(workspace):
    out, args = workspace
    result = _run(args + ["optimize"])
    assert result.exit_code == 0, result.output

    field = read_csv(str(out / "field.csv"))
    assert list(field.columns) == ["t", "F", "eps"]
    assert len(field) == 101
    assert read_provenance(str(out / "field.csv"))["command"] == "optimize"
    assert os.path.exists(out / "field.json")
    assert len(read_csv(str(out / "history.csv"))) == 3
    summary = json.loads((out / "optimize_summary.json").read_text())
    assert summary["iterations"] == 2 and summary["aborted"] is False

    result = _run(args + ["evaluate"])
    assert result.exit_code == 0, result.output
    table = read_csv(str(out / "fidelities.csv"))
    assert list(table.columns) == ["target", "fidelity_gamma", "fidelity_unitary"]
    assert len(table) == 5

    result = _run(args + ["spectrum", "--peaks", "1"])
    assert result.exit_code == 0, result.output
    assert "Dominant peaks" in result.output
    assert os.path.exists(out / "spectrum.csv")


def test_simulate_writes_trajectory(workspace):
    out, args = workspace
    result = _run(args + ["--set", "pulse.eps0=-0.03", "--set", "pulse.duration=0.05",
                          "--set", "dynamics.dt=0.001", "simulate"])
    assert result.exit_code == 0, result.output
    trajectory = read_csv(str(out / "trajectory.csv"))
    assert trajectory.columns[0] == "t"
    assert trajectory["t"].iloc[-1] == pytest.approx(0.05)


def test_scan_writes_table(workspace):
    out, args = workspace
    result = _run(args + ["--set", "pulse.eps0=-0.03", "--set", "pulse.protocol=sinusoidal",
                          "--set", "pulse.n_cycles=1", "--set", "pulse.frequency=20.0",
                          "--set", "dynamics.dt=0.001", "--set", "scan.num=2",
                          "--set", "scan.stop=0.01", "scan"])
    assert result.exit_code == 0, result.output
    table = read_csv(str(out / "scan_eps_ac.csv"))
    assert table["eps_ac"].tolist() == pytest.approx([0.0, 0.01])


def test_evaluate_rejects_missing_field(workspace):
    out, args = workspace
    result = _run(args + ["evaluate", "--field", str(out / "nothing.csv")])
    assert result.exit_code == EXIT_CONFIG_ERROR


def test_calibrate_fits_width_before_asymmetry(workspace, monkeypatch):
    out, args = workspace
    calls = []

    def fit_width(params, target, grid, solver):
        calls.append(("width", target))
        return replace(params, width_left=70.0)

    def fit_asymmetry(params, grid, solver):
        calls.append(("asymmetry", params.width_left))
        return replace(params, depth_left=-40.0)

    monkeypatch.setattr(main, "calibrate_well_width", fit_width)
    monkeypatch.setattr(main, "calibrate_well_asymmetry", fit_asymmetry)
    monkeypatch.setattr(main, "singlet_triplet_splitting", lambda params, grid, solver: 6.0)
    result = _run(args + ["calibrate", "--target-splitting", "6.0"])
    assert result.exit_code == 0, result.output
    assert calls == [("width", 6.0), ("asymmetry", 70.0)]
    summary = json.loads((out / "calibration.json").read_text())
    assert summary["width_left"] == 70.0
    assert summary["depth_left"] == -40.0
    assert summary["singlet_triplet_splitting_meV"] == 6.0
