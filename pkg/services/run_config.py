"""
run_config.py – Structured run configuration for DotControl

Provides:
- RunConfig: one typed section per pipeline stage, every key with a default
- Loading from an INI file plus 'section.key=value' overrides
- A resolved dump that parses back to an identical RunConfig
"""

import configparser
import logging
from dataclasses import dataclass, field, fields, replace

from config import EMPTY
from helpers import text_digest
from services.errors import ConfigError
from services.hamiltonian import GridSpec, PhysicalParams, SolverOptions

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BankSettings:
    F_min: float = 208.0         # covers qoct.eps0 - noise.width * max(noise.sigmas)
    F_max: float = 244.0
    dF: float = 0.2
    reference_F: float = 226.0
    rate_normalization: str = "global"
    keep_states: bool = False
    path: str = "output/bank.dqd"


@dataclass(frozen=True)
class DynamicsSettings:
    gamma_L: float = 2.0          # GHz
    gamma_U: float = 2.0
    dt: float = 1.0e-4            # ns
    initial_state: str = EMPTY
    max_samples: int = 10000


@dataclass(frozen=True)
class PulseSettings:
    protocol: str = "constant"    # constant | stepped | sinusoidal | file
    eps0: float = -0.09           # meV
    duration: float = 30.0        # ns
    eps_peak: float = 0.05
    t_fwd: float = 0.5
    t_back: float = 1.5
    eps_c: float = 0.01
    eps_ac: float = 0.03
    frequency: float = 0.0        # GHz; 0 = T+(1,1) -> S(1,1) Bohr frequency
    n_cycles: float = 5.0
    ramp_time: float = 1.0e-3
    file: str = ""


@dataclass(frozen=True)
class ScanSettings:
    parameter: str = "eps_ac"     # eps_ac | eps_c | eps0 | frequency
    start: float = 0.0
    stop: float = 0.06
    num: int = 31
    relative_frequency: bool = True


@dataclass(frozen=True)
class QoctSettings:
    gate: str = "CNOT"
    t_f: float = 1.2              # ns
    eps0: float = -0.03           # meV
    dt: float = 1.0e-4
    eta: float = 5.0e-4
    iterations: int = 4000
    trial_offset: float = 0.035   # V/cm
    pin_endpoints: bool = True
    unitary_forward: bool = False
    early_stop: bool = False
    gamma_L: float = 0.5
    gamma_U: float = 0.5
    log_every: int = 100


@dataclass(frozen=True)
class NoiseSettings:
    sigmas: tuple = (0.0, 0.005, 0.01, 0.02, 0.04)
    n_nodes: int = 21
    width: float = 4.0
    gamma_L: float = 1.0
    gamma_U: float = 1.0


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "output"
    field_file: str = "output/field.csv"


@dataclass(frozen=True)
class RunConfig:
    physics: PhysicalParams = field(default_factory=PhysicalParams)
    grid: GridSpec = field(default_factory=GridSpec)
    solver: SolverOptions = field(default_factory=SolverOptions)
    bank: BankSettings = field(default_factory=BankSettings)
    dynamics: DynamicsSettings = field(default_factory=DynamicsSettings)
    pulse: PulseSettings = field(default_factory=PulseSettings)
    scan: ScanSettings = field(default_factory=ScanSettings)
    qoct: QoctSettings = field(default_factory=QoctSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def digest(self) -> str:
        return text_digest(dump_config(self))


SECTIONS = [f.name for f in fields(RunConfig)]

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {where}: {e}") from e


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    current = getattr(cfg, section)
    names = {f.name for f in fields(current)}
    if key not in names:
        raise ConfigError(f"unknown key '{key}' in section [{section}]")
    value = _convert(raw, getattr(current, key), f"{section}.{key}")
    try:
        return replace(cfg, **{section: replace(current, **{key: value})})
    except ValueError as e:
        raise ConfigError(f"invalid {section}.{key}: {e}") from e


def parse_config(text: str, overrides=()) -> RunConfig:
    """RunConfig from INI text; overrides are 'section.key=value' strings."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e

    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg = _apply(cfg, section, key, raw)
    for item in overrides:
        target, sep, raw = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        cfg = _apply(cfg, section, key.strip(), raw)
    return cfg


def load_config(path: str | None = None, overrides=()) -> RunConfig:
    text = ""
    if path:
        try:
            with open(path, "r") as f:
                text = f.read()
        except OSError as e:
            logger.error(f"Could not read config file '{path}': {e}")
            raise ConfigError(f"Could not read config file {path}") from e
    cfg = parse_config(text, overrides)
    logger.info(f"Loaded run config {cfg.digest()[:12]} from {path or 'defaults'}")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Resolved INI text with every key of every section."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        block = getattr(cfg, section)
        for f in fields(block):
            lines.append(f"{f.name} = {_format(getattr(block, f.name))}")
        lines.append("")
    return "\n".join(lines)
