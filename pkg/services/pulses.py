"""
pulses.py – Detuning pulse profiles for DotControl

Provides:
- Pulse segments: constant, linear ramp, sinusoid, uniformly sampled
- PulseProfile: a continuous chain of segments evaluated as eps(t) in meV, t in ns
- The stepped, sinusoidal and constant protocols used by the experiments
- JSON and DataFrame round-trips for sampled pulses
"""

import json
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from services.errors import ConfigError

logger = logging.getLogger(__name__)

CONTINUITY_TOL = 1.0e-9     # meV
FAST_RAMP = 1.0e-3          # ns


@dataclass(frozen=True)
class Constant:
    eps: float
    duration: float

    def value(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.eps)


@dataclass(frozen=True)
class LinearRamp:
    eps_start: float
    eps_end: float
    duration: float

    def value(self, t):
        t = np.asarray(t, dtype=float)
        if self.duration == 0:
            return np.full_like(t, self.eps_end)
        return self.eps_start + (self.eps_end - self.eps_start) * (t / self.duration)


@dataclass(frozen=True)
class Sinusoid:
    eps_center: float
    eps_ac: float
    frequency: float          # GHz
    n_cycles: float
    phase: float = 0.0

    @property
    def duration(self) -> float:
        return self.n_cycles / self.frequency

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return self.eps_center + self.eps_ac * np.sin(2.0 * np.pi * self.frequency * t + self.phase)


@dataclass(frozen=True)
class Sampled:
    values: tuple
    dt: float
    hold: bool = False        # zero-order hold on [t_k, t_k+1) instead of linear interpolation

    @property
    def duration(self) -> float:
        return (len(self.values) - 1) * self.dt

    def value(self, t):
        t = np.asarray(t, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if self.hold:
            k = np.floor(t / self.dt + 1e-9).astype(int)
            return values[np.clip(k, 0, len(values) - 1)]
        grid = self.dt * np.arange(len(values))
        return np.interp(t, grid, values)


class PulseProfile:
    """Detuning eps(t) (meV) as a continuous chain of segments starting at t = 0 ns."""

    def __init__(self, segments):
        self.segments = tuple(segments)
        if not self.segments:
            raise ConfigError("a pulse needs at least one segment")
        for seg in self.segments:
            if seg.duration < 0 or not np.isfinite(seg.duration):
                raise ConfigError(f"invalid segment duration {seg.duration}")
        self._starts = np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])
        for i in range(1, len(self.segments)):
            t_join = self.segments[i - 1].duration
            left = float(self.segments[i - 1].value(t_join))
            right = float(self.segments[i].value(0.0))
            if abs(left - right) > CONTINUITY_TOL:
                raise ConfigError(
                    f"pulse jumps from {left} to {right} meV at t={self._starts[i]} ns (segment {i})")

    @property
    def duration(self) -> float:
        return float(self._starts[-1])

    @property
    def start_value(self) -> float:
        return float(self.segments[0].value(0.0))

    @property
    def end_value(self) -> float:
        last = self.segments[-1]
        return float(last.value(last.duration))

    def eps(self, t):
        """Detuning at time(s) t; clamped to the end points outside [0, duration]."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.clip(np.atleast_1d(t), 0.0, self.duration)
        out = np.empty_like(t)
        which = np.searchsorted(self._starts[1:-1], t, side="right")
        for i, seg in enumerate(self.segments):
            mask = which == i
            if np.any(mask):
                out[mask] = seg.value(t[mask] - self._starts[i])
        return float(out[0]) if scalar else out

    def field(self, t, params):
        return params.field(self.eps(t))

    def sample(self, dt: float):
        n = int(round(self.duration / dt)) if dt > 0 else 0
        t = np.linspace(0.0, self.duration, n + 1) if n > 0 else np.array([0.0])
        return t, self.eps(t)

    def to_frame(self, dt: float) -> pd.DataFrame:
        t, eps = self.sample(dt)
        return pd.DataFrame({"t": t, "eps": eps})

    def __repr__(self):
        return f"PulseProfile({len(self.segments)} segments, {self.duration:.4f} ns)"


# ─────────────────────────────────────────────────────────────────────────
# Protocols
# ─────────────────────────────────────────────────────────────────────────
def constant_protocol(eps0: float, duration: float) -> PulseProfile:
    return PulseProfile([Constant(eps0, duration)])


def stepped_protocol(eps0: float, eps_peak: float, t_fwd: float, t_back: float) -> PulseProfile:
    """Fast forward ramp eps0 -> eps_peak, then a slower return to eps0."""
    if not t_fwd < t_back:
        raise ConfigError(f"forward ramp ({t_fwd} ns) must be faster than the return ({t_back} ns)")
    return PulseProfile([LinearRamp(eps0, eps_peak, t_fwd), LinearRamp(eps_peak, eps0, t_back)])


def sinusoidal_protocol(eps0: float, eps_c: float, eps_ac: float, f: float, n_cycles: float,
                        ramp_time: float = FAST_RAMP, phase: float = 0.0) -> PulseProfile:
    """Fast ramp eps0 -> eps_c, n_cycles of eps_c + eps_ac sin(2 pi f t), fast ramp back to eps0."""
    if f <= 0:
        raise ConfigError(f"sinusoid frequency must be positive, got {f}")
    oscillation = Sinusoid(eps_c, eps_ac, f, n_cycles, phase)
    start = float(oscillation.value(0.0))
    end = float(oscillation.value(oscillation.duration))
    return PulseProfile([
        LinearRamp(eps0, start, ramp_time),
        oscillation,
        LinearRamp(end, eps0, ramp_time),
    ])


def sampled_pulse(eps_values, dt: float, hold: bool = False) -> PulseProfile:
    values = np.asarray(eps_values, dtype=float)
    if values.size < 2 or dt <= 0:
        raise ConfigError("a sampled pulse needs at least two samples and dt > 0")
    return PulseProfile([Sampled(tuple(values.tolist()), float(dt), bool(hold))])


def is_held(pulse: PulseProfile) -> bool:
    return len(pulse.segments) == 1 and getattr(pulse.segments[0], "hold", False)


# ─────────────────────────────────────────────────────────────────────────
# Files
# ─────────────────────────────────────────────────────────────────────────
def pulse_to_json(pulse: PulseProfile, dt: float, path: str, extra: dict | None = None) -> str:
    t, eps = pulse.sample(dt)
    data = {"dt": dt, "t": t.tolist(), "eps": eps.tolist(), "hold": is_held(pulse)}
    data.update(extra or {})
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
    logger.info(f"Wrote sampled pulse ({len(t)} samples) to '{path}'")
    return path


def pulse_from_json(path: str) -> PulseProfile:
    try:
        with open(path, "r") as f:
            data = json.load(f)
        return sampled_pulse(data["eps"], data["dt"], hold=bool(data.get("hold", False)))
    except (OSError, KeyError, json.JSONDecodeError) as e:
        logger.error(f"Could not read pulse file '{path}': {e}")
        raise ConfigError(f"Could not read pulse file {path}") from e
