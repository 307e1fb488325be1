"""Stochastic state of emitters in a pillar.

Spectral diffusion is an Ornstein-Uhlenbeck process on the line center.  Charge
dynamics is a two-state telegraph process (negative / ionized).  Repump pulses
re-randomise the local charge environment: each pulse adds ``repump_jump_sigma**2``
to an accumulated environment variance and redraws the repump offset of the
line from ``N(0, accumulated variance)``.  For 445 nm repumping the accumulation
is bounded (an OU-style leak), giving the saturating wander seen in that scheme.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .physics import (
    BackgroundModel,
    OpticalTransitionParams,
    lorentzian,
    power_broadened_fwhm,
    saturation_rate,
)

# 445 nm exposure must exceed both thresholds to stabilize.
STABILIZATION_POWER_MW = 5.0
STABILIZATION_DURATION_H = 1.0

FIG3A_LIFETIME_NS = 1.609


class PopulationClass(str, enum.Enum):
    STABLE1 = "Stable1"
    DIFFUSIVE2 = "Diffusive2"
    BLINKING3 = "Blinking3"


@dataclass(frozen=True)
class SpectralDiffusionParams:
    ou_sigma: float = 0.0  # MHz, stationary std of the line center
    ou_correlation_time: float = 1.0  # s
    repump_jump_sigma: float = 0.0  # MHz per repump pulse

    def __post_init__(self):
        if self.ou_sigma < 0 or self.repump_jump_sigma < 0:
            raise ValueError("diffusion amplitudes must be >= 0")
        if self.ou_correlation_time <= 0:
            raise ValueError("ou_correlation_time must be > 0")


@dataclass(frozen=True)
class ChargeDynamicsParams:
    ionization_rate_at_sat: float = 0.0  # 1/s under resonant drive at P -> inf
    recovery_rate_dark: float = 0.0  # 1/s
    repump_recovery_prob: float = 1.0
    stabilized: bool = False

    def __post_init__(self):
        if self.ionization_rate_at_sat < 0 or self.recovery_rate_dark < 0:
            raise ValueError("charge rates must be >= 0")
        if not 0.0 <= self.repump_recovery_prob <= 1.0:
            raise ValueError("repump_recovery_prob must be in [0, 1]")

    @property
    def effective_ionization_rate(self) -> float:
        return 0.0 if self.stabilized else self.ionization_rate_at_sat


# Calibration knobs (not measured values).  STABLE1 sigma is tuned so that a
# Lorentzian fit of the long-time averaged crf-PLE line is ~2.1x the lifetime
# limit at the default crf power; see tests/test_sweep.py::test_stable1_calibration.
STABLE1_DIFFUSION = SpectralDiffusionParams(ou_sigma=70.0, ou_correlation_time=0.5,
                                            repump_jump_sigma=0.012)
DIFFUSIVE2_DIFFUSION = SpectralDiffusionParams(ou_sigma=800.0, ou_correlation_time=60.0,
                                               repump_jump_sigma=0.012)
BLINKING3_DIFFUSION = SpectralDiffusionParams(ou_sigma=400.0, ou_correlation_time=60.0,
                                              repump_jump_sigma=0.012)

POPULATION_DIFFUSION = {
    PopulationClass.STABLE1: STABLE1_DIFFUSION,
    PopulationClass.DIFFUSIVE2: DIFFUSIVE2_DIFFUSION,
    PopulationClass.BLINKING3: BLINKING3_DIFFUSION,
}
POPULATION_CHARGE = {
    PopulationClass.STABLE1: ChargeDynamicsParams(),
    PopulationClass.DIFFUSIVE2: ChargeDynamicsParams(),
    PopulationClass.BLINKING3: ChargeDynamicsParams(ionization_rate_at_sat=1 / 30,
                                                    recovery_rate_dark=1 / 300),
}
POPULATION_BRIGHTNESS = {
    PopulationClass.STABLE1: 1.0,
    PopulationClass.DIFFUSIVE2: 0.5,
    PopulationClass.BLINKING3: 1.0,
}


@dataclass(frozen=True)
class EmitterModel:
    transition: OpticalTransitionParams = field(default_factory=OpticalTransitionParams)
    diffusion: SpectralDiffusionParams = STABLE1_DIFFUSION
    charge: ChargeDynamicsParams = field(default_factory=ChargeDynamicsParams)
    population: PopulationClass = PopulationClass.STABLE1
    static_detuning: float = 0.0  # Hz
    # Optional brightness/stability penalty applied when a Stable1 emitter is
    # exposed to 445 nm light; 0 disables it.
    blue_penalty: float = 0.0

    @classmethod
    def preset(cls, population, **overrides) -> "EmitterModel":
        population = PopulationClass(population)
        tr = overrides.pop("transition", None) or OpticalTransitionParams()
        scale = POPULATION_BRIGHTNESS[population]
        if scale != 1.0:
            tr = replace(tr, max_signal_rate=tr.max_signal_rate * scale)
        return cls(transition=tr,
                   diffusion=overrides.pop("diffusion", POPULATION_DIFFUSION[population]),
                   charge=overrides.pop("charge", POPULATION_CHARGE[population]),
                   population=population, **overrides)


@dataclass(frozen=True)
class PillarModel:
    emitters: tuple = ()
    background: BackgroundModel = field(default_factory=BackgroundModel)

    def __post_init__(self):
        object.__setattr__(self, "emitters", tuple(self.emitters))


@dataclass
class EmitterState:
    """Mutable per-emitter simulation state.  Frequencies in Hz."""

    ou_offset: float = 0.0
    repump_offset: float = 0.0
    repump_variance: float = 0.0  # Hz^2, accumulated environment variance
    negative: bool = True
    t: float = 0.0

    @property
    def center_offset(self) -> float:
        return self.ou_offset + self.repump_offset


def initial_state(emitter: EmitterModel, rng: np.random.Generator) -> EmitterState:
    """Draw the OU offset from its stationary law."""
    return EmitterState(ou_offset=rng.normal(0.0, emitter.diffusion.ou_sigma * 1e6))


def ou_coefficients(dt, sigma, tau):
    """Exact AR(1) coefficients of an OU process sampled every ``dt``."""
    a = np.exp(-np.asarray(dt, dtype=float) / tau)
    return a, sigma * np.sqrt(1.0 - a * a)


def evolve_center_frequency(state: EmitterState, emitter: EmitterModel, dt: float,
                            rng: np.random.Generator) -> float:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    d = emitter.diffusion
    a, s = ou_coefficients(dt, d.ou_sigma * 1e6, d.ou_correlation_time)
    state.ou_offset = a * state.ou_offset + s * rng.standard_normal() if s > 0 else a * state.ou_offset
    state.t += dt
    return emitter.static_detuning + state.center_offset


def ou_path(x0: float, n: int, dt: float, sigma: float, tau: float,
            rng: np.random.Generator) -> np.ndarray:
    """Vectorised OU samples x_1..x_n on a uniform grid, starting from x0."""
    from scipy.signal import lfilter

    a, s = ou_coefficients(dt, sigma, tau)
    if n == 0:
        return np.empty(0)
    innov = s * rng.standard_normal(n) if s > 0 else np.zeros(n)
    innov[0] += a * x0
    return lfilter([1.0], [1.0, -a], innov)


def repump_leak(scheme_wavelength_nm: int | None) -> float:
    """Per-pulse retention of accumulated environment variance."""
    if scheme_wavelength_nm == 445:
        return WANDER_445_RETENTION
    return 1.0


# 445 nm cr-PLE: larger kicks, accumulation saturates after ~1e8 pulses.
REPUMP_445_SIGMA_SCALE = 8.0
WANDER_445_RETENTION = math.exp(-1.0 / 1.0e8)


def accumulate_repump_variance(v0: float, n_pulses, sigma_jump_hz: float, retention: float = 1.0):
    """Accumulated variance after ``n_pulses`` more pulses (vectorised in n)."""
    n = np.asarray(n_pulses, dtype=float)
    s2 = sigma_jump_hz ** 2
    if retention >= 1.0:
        return v0 + s2 * n
    rn = retention ** n
    return v0 * rn + s2 * (1.0 - rn) / (1.0 - retention)


def apply_repump_pulse(state: EmitterState, emitter: EmitterModel, rng: np.random.Generator,
                       retention: float = 1.0, sigma_scale: float = 1.0) -> EmitterState:
    """One off-resonant repump pulse.

    Restores the negative charge state with ``repump_recovery_prob`` and
    re-randomises the repump offset.  Stabilized emitters keep their frequency.
    """
    ch = emitter.charge
    if not state.negative and rng.random() < ch.repump_recovery_prob:
        state.negative = True
    if ch.stabilized:
        return state
    sj = emitter.diffusion.repump_jump_sigma * 1e6 * sigma_scale
    if sj > 0:
        state.repump_variance = float(accumulate_repump_variance(state.repump_variance, 1, sj, retention))
        state.repump_offset = rng.normal(0.0, math.sqrt(state.repump_variance))
    return state


def ionization_rate(emitter: EmitterModel, resonant_power: float) -> float:
    tr = emitter.transition
    return emitter.charge.effective_ionization_rate * saturation_rate(resonant_power, tr) / tr.max_signal_rate


def evolve_charge_state(state: EmitterState, emitter: EmitterModel, dt: float,
                        resonant_power: float, rng: np.random.Generator) -> EmitterState:
    k_i = ionization_rate(emitter, resonant_power)
    k_r = emitter.charge.recovery_rate_dark
    n_sub = max(1, math.ceil(max(k_i, k_r) * dt / 0.1))
    h = dt / n_sub
    p_ion = -math.expm1(-k_i * h)
    p_rec = -math.expm1(-k_r * h)
    for _ in range(n_sub):
        u = rng.random()
        if state.negative:
            if u < p_ion:
                state.negative = False
        elif u < p_rec:
            state.negative = True
    state.t += dt
    return state


def telegraph_path(negative0: bool, t_end: float, k_ion: float, k_rec: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Switching times of the charge telegraph on [0, t_end).

    Returns the switch times and the initial state; the state flips at each
    returned time.
    """
    times = []
    t = 0.0
    neg = negative0
    while True:
        k = k_ion if neg else k_rec
        if k <= 0:
            break
        t += rng.exponential(1.0 / k)
        if t >= t_end:
            break
        times.append(t)
        neg = not neg
    return np.asarray(times), negative0


def negative_at(times: np.ndarray, switches: np.ndarray, negative0: bool) -> np.ndarray:
    flips = np.searchsorted(switches, times, side="right")
    even = (flips % 2) == 0
    return even if negative0 else ~even


def apply_blue_stabilization(emitter: EmitterModel, exposure_power_mw: float,
                             exposure_duration_h: float) -> EmitterModel:
    if not (exposure_power_mw > STABILIZATION_POWER_MW
            and exposure_duration_h > STABILIZATION_DURATION_H):
        return emitter
    tr = emitter.transition
    diff = replace(emitter.diffusion, ou_sigma=STABLE1_DIFFUSION.ou_sigma,
                   ou_correlation_time=STABLE1_DIFFUSION.ou_correlation_time,
                   repump_jump_sigma=0.0)
    if emitter.population is PopulationClass.STABLE1 and emitter.blue_penalty > 0:
        pen = emitter.blue_penalty
        tr = replace(tr, max_signal_rate=tr.max_signal_rate * (1.0 - pen))
        diff = replace(diff, ou_sigma=emitter.diffusion.ou_sigma * (1.0 + pen))
    elif emitter.population is PopulationClass.DIFFUSIVE2:
        tr = replace(tr, max_signal_rate=tr.max_signal_rate / POPULATION_BRIGHTNESS[PopulationClass.DIFFUSIVE2])
    return replace(emitter, transition=tr, diffusion=diff,
                   charge=replace(emitter.charge, stabilized=True),
                   population=PopulationClass.STABLE1)


def line_rate(emitter: EmitterModel, laser_detuning, power, center_offset):
    """Signal rate of one negatively charged emitter; detunings in Hz."""
    tr = emitter.transition
    fwhm = power_broadened_fwhm(power, tr.natural_fwhm, tr.resonant_saturation_power)
    d = np.asarray(laser_detuning) - emitter.static_detuning - np.asarray(center_offset)
    return saturation_rate(power, tr) * lorentzian(d, fwhm)


def instantaneous_rates(pillar: PillarModel, laser_freq: float, laser_power: float,
                        states) -> tuple[np.ndarray, float]:
    """Per-emitter signal rates and the background rate.

    ``laser_freq`` is a detuning from the nominal C line (Hz).
    """
    rates = np.array([
        line_rate(e, laser_freq, laser_power, s.center_offset) if s.negative else 0.0
        for e, s in zip(pillar.emitters, states)
    ], dtype=float)
    return rates, float(pillar.background.rate(laser_power))
