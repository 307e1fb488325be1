"""Static optical model of a single SiV- center.

Everything here is a pure function of its arguments.  Frequencies are kept in
Hz, lifetimes in ns, powers in nW and rates in counts/s; conversion to MHz/GHz
only happens at the presentation layer.

Transition convention (zero field)::

    nu_A = zpl + (es + gs) / 2
    nu_B = zpl + (es - gs) / 2
    nu_C = zpl - (es - gs) / 2
    nu_D = zpl - (es + gs) / 2

so that A - B = C - D = gs and A - C = B - D = es.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ZPL_CENTER_HZ = 406.7e12
GS_SPLITTING_HZ = 49e9
ES_SPLITTING_HZ = 258e9


class InvalidParameterError(ValueError):
    """A physical parameter is outside its domain."""


class UndefinedRatioError(ZeroDivisionError):
    """Signal plus background vanishes, so rho is undefined."""


@dataclass(frozen=True)
class LevelStructure:
    zpl_center_freq: float = ZPL_CENTER_HZ
    gs_splitting: float = GS_SPLITTING_HZ
    es_splitting: float = ES_SPLITTING_HZ


@dataclass(frozen=True)
class OpticalTransitionParams:
    """Transition C of one emitter.

    ``natural_fwhm`` is derived from the lifetime and cannot be set on its own.
    """

    center_freq: float = ZPL_CENTER_HZ - (ES_SPLITTING_HZ - GS_SPLITTING_HZ) / 2
    excited_state_lifetime: float = 1.69  # ns
    resonant_saturation_power: float = 23.0  # nW
    max_signal_rate: float = 9.7e3  # counts/s
    zpl_branching_fraction: float = 0.7

    def __post_init__(self):
        if self.excited_state_lifetime <= 0:
            raise InvalidParameterError("excited_state_lifetime must be > 0")
        if self.resonant_saturation_power <= 0:
            raise InvalidParameterError("resonant_saturation_power must be > 0")
        if self.max_signal_rate <= 0:
            raise InvalidParameterError("max_signal_rate must be > 0")
        if not 0.0 <= self.zpl_branching_fraction <= 1.0:
            raise InvalidParameterError("zpl_branching_fraction must lie in [0, 1]")

    @property
    def natural_fwhm(self) -> float:
        return lifetime_limit(self.excited_state_lifetime)


@dataclass(frozen=True)
class BackgroundModel:
    linear_coefficient: float = 5.0  # counts/s per nW
    dark_rate: float = 20.0  # counts/s

    def __post_init__(self):
        if self.linear_coefficient < 0 or self.dark_rate < 0:
            raise InvalidParameterError("background coefficients must be >= 0")

    def rate(self, power):
        """Background count rate B(P) at drive power ``power`` (nW)."""
        return self.dark_rate + self.linear_coefficient * np.asarray(power, dtype=float)


def transition_frequencies(ls: LevelStructure) -> dict[str, float]:
    if ls.gs_splitting < 0 or ls.es_splitting < 0:
        raise InvalidParameterError("splittings must be non-negative")
    hi = (ls.es_splitting + ls.gs_splitting) / 2
    lo = (ls.es_splitting - ls.gs_splitting) / 2
    z = ls.zpl_center_freq
    return {"A": z + hi, "B": z + lo, "C": z - lo, "D": z - hi}


def lorentzian(detuning, fwhm, amplitude=1.0, offset=0.0):
    """Peak-normalised Lorentzian: ``offset + amplitude`` at zero detuning."""
    if np.any(np.asarray(fwhm) <= 0):
        raise InvalidParameterError("fwhm must be > 0")
    hw2 = (np.asarray(fwhm, dtype=float) / 2) ** 2
    d = np.asarray(detuning, dtype=float)
    return offset + amplitude * hw2 / (d * d + hw2)


def lifetime_limit(tau_r_ns):
    """Lifetime-limited FWHM in Hz, 1 / (2 pi tau_r)."""
    tau = np.asarray(tau_r_ns, dtype=float)
    if np.any(tau <= 0):
        raise InvalidParameterError("lifetime must be > 0")
    out = 1.0 / (2 * math.pi * tau * 1e-9)
    return float(out) if out.ndim == 0 else out


def lifetime_from_linewidth(fwhm_hz):
    """Inverse of :func:`lifetime_limit`; returns ns."""
    f = np.asarray(fwhm_hz, dtype=float)
    if np.any(f <= 0):
        raise InvalidParameterError("linewidth must be > 0")
    out = 1e9 / (2 * math.pi * f)
    return float(out) if out.ndim == 0 else out


def saturation_rate(power, p: OpticalTransitionParams):
    P = np.asarray(power, dtype=float)
    if np.any(P < 0):
        raise InvalidParameterError("power must be >= 0")
    out = p.max_signal_rate * P / (P + p.resonant_saturation_power)
    return float(out) if out.ndim == 0 else out


def power_broadened_fwhm(power, fwhm0, p_sat):
    P = np.asarray(power, dtype=float)
    if np.any(P < 0):
        raise InvalidParameterError("power must be >= 0")
    if fwhm0 <= 0 or p_sat <= 0:
        raise InvalidParameterError("fwhm0 and p_sat must be > 0")
    out = fwhm0 * np.sqrt(1.0 + P / p_sat)
    return float(out) if out.ndim == 0 else out


def signal_to_background(power, p: OpticalTransitionParams, bg: BackgroundModel) -> float:
    s = saturation_rate(power, p)
    b = float(bg.rate(power))
    if s + b <= 0:
        raise UndefinedRatioError("S(P) + B(P) = 0")
    return s / (s + b)


def antibunching_time(power, p: OpticalTransitionParams) -> float:
    """Recovery time tau_c = tau_r / (1 + P/P_sat) in seconds (two-level pumping)."""
    return p.excited_state_lifetime * 1e-9 / (1.0 + power / p.resonant_saturation_power)
