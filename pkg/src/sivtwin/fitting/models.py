"""Model zoo with analytic Jacobians."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .core import Model


def _lor_parts(x, c, fwhm):
    d = x - c
    h = fwhm / 2
    den = d * d + h * h
    return d, h, den


def _lorentzian_f(x, p):
    c, fwhm, a, o = p
    d, h, den = _lor_parts(x, c, fwhm)
    return o + a * h * h / den


def _lorentzian_j(x, p):
    c, fwhm, a, o = p
    d, h, den = _lor_parts(x, c, fwhm)
    J = np.empty((x.size, 4))
    J[:, 0] = a * h * h * 2 * d / den ** 2
    J[:, 1] = a * h * d * d / den ** 2
    J[:, 2] = h * h / den
    J[:, 3] = 1.0
    return J


LORENTZIAN = Model("lorentzian", ("center", "fwhm", "amplitude", "offset"),
                   _lorentzian_f, _lorentzian_j, positive=("fwhm",))


@lru_cache(maxsize=None)
def multi_lorentzian(n: int) -> Model:
    """``n`` Lorentzians sharing one offset; parameters center_i, fwhm_i, amplitude_i."""
    names = []
    for i in range(1, n + 1):
        names += [f"center_{i}", f"fwhm_{i}", f"amplitude_{i}"]
    names.append("offset")

    def f(x, p):
        out = np.full(x.shape, p[-1], dtype=float)
        for i in range(n):
            out += _lorentzian_f(x, np.r_[p[3 * i:3 * i + 3], 0.0])
        return out

    def jac(x, p):
        J = np.empty((x.size, 3 * n + 1))
        for i in range(n):
            J[:, 3 * i:3 * i + 3] = _lorentzian_j(x, np.r_[p[3 * i:3 * i + 3], 0.0])[:, :3]
        J[:, -1] = 1.0
        return J

    return Model(f"multi_lorentzian_{n}", tuple(names), f, jac,
                 positive=tuple(f"fwhm_{i}" for i in range(1, n + 1)))


def _exp_f(x, p):
    tau, a, b = p
    return a * np.exp(-x / tau) + b


def _exp_j(x, p):
    tau, a, b = p
    e = np.exp(-x / tau)
    return np.column_stack([a * e * x / tau ** 2, e, np.ones_like(x)])


EXP_DECAY = Model("exponential_decay", ("tau_r", "amplitude", "offset"), _exp_f, _exp_j,
                  positive=("tau_r",))


def _sat_f(x, p):
    imax, psat, beta = p
    return imax * x / (x + psat) + beta * x


def _sat_j(x, p):
    imax, psat, beta = p
    return np.column_stack([x / (x + psat), -imax * x / (x + psat) ** 2, x])


SATURATION = Model("saturation", ("I_max", "P_sat", "bg_slope"), _sat_f, _sat_j,
                   positive=("I_max", "P_sat"))


def _pb_f(x, p):
    f0, psat = p
    return f0 * np.sqrt(1.0 + x / psat)


def _pb_j(x, p):
    f0, psat = p
    s = np.sqrt(1.0 + x / psat)
    return np.column_stack([s, -f0 * x / (2 * s * psat ** 2)])


POWER_BROADENING = Model("power_broadening", ("fwhm0", "P_sat"), _pb_f, _pb_j,
                         positive=("fwhm0", "P_sat"))


def _g(x, m, s):
    return np.exp(-0.5 * ((x - m) / s) ** 2)


def _dg_f(x, p):
    m1, s1, a1, m2, s2, a2 = p
    return a1 * _g(x, m1, s1) + a2 * _g(x, m2, s2)


def _dg_j(x, p):
    m1, s1, a1, m2, s2, a2 = p
    cols = []
    for m, s, a in ((m1, s1, a1), (m2, s2, a2)):
        g = _g(x, m, s)
        cols += [a * g * (x - m) / s ** 2, a * g * (x - m) ** 2 / s ** 3, g]
    return np.column_stack(cols)


DOUBLE_GAUSSIAN = Model("double_gaussian", ("mean_1", "sigma_1", "amplitude_1",
                                            "mean_2", "sigma_2", "amplitude_2"),
                        _dg_f, _dg_j, positive=("sigma_1", "amplitude_1", "sigma_2", "amplitude_2"))


def _sg_f(x, p):
    m, s, a = p
    return a * _g(x, m, s)


def _sg_j(x, p):
    return _dg_j(x, np.r_[p, 0.0, 1.0, 0.0])[:, :3]


GAUSSIAN = Model("gaussian", ("mean_1", "sigma_1", "amplitude_1"), _sg_f, _sg_j,
                 positive=("sigma_1", "amplitude_1"))


def _quad_f(x, p):
    return p[0] + p[1] * x + p[2] * x * x


def _quad_j(x, p):
    return np.column_stack([np.ones_like(x), x, x * x])


QUADRATIC = Model("quadratic", ("c0", "c1", "c2"), _quad_f, _quad_j)


def _bin_mean_exp(tau, tc, width):
    """Mean of exp(-|t|/tc) over [tau - width/2, tau + width/2] and its d/dtc."""
    if width <= 0:
        e = np.exp(-np.abs(tau) / tc)
        return e, e * np.abs(tau) / tc ** 2
    lo = tau - width / 2
    hi = tau + width / 2
    alo, ahi = np.abs(lo), np.abs(hi)
    elo, ehi = np.exp(-alo / tc), np.exp(-ahi / tc)
    straddle = (lo < 0) & (hi > 0)
    # one-sided bins: |lo| and |hi| ordered by distance from zero
    near = np.minimum(alo, ahi)
    far = np.maximum(alo, ahi)
    enear, efar = np.exp(-near / tc), np.exp(-far / tc)
    E_side = tc / width * (enear - efar)
    dE_side = E_side / tc + (near * enear - far * efar) / (width * tc)
    E_mid = tc / width * (2.0 - elo - ehi)
    dE_mid = E_mid / tc - (alo * elo + ahi * ehi) / (width * tc)
    return np.where(straddle, E_mid, E_side), np.where(straddle, dE_mid, dE_side)


@lru_cache(maxsize=None)
def antibunching(bin_width: float = 0.0) -> Model:
    """g2(tau) = 1 - (1 - g2_0) exp(-|tau|/tau_c), averaged over histogram bins."""

    def f(x, p):
        g0, tc = p
        E, _ = _bin_mean_exp(x, tc, bin_width)
        return 1.0 - (1.0 - g0) * E

    def jac(x, p):
        g0, tc = p
        E, dE = _bin_mean_exp(x, tc, bin_width)
        return np.column_stack([E, -(1.0 - g0) * dE])

    return Model("antibunching", ("g2_0", "tau_c"), f, jac, positive=("tau_c",))


ALL_MODELS = {
    "lorentzian": LORENTZIAN,
    "exponential_decay": EXP_DECAY,
    "saturation": SATURATION,
    "power_broadening": POWER_BROADENING,
    "double_gaussian": DOUBLE_GAUSSIAN,
    "gaussian": GAUSSIAN,
    "quadratic": QUADRATIC,
}
