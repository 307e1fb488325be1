"""Data-driven initialisation and the fits used across the analysis chain."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from .core import FitError, FitResult, least_squares
from .models import (
    DOUBLE_GAUSSIAN,
    EXP_DECAY,
    GAUSSIAN,
    LORENTZIAN,
    POWER_BROADENING,
    SATURATION,
    multi_lorentzian,
)


class NoPeakError(FitError):
    """No resonance stands out of the baseline noise."""


class SeedingError(FitError):
    """Fewer peaks were found than requested."""


class IllConditionedWarning(UserWarning):
    pass


def poisson_sigma(y) -> np.ndarray:
    return np.sqrt(np.maximum(np.asarray(y, dtype=float), 1.0))


def _outer(x, y):
    """Points in the first and last quarter of the x range."""
    lo, hi = np.min(x), np.max(x)
    q = (hi - lo) / 4
    m = (x <= lo + q) | (x >= hi - q)
    return y[m]


def _baseline(x, y, sigma):
    outer = _outer(x, y)
    offset = float(np.median(outer))
    if sigma is not None:
        noise = float(np.median(sigma))
    else:
        noise = 1.4826 * float(np.median(np.abs(outer - offset)))
    return offset, noise


def _half_max_width(x, y, i_peak, level):
    """Width at ``level`` around ``i_peak`` by linear interpolation."""

    def cross(step):
        i = i_peak
        while 0 <= i + step < len(y) and y[i + step] > level:
            i += step
        j = i + step
        if not 0 <= j < len(y):
            return x[i]
        y0, y1 = y[i], y[j]
        frac = (y0 - level) / (y0 - y1) if y0 != y1 else 0.0
        return x[i] + frac * (x[j] - x[i])

    return abs(cross(+1) - cross(-1))


def lorentzian_guess(x, y, sigma=None) -> tuple[list[float], float]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(x)
    x, y = x[order], y[order]
    offset, noise = _baseline(x, y, None if sigma is None else np.asarray(sigma)[order])
    i = int(np.argmax(y))
    amp = y[i] - offset
    step = float(np.median(np.diff(x)))
    width = _half_max_width(x, y, i, offset + amp / 2)
    width = max(width, step)
    return [x[i], width, amp, offset], noise


def fit_lorentzian(x, y, sigma=None, detect_sigma: float = 3.0) -> FitResult:
    """Single Lorentzian; raises :class:`NoPeakError` for flat spectra."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 8:
        raise FitError("need at least 8 points")
    p0, noise = lorentzian_guess(x, y, sigma)
    if p0[2] <= detect_sigma * noise:
        raise NoPeakError(f"peak {p0[2]:.3g} below {detect_sigma} sigma of baseline noise {noise:.3g}",
                          {"peak": p0[2], "noise": noise})
    res = least_squares(LORENTZIAN, p0, x, y, sigma)
    span = np.ptp(x)
    step = float(np.median(np.abs(np.diff(np.sort(x)))))
    c, w, a = res["center"], res["fwhm"], res["amplitude"]
    if not (res.converged and a > 0 and x.min() <= c <= x.max() and step / 2 <= w <= 2 * span):
        raise NoPeakError("fit did not yield a resolved resonance",
                          {"params": res.params, "converged": res.converged})
    return res


def fit_multi_lorentzian(x, y, n_peaks: int, sigma=None, detect_sigma: float = 3.0) -> FitResult:
    if n_peaks < 1:
        raise ValueError("n_peaks must be >= 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if n_peaks == 1:
        r = fit_lorentzian(x, y, sigma, detect_sigma)
        ren = {"center": "center_1", "fwhm": "fwhm_1", "amplitude": "amplitude_1", "offset": "offset"}
        return FitResult({ren[k]: v for k, v in r.params.items()},
                         {ren[k]: v for k, v in r.uncertainties.items()},
                         r.residual_norm, r.converged, r.n_iterations, "multi_lorentzian_1",
                         r.chi2_red, r.covariance, r.extras)
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    offset, noise = _baseline(xs, ys, None if sigma is None else np.asarray(sigma)[order])
    peaks, props = signal.find_peaks(ys, prominence=detect_sigma * max(noise, 1e-300))
    if len(peaks) < n_peaks:
        raise SeedingError(f"found {len(peaks)} peaks, need {n_peaks}",
                           {"found_centers": xs[peaks].tolist()})
    top = peaks[np.argsort(props["prominences"])[::-1][:n_peaks]]
    top = np.sort(top)
    widths = signal.peak_widths(ys, top, rel_height=0.5)[0] * float(np.median(np.diff(xs)))
    p0 = []
    for i, w in zip(top, widths):
        p0 += [xs[i], max(w, float(np.median(np.diff(xs)))), ys[i] - offset]
    p0.append(offset)
    res = least_squares(multi_lorentzian(n_peaks), p0, x, y, sigma)
    # report peaks by ascending center
    cs = [res[f"center_{i}"] for i in range(1, n_peaks + 1)]
    perm = np.argsort(cs)
    params, errs = {}, {}
    for new, old in enumerate(perm, start=1):
        for k in ("center", "fwhm", "amplitude"):
            params[f"{k}_{new}"] = res.params[f"{k}_{old + 1}"]
            errs[f"{k}_{new}"] = res.uncertainties[f"{k}_{old + 1}"]
    params["offset"] = res.params["offset"]
    errs["offset"] = res.uncertainties["offset"]
    res.params, res.uncertainties = params, errs
    return res


def fit_exponential_decay(t, counts, tail_fraction: float = 0.1) -> FitResult:
    """Fit ``A exp(-t/tau) + b`` from the histogram peak onwards.

    ``t`` in seconds; ``tau_r`` is reported in ns.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(counts, dtype=float)
    i0 = int(np.argmax(y))
    tt = (t[i0:] - t[i0]) * 1e9
    yy = y[i0:]
    if tt.size < 8:
        raise FitError("decay window too short")
    n_tail = max(3, int(tail_fraction * tt.size))
    b0 = float(np.median(yy[-n_tail:]))
    a0 = float(yy[0] - b0)
    if a0 <= 0:
        raise FitError("no decay above the background floor")
    below = np.flatnonzero(yy - b0 < a0 / math.e)
    tau0 = float(tt[below[0]]) if below.size and tt[below[0]] > 0 else float(tt[-1] / 10)
    res = least_squares(EXP_DECAY, [tau0, a0, b0], tt, yy, poisson_sigma(yy))
    if not res["tau_r"] > 0 or not res.converged:
        raise FitError("non-positive or unconverged lifetime", {"params": res.params})
    res.extras["window_start_s"] = float(t[i0])
    return res


class SaturationFit(FitResult):
    """Saturation fit with S(P), B(P) and rho(P) evaluators."""

    def S(self, P):
        return self["I_max"] * np.asarray(P, dtype=float) / (np.asarray(P, dtype=float) + self["P_sat"])

    def B(self, P):
        return self["bg_slope"] * np.asarray(P, dtype=float)

    def rho(self, P):
        s, b = self.S(P), self.B(P)
        return s / (s + b)


def fit_saturation(P, rate, sigma=None) -> SaturationFit:
    P = np.asarray(P, dtype=float)
    r = np.asarray(rate, dtype=float)
    if P.size < 5:
        raise FitError("need at least 5 powers")
    if sigma is None:
        sigma = poisson_sigma(r)
    # initial guess: linear term from the two highest powers, then a P/(P+Ps) shape
    order = np.argsort(P)
    Ps0 = float(np.median(P))
    beta0 = 0.0
    i_max0 = float(np.max(r)) * (P[order[-1]] + Ps0) / max(P[order[-1]], 1e-300)
    res = least_squares(SATURATION, [i_max0, Ps0, beta0], P, r, sigma)
    ps = res["P_sat"]
    if P.max() < ps / 3 or P.min() > 3 * ps:
        warnings.warn("powers do not bracket P_sat; saturation parameters are ill-conditioned",
                      IllConditionedWarning, stacklevel=2)
    out = SaturationFit(**{k: getattr(res, k) for k in
                           ("params", "uncertainties", "residual_norm", "converged", "n_iterations",
                            "model", "chi2_red", "covariance", "extras")})
    return out


def fit_power_broadening(P, fwhm, sigma=None) -> FitResult:
    P = np.asarray(P, dtype=float)
    w = np.asarray(fwhm, dtype=float)
    if np.unique(P).size < 2:
        raise FitError("linewidth vs power needs at least two distinct powers (unidentifiable)")
    if P.size < 4:
        raise FitError("need at least 4 powers")
    slope = stats.spearmanr(P, w).statistic if np.unique(w).size > 1 else 0.0
    if not slope > 0:
        raise FitError("linewidth does not increase with power", {"spearman": float(slope)})
    order = np.argsort(P)
    f0 = float(w[order[0]])
    ratio2 = (w[order[-1]] / f0) ** 2 - 1.0
    ps0 = float(P[order[-1]] / ratio2) if ratio2 > 0 else float(np.median(P))
    res = least_squares(POWER_BROADENING, [f0, ps0], P, w, sigma)
    if not res.converged:
        raise FitError("power-broadening fit did not converge", {"params": res.params})
    return res


def fit_double_gaussian(depth, density, overlap_tol: float = 0.25) -> FitResult:
    """Two-Gaussian fit; component 1 is the dominant (larger area) one.

    Collapses to a single Gaussian with a warning when the components are
    indistinguishable.
    """
    x = np.asarray(depth, dtype=float)
    y = np.asarray(density, dtype=float)
    if x.size < 12:
        raise FitError("need at least 12 profile points")
    if np.any(y < 0):
        raise FitError("densities must be >= 0")
    i = int(np.argmax(y))
    w = _half_max_width(x, y, i, y[i] / 2) / 2.3548
    w = max(w, float(np.median(np.diff(np.sort(x)))))
    p0 = [x[i], w, y[i] * 0.8, x[i] + w, 2 * w, y[i] * 0.2]
    res = least_squares(DOUBLE_GAUSSIAN, p0, x, y)
    p = res.params
    area1 = p["amplitude_1"] * p["sigma_1"]
    area2 = p["amplitude_2"] * p["sigma_2"]
    small = min(area1, area2) < 1e-3 * max(area1, area2)
    same = (abs(p["mean_1"] - p["mean_2"]) < overlap_tol * min(p["sigma_1"], p["sigma_2"])
            and abs(p["sigma_1"] - p["sigma_2"]) < overlap_tol * min(p["sigma_1"], p["sigma_2"]))
    if small or same or not res.converged:
        warnings.warn("double Gaussian components are degenerate; collapsing to one Gaussian",
                      stacklevel=2)
        single = least_squares(GAUSSIAN, [x[i], w, y[i]], x, y)
        params = dict(single.params, mean_2=single["mean_1"], sigma_2=single["sigma_1"], amplitude_2=0.0)
        errs = dict(single.uncertainties, mean_2=0.0, sigma_2=0.0, amplitude_2=0.0)
        out = FitResult(params, errs, single.residual_norm, single.converged, single.n_iterations,
                        "double_gaussian", single.chi2_red, None, {"collapsed": True})
    else:
        if area2 > area1:
            swap = {"mean_1": "mean_2", "sigma_1": "sigma_2", "amplitude_1": "amplitude_2",
                    "mean_2": "mean_1", "sigma_2": "sigma_1", "amplitude_2": "amplitude_1"}
            res.params = {k: p[swap[k]] for k in p}
            res.uncertainties = {k: res.uncertainties[swap[k]] for k in p}
        res.extras["collapsed"] = False
        out = res
    out.extras["headline_depth"] = out.params["mean_1"]
    return out


@dataclass
class PoissonFit:
    n_bar: float
    ci_low: float
    ci_high: float
    n_pillars: int
    observed: dict[str, int]
    expected: dict[str, float]
    chi2: float
    confidence: float = 0.95

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_record(self) -> dict:
        return {"n_bar": self.n_bar, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "confidence": self.confidence, "n_pillars": self.n_pillars,
                "observed": self.observed, "expected": self.expected, "chi2": self.chi2}


CATEGORIES = ("0", "1", "2", "3+")


def fit_poisson_mean(counts, confidence: float = 0.95) -> PoissonFit:
    """Closed-form Poisson MLE with an exact (Garwood) confidence interval."""
    c = np.asarray(counts)
    if c.size == 0:
        raise ValueError("no pillars")
    if np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
        raise ValueError("counts must be non-negative integers")
    if c.size < 20:
        warnings.warn("fewer than 20 pillars; interval is very wide", stacklevel=2)
    n = c.size
    k = int(c.sum())
    alpha = 1.0 - confidence
    lo = 0.0 if k == 0 else stats.chi2.ppf(alpha / 2, 2 * k) / 2 / n
    hi = stats.chi2.ppf(1 - alpha / 2, 2 * k + 2) / 2 / n
    n_bar = k / n
    obs = {"0": int(np.sum(c == 0)), "1": int(np.sum(c == 1)), "2": int(np.sum(c == 2)),
           "3+": int(np.sum(c >= 3))}
    pmf = stats.poisson.pmf([0, 1, 2], n_bar) if n_bar > 0 else np.array([1.0, 0.0, 0.0])
    exp = {"0": n * pmf[0], "1": n * pmf[1], "2": n * pmf[2],
           "3+": n * (1.0 - pmf.sum())}
    chi2 = float(sum((obs[key] - exp[key]) ** 2 / exp[key] for key in CATEGORIES if exp[key] > 0))
    return PoissonFit(n_bar, float(lo), float(hi), n, obs, {k_: float(v) for k_, v in exp.items()},
                      chi2, confidence)
