"""Single-sweep statistics, averaged-linewidth convergence, scheme comparison, survey histograms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fitting import FitError, fit_lorentzian
from .sweep import Spectrum, average_spectrum


class EmptyStatisticsError(ValueError):
    pass


@dataclass
class SweepFit:
    fwhm: float  # MHz
    center: float  # MHz detuning, relative to the mean of fitted centers
    peak_intensity_per_power: float  # counts/s/nW
    fit_ok: bool
    center_abs: float = math.nan  # MHz detuning

    def to_record(self) -> dict:
        return {"fwhm_MHz": self.fwhm, "center_MHz": self.center,
                "peak_intensity_per_power": self.peak_intensity_per_power,
                "fit_ok": self.fit_ok, "center_abs_MHz": self.center_abs}


@dataclass
class SweepStatistics:
    per_sweep: list[SweepFit]
    sigma_center: float  # MHz
    mean_fwhm: float  # MHz
    mean_intensity: float  # counts/s/nW
    off_fraction: float
    convergence_curve: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> list[SweepFit]:
        return [s for s in self.per_sweep if s.fit_ok]

    def to_record(self) -> dict:
        return {"sigma_center_MHz": self.sigma_center, "mean_fwhm_MHz": self.mean_fwhm,
                "mean_intensity": self.mean_intensity, "off_fraction": self.off_fraction,
                "n_sweeps": len(self.per_sweep), "per_sweep": [s.to_record() for s in self.per_sweep],
                "convergence_curve": self.convergence_curve}


def _fit_spectrum(sp: Spectrum):
    return fit_lorentzian(sp.detunings, sp.values)


def per_sweep_statistics(sweeps: list[Spectrum], laser_power: float,
                         detection_time: float = 1.0) -> SweepStatistics:
    """Lorentzian fit of every single sweep.

    ``detection_time`` (s per set point) converts counts to rates; intensities
    are then divided by ``laser_power`` (nW).
    """
    if len(sweeps) < 4:
        raise ValueError("need >= 4 single sweeps")
    if laser_power <= 0 or detection_time <= 0:
        raise ValueError("laser_power and detection_time must be > 0")
    raw = []
    for sp in sweeps:
        try:
            r = _fit_spectrum(sp)
            raw.append((r["fwhm"] / 1e6, r["center"] / 1e6,
                        r["amplitude"] / detection_time / laser_power, True))
        except FitError:
            raw.append((math.nan, math.nan, math.nan, False))
    ok = [r for r in raw if r[3]]
    if not ok:
        raise EmptyStatisticsError("no single sweep could be fitted")
    centers = np.array([r[1] for r in ok])
    c_mean = float(centers.mean())
    per = [SweepFit(f, c - c_mean if good else math.nan, i, good, c)
           for f, c, i, good in raw]
    sigma = float(centers.std(ddof=1)) if centers.size > 1 else 0.0
    return SweepStatistics(per, sigma, float(np.mean([r[0] for r in ok])),
                           float(np.mean([r[2] for r in ok])), 1.0 - len(ok) / len(raw))


def _fwhm_or_nan(sp: Spectrum) -> float:
    try:
        return _fit_spectrum(sp)["fwhm"] / 1e6
    except FitError:
        return math.nan


def convergence_curve(sweeps: list[Spectrum], ks=None, n_resamples: int = 50,
                      rng: np.random.Generator | None = None) -> list[dict]:
    """FWHM (MHz) of the cumulative average of sweeps 1..k, in recorded order.

    ``std_error`` is the spread of the same quantity over random reorderings of
    the sweeps.  Failed fits appear as NaN.
    """
    n = len(sweeps)
    if n < 10:
        raise ValueError("need >= 10 single sweeps")
    ks = list(range(1, n + 1)) if ks is None else [int(k) for k in ks]
    if any(not 1 <= k <= n for k in ks):
        raise ValueError(f"k must be in [1, {n}]")
    rng = np.random.default_rng(0) if rng is None else rng
    vals = np.stack([s.values for s in sweeps])
    det = sweeps[0].detunings
    boot = np.full((n_resamples, len(ks)), np.nan)
    for b in range(n_resamples):
        cum = np.cumsum(vals[rng.permutation(n)], axis=0)
        for j, k in enumerate(ks):
            boot[b, j] = _fwhm_or_nan(Spectrum(det, cum[k - 1] / k))
    out = []
    for j, k in enumerate(ks):
        f = _fwhm_or_nan(average_spectrum(sweeps, k))
        col = boot[:, j][np.isfinite(boot[:, j])]
        se = float(col.std(ddof=1)) if col.size > 1 else math.nan
        out.append({"k": k, "fwhm": f, "std_error": se})
    return out


def _side(x: float, y: float) -> str:
    if y == x:
        return "on"
    return "above" if y > x else "below"


def compare_schemes(stats_crf: SweepStatistics, stats_cr: SweepStatistics,
                    population: str = "") -> dict:
    """Paired point for the y = x scatter plots (x: cr-PLE, y: crf-PLE)."""
    return {"population": str(population),
            "sigma_center_cr": stats_cr.sigma_center, "sigma_center_crf": stats_crf.sigma_center,
            "intensity_cr": stats_cr.mean_intensity, "intensity_crf": stats_crf.mean_intensity,
            "sigma_side": _side(stats_cr.sigma_center, stats_crf.sigma_center),
            "intensity_side": _side(stats_cr.mean_intensity, stats_crf.mean_intensity)}


def histogram(values, bin_width: float | None = None) -> dict:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise EmptyStatisticsError("no values to histogram")
    if bin_width is not None:
        if bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        lo = math.floor(v.min() / bin_width) * bin_width
        nb = max(1, int(math.ceil((v.max() - lo) / bin_width + 1e-12)))
        edges = lo + bin_width * np.arange(nb + 1)
    elif v.size == 1 or np.ptp(v) == 0:
        edges = np.array([v[0] - 0.5, v[0] + 0.5])
    else:
        edges = np.histogram_bin_edges(v, bins="fd")
    counts, edges = np.histogram(v, edges)
    return {"edges": edges, "counts": counts, "mean": float(v.mean()),
            "std": float(v.std(ddof=1)) if v.size > 1 else 0.0, "n": int(v.size)}


def survey_histograms(fits: list[dict], position_bin: float | None = None,
                      fwhm_bin: float | None = None) -> dict:
    ok = [f for f in fits if f.get("fit_ok", True)]
    if not ok:
        raise EmptyStatisticsError("no fitted spectra")
    return {"zpl_position": histogram([f["position_nm"] for f in ok], position_bin),
            "zpl_fwhm": histogram([f["fwhm_nm"] for f in ok], fwhm_bin)}


def histogram_table(h: dict) -> np.ndarray:
    e = h["edges"]
    return np.column_stack([e[:-1], e[1:], h["counts"]])
