"""HBT analysis: start-stop histogram, normalisation, background correction, g2(0) fit.

Start-stop histogram
    Positive tau: each channel-1 photon starts a clock stopped by the next
    channel-2 photon.  Negative tau: the time-reversed pairing (channel-2 start,
    next channel-1 stop).  Bin count is odd so tau=0 sits on a bin center.

Normalisation
    g2_norm = W(tau) / <W>_far.  The consistency value C = N1 N2 dt T is
    reported alongside.  Start-stop pairing under-counts long delays because an
    intervening stop photon ends the clock early; with Poissonian stops the
    survival is exp(-N_stop |tau|), which we divide out before normalising.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fitting import FitError, antibunching, least_squares
from .photons import TimeTagStream

log = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 512e-12
DEFAULT_TAU_MAX = 100e-9
DEFAULT_FAR_WINDOW = (30e-9, 100e-9)
PAIR_RATE_WARN = 0.05


class EmptyHistogramError(ValueError):
    pass


class ChannelError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class OutOfModelError(ValueError):
    """g2(0) >= 1: super-Poissonian light, not described by n emitters."""


class HighRateWarning(UserWarning):
    pass


@dataclass
class WaitingTimeHistogram:
    bin_width: float
    counts: np.ndarray
    n1: float  # channel-1 rate, counts/s
    n2: float
    total_time: float
    n_pairs_out_of_range: int = 0

    @property
    def n_half(self) -> int:
        return (self.counts.size - 1) // 2

    @property
    def tau(self) -> np.ndarray:
        return (np.arange(self.counts.size) - self.n_half) * self.bin_width

    @property
    def tau_max(self) -> float:
        return self.n_half * self.bin_width

    @property
    def n_pairs(self) -> int:
        return int(self.counts.sum())

    def scaled(self, factor: float) -> "WaitingTimeHistogram":
        return WaitingTimeHistogram(self.bin_width, self.counts * factor, self.n1, self.n2,
                                    self.total_time, self.n_pairs_out_of_range)

    def merge(self, other: "WaitingTimeHistogram") -> "WaitingTimeHistogram":
        if other.bin_width != self.bin_width or other.counts.size != self.counts.size:
            raise ValueError("incompatible histograms")
        T = self.total_time + other.total_time
        return WaitingTimeHistogram(self.bin_width, self.counts + other.counts,
                                    (self.n1 * self.total_time + other.n1 * other.total_time) / T,
                                    (self.n2 * self.total_time + other.n2 * other.total_time) / T,
                                    T, self.n_pairs_out_of_range + other.n_pairs_out_of_range)


def _next_delays(starts: np.ndarray, stops: np.ndarray) -> np.ndarray:
    """Delay from each start to the first stop strictly after it (inf if none)."""
    idx = np.searchsorted(stops, starts, side="right")
    d = np.full(starts.size, np.inf)
    ok = idx < stops.size
    d[ok] = stops[idx[ok]] - starts[ok]
    return d


class WaitingTimeAccumulator:
    """Streaming start-stop histogram over time-ordered chunks."""

    def __init__(self, bin_width: float = DEFAULT_BIN_WIDTH, tau_max: float = DEFAULT_TAU_MAX):
        if bin_width <= 0 or tau_max <= 0:
            raise ValueError("bin_width and tau_max must be > 0")
        self.bin_width = bin_width
        self.n_half = int(round(tau_max / bin_width))
        self.edge = (self.n_half + 0.5) * bin_width
        self.counts = np.zeros(2 * self.n_half + 1, dtype=np.int64)
        self.out_of_range = 0
        self.n_ch = {1: 0, 2: 0}
        self._carry_t = np.empty(0)
        self._carry_c = np.empty(0, np.uint8)
        # ready starts whose stop has not arrived yet; any later stop puts them out of range
        self._pending = {1: 0, 2: 0}

    def _pair(self, t, c, start_mask):
        t1, t2 = t[c == 1], t[c == 2]
        s1 = start_mask[c == 1]
        s2 = start_mask[c == 2]
        pos = _next_delays(t1[s1], t2)
        neg = _next_delays(t2[s2], t1)
        for d, sign, ch in ((pos, 1, 1), (neg, -1, 2)):
            fin = np.isfinite(d)
            self._pending[ch] += int(np.count_nonzero(~fin))
            inr = fin & (d < self.edge)
            self.out_of_range += int(np.count_nonzero(fin & ~inr))
            k = np.floor(d[inr] / self.bin_width + 0.5).astype(np.int64)
            np.add.at(self.counts, self.n_half + sign * k, 1)

    def add(self, times: np.ndarray, channels: np.ndarray):
        times = np.asarray(times, dtype=float)
        channels = np.asarray(channels, dtype=np.uint8)
        for ch in (1, 2):
            self.n_ch[ch] += int(np.count_nonzero(channels == ch))
        for start, stop in ((1, 2), (2, 1)):
            if self._pending[start] and np.any(channels == stop):
                self.out_of_range += self._pending[start]
                self._pending[start] = 0
        t = np.concatenate([self._carry_t, times])
        c = np.concatenate([self._carry_c, channels])
        if t.size == 0:
            return
        cutoff = t[-1] - self.edge
        ready = t < cutoff
        self._pair(t, c, ready)
        self._carry_t, self._carry_c = t[~ready], c[~ready]

    def finalize(self, total_time: float) -> WaitingTimeHistogram:
        if self._carry_t.size:
            self._pair(self._carry_t, self._carry_c, np.ones(self._carry_t.size, bool))
            self._carry_t = np.empty(0)
            self._carry_c = np.empty(0, np.uint8)
        if self.n_ch[1] == 0 or self.n_ch[2] == 0:
            raise ChannelError("two channels required")
        if self.counts.sum() == 0:
            raise EmptyHistogramError("no start-stop pairs within tau_max")
        n1, n2 = self.n_ch[1] / total_time, self.n_ch[2] / total_time
        tau_max = self.n_half * self.bin_width
        if max(n1, n2) * tau_max > PAIR_RATE_WARN:
            warnings.warn(f"stop rate x tau_max = {max(n1, n2) * tau_max:.3f} > {PAIR_RATE_WARN}: "
                          "start-stop histogram departs from the correlation function",
                          HighRateWarning, stacklevel=2)
        return WaitingTimeHistogram(self.bin_width, self.counts.copy(), n1, n2, total_time,
                                    self.out_of_range)


def histogram_waiting_times(stream: TimeTagStream, bin_width: float = DEFAULT_BIN_WIDTH,
                            tau_max: float = DEFAULT_TAU_MAX) -> WaitingTimeHistogram:
    if stream.times.size == 0:
        raise EmptyHistogramError("empty stream")
    if np.count_nonzero(stream.channels == 1) == 0 or np.count_nonzero(stream.channels == 2) == 0:
        raise ChannelError("two channels required")
    acc = WaitingTimeAccumulator(bin_width, tau_max)
    acc.add(stream.times, stream.channels)
    return acc.finalize(stream.duration)


@dataclass
class Normalization:
    g2_norm: np.ndarray
    w_far: float
    C: float
    sigma: np.ndarray  # 1 sigma of g2_norm from Poisson counts

    @property
    def w_far_over_C(self) -> float:
        return self.w_far / self.C if self.C > 0 else math.nan


def pileup_factor(hist: WaitingTimeHistogram) -> np.ndarray:
    tau = hist.tau
    return np.where(tau >= 0, np.exp(hist.n2 * tau), np.exp(-hist.n1 * tau))


def normalize_g2(hist: WaitingTimeHistogram, far_window=DEFAULT_FAR_WINDOW,
                 pileup_correction: bool = True) -> Normalization:
    lo, hi = far_window
    tau = hist.tau
    W = np.asarray(hist.counts, dtype=float)
    corr = pileup_factor(hist) if pileup_correction else np.ones_like(W)
    Wc = W * corr
    far = (np.abs(tau) >= lo) & (np.abs(tau) <= hi)
    if not np.any(far):
        raise NormalizationError(f"far window {far_window} contains no bins")
    if W[far].sum() < 100:
        log.warning("far window holds only %d counts", int(W[far].sum()))
    w_far = float(Wc[far].mean())
    if w_far <= 0:
        raise NormalizationError("far-window mean is zero")
    C = hist.n1 * hist.n2 * hist.bin_width * hist.total_time
    sigma = np.sqrt(np.maximum(W, 1.0)) * corr / w_far
    return Normalization(Wc / w_far, w_far, C, sigma)


def correct_background(g2_norm, rho: float):
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must be in (0, 1]")
    return (np.asarray(g2_norm, dtype=float) - (1.0 - rho ** 2)) / rho ** 2


def dilute(g2, rho: float):
    """Forward model of uncorrelated background: inverse of :func:`correct_background`."""
    return rho ** 2 * np.asarray(g2, dtype=float) + 1.0 - rho ** 2


def fit_antibunching(g2_corr, tau, sigma=None, bin_width: float | None = None,
                     tau_c_guess: float | None = None, fit_range: float | None = None):
    """Fit 1 - (1 - g2_0) exp(-|tau|/tau_c), averaged over each histogram bin."""
    g = np.asarray(g2_corr, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if bin_width is None:
        bin_width = float(np.median(np.diff(tau))) if tau.size > 1 else 0.0
    centre = np.abs(tau) <= max(bin_width, 1e-15)
    g0 = float(np.clip(np.mean(g[centre]), 0.0, 0.95)) if np.any(centre) else 0.5
    if tau_c_guess is None:
        # first |tau| where the dip has recovered by 1 - 1/e
        level = 1.0 - (1.0 - g0) / math.e
        order = np.argsort(np.abs(tau))
        above = order[g[order] >= level]
        tau_c_guess = max(float(np.abs(tau[above[0]])), bin_width) if above.size else 1e-9
    if np.count_nonzero(np.abs(tau) < 3 * tau_c_guess) < 10:
        raise FitError("fewer than 10 bins inside |tau| < 3 tau_c; use a finer bin width",
                       {"tau_c_guess": tau_c_guess, "bin_width": bin_width})
    if fit_range is None:
        fit_range = 25 * tau_c_guess
    m = np.abs(tau) <= fit_range
    sig = None if sigma is None else np.asarray(sigma, dtype=float)[m]
    res = least_squares(antibunching(float(bin_width)), [g0, tau_c_guess], tau[m], g[m], sig)
    if not res.converged:
        raise FitError("antibunching fit did not converge",
                       {"residual_norm": res.residual_norm, "params": res.params,
                        "n_iterations": res.n_iterations})
    return res


@dataclass(frozen=True)
class EmitterCount:
    n: int
    raw: float
    more_than_one: bool


def estimate_emitter_count(g2_0: float) -> EmitterCount:
    if g2_0 >= 1.0:
        raise OutOfModelError(f"g2(0) = {g2_0:.3g} >= 1 is not n-emitter antibunching")
    raw = 1.0 / (1.0 - g2_0)
    n = max(1, int(math.floor(raw + 0.5)))
    return EmitterCount(n, raw, g2_0 >= 0.5)


@dataclass
class G2Result:
    tau: np.ndarray
    g2_norm: np.ndarray
    g2_corr: np.ndarray
    rho: float
    g2_0: float
    g2_0_err: float
    tau_c: float
    tau_c_err: float
    n_estimate: int
    n_raw: float
    w_far_over_C: float
    sigma: np.ndarray | None = field(default=None, repr=False)
    histogram: WaitingTimeHistogram | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        return {"rho": self.rho, "g2_0": self.g2_0, "g2_0_err": self.g2_0_err,
                "tau_c_s": self.tau_c, "tau_c_err_s": self.tau_c_err,
                "n_estimate": self.n_estimate, "n_raw": self.n_raw,
                "w_far_over_C": self.w_far_over_C}

    def table(self) -> np.ndarray:
        return np.column_stack([self.tau, self.g2_norm, self.g2_corr])


def analyze_histogram(hist: WaitingTimeHistogram, rho: float = 1.0,
                      far_window=DEFAULT_FAR_WINDOW, pileup_correction: bool = True,
                      tau_c_guess: float | None = None) -> G2Result:
    nrm = normalize_g2(hist, far_window, pileup_correction)
    gc = correct_background(nrm.g2_norm, rho)
    sig = nrm.sigma / rho ** 2
    res = fit_antibunching(gc, hist.tau, sig, hist.bin_width, tau_c_guess)
    g0 = res["g2_0"]
    try:
        cnt = estimate_emitter_count(g0)
        n, raw = cnt.n, cnt.raw
    except OutOfModelError:
        n, raw = 0, math.inf
    return G2Result(hist.tau, nrm.g2_norm, gc, rho, g0, res.err("g2_0"), res["tau_c"],
                    res.err("tau_c"), n, raw, nrm.w_far_over_C, sig, hist)


def analyze_stream(stream: TimeTagStream, rho: float = 1.0, bin_width: float = DEFAULT_BIN_WIDTH,
                   tau_max: float = DEFAULT_TAU_MAX, far_window=DEFAULT_FAR_WINDOW,
                   tau_c_guess: float | None = None) -> G2Result:
    return analyze_histogram(histogram_waiting_times(stream, bin_width, tau_max), rho,
                             far_window, tau_c_guess=tau_c_guess)
