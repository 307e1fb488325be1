"""Photon time-tag synthesis for HBT and lifetime measurements.

Single-emitter photon statistics
--------------------------------
A driven two-level emitter pumped at rate R and decaying at rate G emits a
renewal process whose inter-emission time is Exp(R) + Exp(G).  Detecting each
photon independently with efficiency eta yields again a renewal process, whose
waiting time is Exp(a) + Exp(b) with::

    a + b = R + G,     a * b = eta * R * G

so we can draw *detected* photons directly at two exponentials per photon.  The
autocorrelation is g2(tau) = 1 - exp(-(R + G) |tau|), i.e. tau_c = 1/(R + G),
which reduces to tau_r / (1 + P/P_sat) when R = G * P/P_sat.

Spectral wandering and charge blinking under resonant drive thin the renewal
stream with a probability held constant on a substep grid.

Each source draws random numbers in fixed-size blocks, so a stream is
bit-identical regardless of the chunk size used to consume it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .emitter import (
    EmitterModel,
    PillarModel,
    initial_state,
    ionization_rate,
    line_rate,
    negative_at,
    ou_path,
    telegraph_path,
)
from .physics import saturation_rate

BLOCK = 1 << 16


@dataclass(frozen=True)
class Drive:
    """Excitation used during an HBT acquisition.

    ``mode`` is ``"offresonant"`` (green excitation, keeps the charge state
    negative and is blind to the line position) or ``"resonant"``.
    ``laser_detuning`` (Hz) is relative to the nominal C line.
    """

    power: float = 23.0  # nW
    mode: str = "offresonant"
    laser_detuning: float = 0.0

    def __post_init__(self):
        if self.mode not in ("offresonant", "resonant"):
            raise ValueError(f"unknown drive mode {self.mode!r}")
        if self.power < 0:
            raise ValueError("drive power must be >= 0")


@dataclass
class TimeTagStream:
    times: np.ndarray  # s, sorted
    channels: np.ndarray  # uint8, 1 or 2
    duration: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        if self.times.shape != self.channels.shape:
            raise ValueError("times and channels must have equal length")

    def channel(self, ch: int) -> np.ndarray:
        return self.times[self.channels == ch]

    def rate(self, ch: int) -> float:
        return float(np.count_nonzero(self.channels == ch)) / self.duration

    @property
    def n_channels(self) -> int:
        return len(np.unique(self.channels))


def renewal_rates(emitter: EmitterModel, power: float) -> tuple[float, float]:
    """Rates (a, b) of the detected waiting time Exp(a)+Exp(b), a <= b."""
    tr = emitter.transition
    if power <= 0:
        return 0.0, math.inf
    gamma = 1e9 / tr.excited_state_lifetime
    pump = gamma * power / tr.resonant_saturation_power
    eta = tr.max_signal_rate / gamma
    if eta > 1:
        raise ValueError("max_signal_rate exceeds the radiative rate")
    s = pump + gamma
    p = eta * pump * gamma
    disc = math.sqrt(s * s - 4 * p)
    # small root via the product to avoid cancellation
    b = (s + disc) / 2
    return p / b, b


class _Source:
    """A renewal source with optional thinning, drawn in fixed blocks."""

    def __init__(self, a: float, b: float, rng: np.random.Generator, t0: float):
        self.a, self.b, self.rng = a, b, rng
        self._t = t0
        self._buf_t = np.empty(0)
        self._buf_u = np.empty(0)
        self._buf_v = np.empty(0)

    def _block(self):
        r = self.rng
        w = r.exponential(1.0 / self.a, BLOCK)
        if math.isfinite(self.b):
            w += r.exponential(1.0 / self.b, BLOCK)
        t = self._t + np.cumsum(w)
        self._t = t[-1]
        return t, r.random(BLOCK), r.random(BLOCK)

    def take_until(self, t_end: float):
        """Events before ``t_end`` with their routing and thinning uniforms."""
        if self._buf_t.size == 0 or self._buf_t[-1] < t_end:
            pt, pu, pv = [self._buf_t], [self._buf_u], [self._buf_v]
            last = self._buf_t[-1] if self._buf_t.size else -math.inf
            while last < t_end:
                t, u, v = self._block()
                pt.append(t)
                pu.append(u)
                pv.append(v)
                last = t[-1]
            self._buf_t, self._buf_u, self._buf_v = (np.concatenate(pt), np.concatenate(pu),
                                                     np.concatenate(pv))
        k = np.searchsorted(self._buf_t, t_end, side="left")
        out = self._buf_t[:k], self._buf_u[:k], self._buf_v[:k]
        self._buf_t, self._buf_u, self._buf_v = self._buf_t[k:], self._buf_u[k:], self._buf_v[k:]
        return out


class _WanderTrack:
    """Lazily generated OU center offsets on a uniform substep grid."""

    def __init__(self, emitter: EmitterModel, dt: float, rng: np.random.Generator):
        self.e, self.dt, self.rng = emitter, dt, rng
        d = emitter.diffusion
        self.sigma = d.ou_sigma * 1e6
        self.tau = d.ou_correlation_time
        self.values = np.array([initial_state(emitter, rng).ou_offset])

    def at(self, t: np.ndarray) -> np.ndarray:
        idx = (t / self.dt).astype(np.int64)
        need = int(idx.max()) + 1 if idx.size else 0
        while self.values.size < need:
            more = ou_path(self.values[-1], BLOCK, self.dt, self.sigma, self.tau, self.rng)
            self.values = np.concatenate([self.values, more])
        return self.values[idx]


class PhotonStreamGenerator:
    """Chunked two-channel (50:50) photon stream for one pillar."""

    def __init__(self, pillar: PillarModel, drive: Drive, duration: float,
                 rng: np.random.Generator):
        if duration <= 0:
            raise ValueError("duration must be > 0")
        self.pillar, self.drive, self.duration = pillar, drive, duration
        children = rng.spawn(2 * len(pillar.emitters) + 1)
        self._sources = []
        self._thinners = []
        for i, e in enumerate(pillar.emitters):
            a, b = renewal_rates(e, drive.power)
            if a <= 0:
                continue
            r = children[2 * i]
            # start well before t=0 so the process is stationary at t=0
            src = _Source(a, b, r, -20.0 / a)
            src.take_until(0.0)
            self._sources.append(src)
            self._thinners.append(self._make_thinner(e, children[2 * i + 1]))
        bg = float(pillar.background.rate(drive.power))
        if bg > 0:
            src = _Source(bg, math.inf, children[-1], 0.0)
            self._sources.append(src)
            self._thinners.append(None)

    def _make_thinner(self, e: EmitterModel, rng: np.random.Generator):
        if self.drive.mode == "offresonant":
            return None
        d = e.diffusion
        dt = min(d.ou_correlation_time / 10.0, 1.0)
        k_i = ionization_rate(e, self.drive.power)
        k_r = e.charge.recovery_rate_dark
        switches, neg0 = telegraph_path(True, self.duration, k_i, k_r, rng)
        track = _WanderTrack(e, dt, rng)
        peak = saturation_rate(self.drive.power, e.transition)
        det = self.drive.laser_detuning
        power = self.drive.power

        def keep_prob(t):
            grid_t = (t / dt).astype(np.int64) * dt
            p = line_rate(e, det, power, track.at(t)) / peak
            if switches.size:
                p = np.where(negative_at(grid_t, switches, neg0), p, 0.0)
            return p

        return keep_prob

    def chunks(self, chunk_s: float = 10.0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        t0 = 0.0
        while t0 < self.duration:
            t1 = min(t0 + chunk_s, self.duration)
            ts, chs = [], []
            for src, thin in zip(self._sources, self._thinners):
                t, u, v = src.take_until(t1)
                if thin is not None and t.size:
                    keep = v < thin(t)
                    t, u = t[keep], u[keep]
                ts.append(t)
                chs.append(np.where(u < 0.5, 1, 2).astype(np.uint8))
            t = np.concatenate(ts) if ts else np.empty(0)
            c = np.concatenate(chs) if chs else np.empty(0, np.uint8)
            order = np.argsort(t, kind="stable")
            yield t[order], c[order]
            t0 = t1


def generate_photon_stream(pillar: PillarModel, drive: Drive, duration: float,
                           rng: np.random.Generator, chunk_s: float = 10.0,
                           meta: dict | None = None) -> TimeTagStream:
    gen = PhotonStreamGenerator(pillar, drive, duration, rng)
    parts = list(gen.chunks(chunk_s))
    times = np.concatenate([p[0] for p in parts]) if parts else np.empty(0)
    chans = np.concatenate([p[1] for p in parts]) if parts else np.empty(0, np.uint8)
    m = {"drive_power_nW": drive.power, "drive_mode": drive.mode,
         "laser_detuning_Hz": drive.laser_detuning, "n_emitters": len(pillar.emitters)}
    m.update(meta or {})
    return TimeTagStream(times, chans, duration, m)


@dataclass
class DecayHistogram:
    t: np.ndarray  # s, bin centers
    counts: np.ndarray
    bin_width: float


def simulate_decay(tau_ns: float, n_photons: int, rng: np.random.Generator,
                   irf_sigma_ps: float = 50.0, t_offset_ns: float = 2.0,
                   period_ns: float = 50.0, bin_ps: float = 16.0,
                   background_fraction: float = 0.01) -> DecayHistogram:
    """Pulsed-excitation arrival-delay histogram (TCSPC)."""
    if tau_ns <= 0 or n_photons <= 0:
        raise ValueError("tau_ns and n_photons must be > 0")
    n_bg = rng.binomial(n_photons, background_fraction)
    n_sig = n_photons - n_bg
    d = (t_offset_ns + rng.normal(0.0, irf_sigma_ps * 1e-3, n_sig)
         + rng.exponential(tau_ns, n_sig))
    d = np.mod(d, period_ns)
    d = np.concatenate([d, rng.uniform(0.0, period_ns, n_bg)])
    nb = int(round(period_ns / (bin_ps * 1e-3)))
    edges = np.linspace(0.0, period_ns, nb + 1)
    counts, _ = np.histogram(d, edges)
    centers = 0.5 * (edges[1:] + edges[:-1]) * 1e-9
    return DecayHistogram(centers, counts, bin_ps * 1e-12)


def measure_saturation_curve(pillar: PillarModel, powers, dwell_s: float,
                             rng: np.random.Generator):
    """Detected rate (signal + background) per power, Poisson counted over ``dwell_s``.

    Returns powers, rates and their 1 sigma errors (counts/s).
    """
    P = np.asarray(powers, dtype=float)
    mu = np.array([sum(saturation_rate(p, e.transition) for e in pillar.emitters)
                   + float(pillar.background.rate(p)) for p in P])
    n = rng.poisson(mu * dwell_s)
    return P, n / dwell_s, np.sqrt(np.maximum(n, 1)) / dwell_s
