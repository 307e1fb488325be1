"""PLE sweep protocols: saw-tooth laser scans, crf/cr pulse schemes, trace assembly.

Time is discretised into integration bins.  Every dwell starts with dead
(settling) bins; the rest are detection bins whose Poisson counts are summed per
set point.  Line wander is an OU path sampled per bin.  Under repumped schemes
each bin contains thousands of repump pulses, each redrawing the repump offset
from the accumulated environment variance, so within one bin the line is the
Lorentzian convolved with a Gaussian of that variance (a Voigt profile).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import voigt_profile

from .emitter import (
    REPUMP_445_SIGMA_SCALE,
    EmitterModel,
    PillarModel,
    accumulate_repump_variance,
    initial_state,
    ionization_rate,
    ou_path,
    repump_leak,
    telegraph_path,
)
from .physics import lorentzian, power_broadened_fwhm, saturation_rate

DEFAULT_PLE_POWER_NW = 2.3  # P_sat / 10, keeps power broadening at ~5%


class InsufficientDataError(ValueError):
    pass


class Scheme(str, enum.Enum):
    CRF = "crf"
    CR_515 = "cr_515"
    CR_445 = "cr_445"


@dataclass(frozen=True)
class LaserSweepPlan:
    detuning_start: float = -1.0  # GHz
    detuning_end: float = 1.0  # GHz
    n_setpoints: int = 61
    dwell_time: float = 0.2  # s
    integration_bin: float = 0.020  # s
    n_one_way_sweeps: int = 28
    settle_fraction: float = 0.1
    # Laser return/settling overhead at the end of each one-way scan.  Not part
    # of the scan proper; only enters wall-clock bookkeeping and state evolution.
    turnaround_s: float = 0.8
    laser_jitter_mhz: float = 1.0

    def __post_init__(self):
        if self.n_setpoints < 2:
            raise ValueError("n_setpoints must be >= 2")
        if self.integration_bin <= 0 or self.integration_bin > self.dwell_time:
            raise ValueError("integration_bin must be in (0, dwell_time]")
        if not 0.0 <= self.settle_fraction < 1.0:
            raise ValueError("settle_fraction must be in [0, 1)")
        if self.n_one_way_sweeps < 1:
            raise ValueError("n_one_way_sweeps must be >= 1")
        if self.detuning_end <= self.detuning_start:
            raise ValueError("detuning_end must exceed detuning_start")
        if self.turnaround_s < 0 or self.laser_jitter_mhz < 0:
            raise ValueError("turnaround_s and laser_jitter_mhz must be >= 0")
        if self.detection_bins_per_dwell < 1:
            raise ValueError("settle_fraction leaves no detection bin")

    @property
    def detunings(self) -> np.ndarray:
        """Set points in Hz, ascending."""
        return np.linspace(self.detuning_start, self.detuning_end, self.n_setpoints) * 1e9

    @property
    def one_way_duration(self) -> float:
        return self.n_setpoints * self.dwell_time

    @property
    def one_way_wall_time(self) -> float:
        return self.one_way_duration + self.turnaround_s

    @property
    def back_and_forth_time(self) -> float:
        return 2 * self.one_way_wall_time

    @property
    def total_wall_time(self) -> float:
        return self.n_one_way_sweeps * self.one_way_wall_time

    @property
    def bins_per_dwell(self) -> int:
        return max(1, int(round(self.dwell_time / self.integration_bin)))

    @property
    def dead_bins_per_dwell(self) -> int:
        return int(math.ceil(self.settle_fraction * self.dwell_time / self.integration_bin - 1e-9))

    @property
    def detection_bins_per_dwell(self) -> int:
        return self.bins_per_dwell - self.dead_bins_per_dwell

    @property
    def turnaround_bins(self) -> int:
        return int(round(self.turnaround_s / self.integration_bin))


@dataclass(frozen=True)
class PulseSequenceSpec:
    scheme: Scheme = Scheme.CRF
    repump_length: float = 1e-6  # s
    resonant_window: float = 7e-6  # s

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.repump_length <= 0 or self.resonant_window <= 0:
            raise ValueError("pulse lengths must be > 0")

    @property
    def repumped(self) -> bool:
        return self.scheme is not Scheme.CRF

    @property
    def repump_wavelength_tag(self) -> int | None:
        return {Scheme.CR_515: 515, Scheme.CR_445: 445}.get(self.scheme)

    @property
    def cycle_time(self) -> float:
        return self.repump_length + self.resonant_window

    @property
    def duty_factor(self) -> float:
        """Fraction of wall time with resonant light on and detection open."""
        return self.resonant_window / self.cycle_time if self.repumped else 1.0

    def cycles_per_bin(self, integration_bin: float) -> float:
        return integration_bin / self.cycle_time if self.repumped else 0.0

    @property
    def jump_scale(self) -> float:
        return REPUMP_445_SIGMA_SCALE if self.scheme is Scheme.CR_445 else 1.0


@dataclass
class PLETrace:
    """Counts per (one-way sweep, set point).

    Columns follow ``detunings`` (ascending).  Row ``r`` was acquired in
    direction ``directions[r]`` (+1 ascending, -1 descending).
    """

    counts: np.ndarray
    detunings: np.ndarray  # Hz
    plan: LaserSweepPlan
    scheme: PulseSequenceSpec
    laser_power: float = DEFAULT_PLE_POWER_NW
    wall_time_per_point: float = 0.2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.detunings = np.asarray(self.detunings, dtype=float)
        if self.counts.ndim != 2 or self.counts.shape[1] != self.detunings.size:
            raise ValueError("counts must be (n_rows, n_setpoints)")
        if np.any(self.counts < 0):
            raise ValueError("counts must be >= 0")

    @property
    def n_rows(self) -> int:
        return self.counts.shape[0]

    @property
    def directions(self) -> np.ndarray:
        return np.where(np.arange(self.n_rows) % 2 == 0, 1, -1)

    def acquisition_order(self, row: int) -> np.ndarray:
        """Counts of one row in the order the laser visited them."""
        c = self.counts[row]
        return c if self.directions[row] > 0 else c[::-1]

    @property
    def duration(self) -> float:
        return self.n_rows * self.plan.one_way_wall_time

    @property
    def detection_time_per_point(self) -> float:
        p = self.plan
        return p.detection_bins_per_dwell * p.integration_bin * self.scheme.duty_factor


def _bin_timeline(plan: LaserSweepPlan):
    """Per-bin set-point index (-1 for dead bins) for the whole trace."""
    n, bpd, dead = plan.n_setpoints, plan.bins_per_dwell, plan.dead_bins_per_dwell
    within = np.tile(np.arange(bpd), n)
    sp = np.repeat(np.arange(n), bpd)
    sp = np.where(within < dead, -1, sp)
    rows = []
    for r in range(plan.n_one_way_sweeps):
        order = sp if r % 2 == 0 else np.where(sp < 0, -1, n - 1 - sp)
        rows.append(np.concatenate([order, np.full(plan.turnaround_bins, -1)]))
    return np.stack(rows)


def _occupancy(edges: np.ndarray, switches: np.ndarray, negative0: bool) -> np.ndarray:
    """Fraction of each [edges[i], edges[i+1]) spent in the negative state."""
    if switches.size == 0:
        return np.full(edges.size - 1, 1.0 if negative0 else 0.0)
    # cumulative negative time at the switch points
    pts = np.concatenate([[0.0], switches])
    state = np.arange(pts.size) % 2 == 0
    if not negative0:
        state = ~state
    seg = np.diff(np.concatenate([pts, [np.inf]]))
    cum = np.concatenate([[0.0], np.cumsum(np.where(state, seg, 0.0))[:-1]])
    k = np.searchsorted(pts, edges, side="right") - 1
    F = cum[k] + np.where(state[k], edges - pts[k], 0.0)
    return np.diff(F) / np.diff(edges)


def _emitter_bin_rates(e: EmitterModel, det_hz: np.ndarray, t_edges: np.ndarray,
                       plan: LaserSweepPlan, scheme: PulseSequenceSpec, power: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Mean signal rate (counts/s of open detection) of one emitter per bin."""
    tr = e.transition
    n_bins = det_hz.size
    dt = plan.integration_bin
    d = e.diffusion
    ou = ou_path(initial_state(e, rng).ou_offset, n_bins, dt, d.ou_sigma * 1e6,
                 d.ou_correlation_time, rng)
    fwhm = power_broadened_fwhm(power, tr.natural_fwhm, tr.resonant_saturation_power)
    x = det_hz - e.static_detuning - ou
    peak = saturation_rate(power, tr)

    sj = d.repump_jump_sigma * 1e6 * scheme.jump_scale
    if scheme.repumped and sj > 0 and not e.charge.stabilized:
        cyc = scheme.cycles_per_bin(dt)
        var = accumulate_repump_variance(0.0, cyc * np.arange(1, n_bins + 1), sj,
                                         repump_leak(scheme.repump_wavelength_tag))
        sig = np.sqrt(var)
        hw = fwhm / 2
        prof = math.pi * hw * voigt_profile(x, sig, hw)
    else:
        prof = lorentzian(x, fwhm)

    k_i = ionization_rate(e, power) * scheme.duty_factor
    k_r = e.charge.recovery_rate_dark
    if scheme.repumped:
        k_r += e.charge.repump_recovery_prob / scheme.cycle_time
    if k_i > 0:
        switches, neg0 = telegraph_path(True, t_edges[-1], k_i, k_r, rng)
        occ = _occupancy(t_edges, switches, neg0)
    else:
        occ = 1.0
    return peak * prof * occ


def run_ple(pillar: PillarModel, plan: LaserSweepPlan, scheme: PulseSequenceSpec,
            laser_power: float, rng: np.random.Generator) -> PLETrace:
    if laser_power < 0:
        raise ValueError("laser_power must be >= 0")
    timeline = _bin_timeline(plan).ravel()
    n_bins = timeline.size
    dt = plan.integration_bin
    t_edges = np.arange(n_bins + 1) * dt
    live = timeline >= 0
    grid = plan.detunings
    det = np.where(live, grid[np.maximum(timeline, 0)], 0.0)
    if plan.laser_jitter_mhz > 0:
        det = det + rng.normal(0.0, plan.laser_jitter_mhz * 1e6, n_bins)

    rate = np.full(n_bins, float(pillar.background.rate(laser_power)))
    children = rng.spawn(len(pillar.emitters) + 1)
    for e, r in zip(pillar.emitters, children[:-1]):
        rate += _emitter_bin_rates(e, det, t_edges, plan, scheme, laser_power, r)
    mu = rate * dt * scheme.duty_factor
    counts_bin = children[-1].poisson(np.where(live, mu, 0.0))

    n_rows = plan.n_one_way_sweeps
    row_of_bin = np.repeat(np.arange(n_rows), timeline.size // n_rows)
    counts = np.zeros((n_rows, plan.n_setpoints), dtype=np.int64)
    np.add.at(counts, (row_of_bin[live], timeline[live]), counts_bin[live])
    meta = {"n_emitters": len(pillar.emitters), "duration_s": n_rows * plan.one_way_wall_time}
    return PLETrace(counts, grid, plan, scheme, laser_power, plan.dwell_time, meta)


@dataclass
class Spectrum:
    detunings: np.ndarray  # Hz
    values: np.ndarray  # mean counts per set point
    std_error: np.ndarray | None = None


def assemble_single_sweeps(trace: PLETrace, overlapping: bool = False) -> list[Spectrum]:
    """Single sweeps: per-detuning means of four consecutive one-way rows."""
    n = trace.n_rows
    if n < 4:
        raise InsufficientDataError(f"need >= 4 one-way sweeps, got {n}")
    c = trace.counts.astype(float)
    starts = range(0, n - 3) if overlapping else range(0, 4 * (n // 4), 4)
    return [Spectrum(trace.detunings, c[s:s + 4].mean(axis=0)) for s in starts]


def average_spectrum(sweeps: list[Spectrum], k: int) -> Spectrum:
    if not 1 <= k <= len(sweeps):
        raise ValueError(f"k must be in [1, {len(sweeps)}]")
    v = np.stack([s.values for s in sweeps[:k]])
    se = v.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.zeros(v.shape[1])
    return Spectrum(sweeps[0].detunings, v.mean(axis=0), se)
