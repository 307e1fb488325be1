"""Experiment configuration: JSON with explicit-unit keys, validated with pydantic."""
from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .emitter import (
    POPULATION_CHARGE,
    POPULATION_DIFFUSION,
    ChargeDynamicsParams,
    EmitterModel,
    PillarModel,
    PopulationClass,
    SpectralDiffusionParams,
)
from .physics import BackgroundModel, OpticalTransitionParams
from .sweep import DEFAULT_PLE_POWER_NW, LaserSweepPlan, PulseSequenceSpec


class ConfigError(ValueError):
    """Invalid configuration file; message names the offending key(s)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackgroundConfig(_Strict):
    linear_coefficient_cps_per_nW: float = Field(5.0, ge=0)
    dark_rate_cps: float = Field(20.0, ge=0)

    def build(self) -> BackgroundModel:
        return BackgroundModel(self.linear_coefficient_cps_per_nW, self.dark_rate_cps)


class EmitterConfig(_Strict):
    population: Literal["Stable1", "Diffusive2", "Blinking3"] = "Stable1"
    lifetime_ns: float = Field(1.69, gt=0)
    saturation_power_nW: float = Field(23.0, gt=0)
    max_signal_rate_cps: Optional[float] = Field(None, gt=0)
    zpl_branching_fraction: float = Field(0.7, ge=0, le=1)
    static_detuning_GHz: float = 0.0
    # None: population default
    ou_sigma_MHz: Optional[float] = Field(None, ge=0)
    ou_correlation_time_s: Optional[float] = Field(None, gt=0)
    repump_jump_sigma_MHz: Optional[float] = Field(None, ge=0)
    ionization_rate_at_sat_per_s: Optional[float] = Field(None, ge=0)
    recovery_rate_dark_per_s: Optional[float] = Field(None, ge=0)
    repump_recovery_prob: Optional[float] = Field(None, ge=0, le=1)
    stabilized: bool = False
    blue_penalty: float = Field(0.0, ge=0, lt=1)

    def build(self) -> EmitterModel:
        pop = PopulationClass(self.population)
        d0, c0 = POPULATION_DIFFUSION[pop], POPULATION_CHARGE[pop]
        tr = OpticalTransitionParams(excited_state_lifetime=self.lifetime_ns,
                                     resonant_saturation_power=self.saturation_power_nW,
                                     zpl_branching_fraction=self.zpl_branching_fraction)
        diff = SpectralDiffusionParams(
            d0.ou_sigma if self.ou_sigma_MHz is None else self.ou_sigma_MHz,
            d0.ou_correlation_time if self.ou_correlation_time_s is None else self.ou_correlation_time_s,
            d0.repump_jump_sigma if self.repump_jump_sigma_MHz is None else self.repump_jump_sigma_MHz)
        charge = ChargeDynamicsParams(
            c0.ionization_rate_at_sat if self.ionization_rate_at_sat_per_s is None
            else self.ionization_rate_at_sat_per_s,
            c0.recovery_rate_dark if self.recovery_rate_dark_per_s is None else self.recovery_rate_dark_per_s,
            c0.repump_recovery_prob if self.repump_recovery_prob is None else self.repump_recovery_prob,
            self.stabilized)
        e = EmitterModel.preset(pop, transition=tr, diffusion=diff, charge=charge,
                                static_detuning=self.static_detuning_GHz * 1e9,
                                blue_penalty=self.blue_penalty)
        if self.max_signal_rate_cps is not None:
            # an explicit rate overrides the population brightness scaling
            e = replace(e, transition=replace(tr, max_signal_rate=self.max_signal_rate_cps))
        return e

    @classmethod
    def from_model(cls, e: EmitterModel) -> "EmitterConfig":
        tr, d, c = e.transition, e.diffusion, e.charge
        return cls(population=e.population.value, lifetime_ns=tr.excited_state_lifetime,
                   saturation_power_nW=tr.resonant_saturation_power,
                   max_signal_rate_cps=tr.max_signal_rate,
                   zpl_branching_fraction=tr.zpl_branching_fraction,
                   static_detuning_GHz=e.static_detuning / 1e9, ou_sigma_MHz=d.ou_sigma,
                   ou_correlation_time_s=d.ou_correlation_time,
                   repump_jump_sigma_MHz=d.repump_jump_sigma,
                   ionization_rate_at_sat_per_s=c.ionization_rate_at_sat,
                   recovery_rate_dark_per_s=c.recovery_rate_dark,
                   repump_recovery_prob=c.repump_recovery_prob, stabilized=c.stabilized,
                   blue_penalty=e.blue_penalty)


class PillarConfig(_Strict):
    emitters: list[EmitterConfig] = Field(default_factory=lambda: [EmitterConfig()])
    background: BackgroundConfig = Field(default_factory=BackgroundConfig)

    def build(self) -> PillarModel:
        return PillarModel(tuple(e.build() for e in self.emitters), self.background.build())


class SweepConfig(_Strict):
    detuning_start_GHz: float = -1.0
    detuning_end_GHz: float = 1.0
    n_setpoints: int = Field(61, ge=2)
    dwell_s: float = Field(0.2, gt=0)
    integration_bin_s: float = Field(0.020, gt=0)
    n_one_way_sweeps: int = Field(28, ge=1)
    settle_fraction: float = Field(0.1, ge=0, lt=1)
    turnaround_s: float = Field(0.8, ge=0)
    laser_jitter_MHz: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.integration_bin_s > self.dwell_s:
            raise ValueError("sweep.integration_bin_s must not exceed sweep.dwell_s")
        if self.detuning_end_GHz <= self.detuning_start_GHz:
            raise ValueError("sweep.detuning_end_GHz must exceed sweep.detuning_start_GHz")
        return self

    def build(self) -> LaserSweepPlan:
        return LaserSweepPlan(self.detuning_start_GHz, self.detuning_end_GHz, self.n_setpoints,
                              self.dwell_s, self.integration_bin_s, self.n_one_way_sweeps,
                              self.settle_fraction, self.turnaround_s, self.laser_jitter_MHz)


class PulseConfig(_Strict):
    scheme: Literal["crf", "cr_515", "cr_445"] = "crf"
    repump_length_s: float = Field(1e-6, gt=0)
    resonant_window_s: float = Field(7e-6, gt=0)

    def build(self) -> PulseSequenceSpec:
        return PulseSequenceSpec(self.scheme, self.repump_length_s, self.resonant_window_s)


class HBTConfig(_Strict):
    duration_s: float = Field(60.0, gt=0)
    power_nW: float = Field(23.0, ge=0)
    mode: Literal["offresonant", "resonant"] = "offresonant"
    laser_detuning_GHz: float = 0.0
    # tau_c = tau_r/2 at half saturation; 256 ps keeps >= 10 bins inside 3 tau_c
    bin_width_ps: float = Field(256.0, gt=0)
    tau_max_ns: float = Field(100.0, gt=0)
    far_window_ns: tuple[float, float] = (30.0, 100.0)
    chunk_s: float = Field(10.0, gt=0)
    # off-resonant ZPL brightness used for HBT runs (overrides the emitters'
    # resonant max_signal_rate; None keeps it)
    max_signal_rate_cps: Optional[float] = Field(3.0e5, gt=0)

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.far_window_ns
        if not 0 <= lo < hi:
            raise ValueError("hbt.far_window_ns must be an increasing pair")
        if hi > self.tau_max_ns:
            raise ValueError("hbt.far_window_ns must lie inside hbt.tau_max_ns")
        return self


class LifetimeConfig(_Strict):
    lifetime_ns: float = Field(1.69, gt=0)
    n_photons: int = Field(100_000, gt=0)
    irf_sigma_ps: float = Field(50.0, ge=0)
    bin_ps: float = Field(16.0, gt=0)
    period_ns: float = Field(50.0, gt=0)
    background_fraction: float = Field(0.01, ge=0, lt=1)


class SurveyConfigModel(_Strict):
    n_pillars: int = Field(220, ge=1)
    mean_emitters: float = Field(0.53, ge=0)
    acquisition_s: float = Field(0.2, gt=0)
    power_nW: float = Field(23.0, gt=0)
    max_signal_rate_cps: float = Field(2.0e6, gt=0)


class RTSurveyConfig(_Strict):
    n_pillars: int = Field(88, ge=1)
    position_nm: float = 738.0
    position_std_nm: float = Field(0.1, ge=0)
    fwhm_nm: float = Field(5.0, gt=0)
    fwhm_std_nm: float = Field(0.5, ge=0)


class ExperimentConfig(_Strict):
    master_seed: int = Field(..., ge=0)
    output_dir: str = "out"
    pillars: list[PillarConfig] = Field(default_factory=lambda: [PillarConfig()])
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    pulse: PulseConfig = Field(default_factory=PulseConfig)
    laser_power_nW: float = Field(DEFAULT_PLE_POWER_NW, gt=0)
    power_schedule_nW: list[float] = Field(
        default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 23.0, 50.0, 100.0, 200.0])
    hbt: HBTConfig = Field(default_factory=HBTConfig)
    lifetime: LifetimeConfig = Field(default_factory=LifetimeConfig)
    survey: SurveyConfigModel = Field(default_factory=SurveyConfigModel)
    rt_survey: RTSurveyConfig = Field(default_factory=RTSurveyConfig)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        return self if seed is None else self.model_copy(update={"master_seed": int(seed)})


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        if e["type"] == "missing" and loc == "master_seed":
            parts.append("master_seed: required (a fixed seed makes every run reproducible)")
        elif e["type"] == "extra_forbidden":
            parts.append(f"{loc}: unknown key")
        else:
            parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_describe(exc)}") from exc


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def save_config(cfg: ExperimentConfig, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, cfg.canonical_json() + "\n")
