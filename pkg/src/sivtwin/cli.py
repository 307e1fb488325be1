"""Command-line interface: ``sivtwin <command> ...``.

Every successful run writes its outputs plus ``manifest.json`` into ``--out``.
Failures print a JSON error record on stderr and exit 1; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, io, scenarios
from .config import ConfigError, EmitterConfig, ExperimentConfig, load_config, save_config
from .correlator import ChannelError, HighRateWarning, analyze_histogram, histogram_waiting_times
from .emitter import PillarModel, apply_blue_stabilization
from .fitting import (
    fit_double_gaussian,
    fit_exponential_decay,
    fit_lorentzian,
    fit_multi_lorentzian,
    fit_poisson_mean,
    fit_power_broadening,
    fit_saturation,
)
from .photons import Drive, generate_photon_stream, simulate_decay
from .physics import antibunching_time, saturation_rate
from .rng import task_rng
from .stats import convergence_curve, per_sweep_statistics
from .sweep import PulseSequenceSpec, assemble_single_sweeps, average_spectrum, run_ple

log = logging.getLogger("sivtwin")

FIT_MODELS = ("exponential", "lorentzian", "multi-lorentzian", "saturation",
              "power-broadening", "double-gaussian", "poisson")


class UsageError(Exception):
    pass


# -- unit parsing -----------------------------------------------------------------------

_POWER_MW = {"w": 1e3, "mw": 1.0, "uw": 1e-3, "µw": 1e-3, "nw": 1e-6}
_DURATION_H = {"s": 1 / 3600, "min": 1 / 60, "m": 1 / 60, "h": 1.0}


def _quantity(text: str, units: dict, what: str) -> float:
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*([A-Za-zµ]+)\s*", text)
    if not m or m.group(2).lower() not in units:
        raise UsageError(f"cannot parse {what} {text!r}; expected e.g. "
                         + ("'6mW'" if what == "power" else "'2h'"))
    return float(m.group(1)) * units[m.group(2).lower()]


def parse_power_mw(text: str) -> float:
    return _quantity(text, _POWER_MW, "power")


def parse_duration_h(text: str) -> float:
    return _quantity(text, _DURATION_H, "duration")


# -- run context ------------------------------------------------------------------------

class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, args, cfg: ExperimentConfig | None):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out if args.out is not None else (cfg.output_dir if cfg else "out"))
        self.out.mkdir(parents=True, exist_ok=True)
        self.fmt = args.format
        self.files: list[Path] = []

    def record(self, name: str, rec: dict) -> Path:
        p = io.save_record(rec, self.out / f"{name}.json")
        self.files.append(p)
        return p

    def table(self, name: str, columns, rows) -> Path:
        p = io.write_table(self.out / f"{name}.csv", columns, rows, self.fmt)
        self.files.append(p)
        return p

    def add(self, *paths):
        self.files.extend(Path(p) for p in paths)

    def finish(self, command: str) -> Path:
        return io.write_manifest(self.out, self.files, self.cfg.sha256() if self.cfg else None, command)


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.seed is not None:
        cfg = ExperimentConfig(master_seed=args.seed)
    else:
        raise ConfigError("master_seed: required (pass --config or --seed)")
    return cfg.with_seed(args.seed)


def _write_outputs(run: Run, out: scenarios.FigureOutput, plot: bool):
    for name, (cols, rows) in out.tables.items():
        run.table(name, cols, rows)
    for name, rec in out.records.items():
        run.record(name, rec)
    for name, tr in out.traces.items():
        run.add(*io.save_trace(tr, run.out / f"{name}.csv"))
    if plot:
        try:
            from .plotting import render_tables
        except ImportError:  # pragma: no cover
            log.warning("matplotlib not available; skipping figures")
            return
        run.add(*render_tables(out.tables, run.out))


# -- simulate ---------------------------------------------------------------------------

def cmd_simulate(args, run: Run):
    cfg = run.cfg
    if args.what == "ple":
        plan = cfg.sweep.build()
        if args.rows:
            plan = replace(plan, n_one_way_sweeps=args.rows)
        scheme = PulseSequenceSpec(args.scheme) if args.scheme else cfg.pulse.build()
        trace = run_ple(cfg.pillars[0].build(), plan, scheme, args.power or cfg.laser_power_nW,
                        task_rng(cfg.master_seed, "simulate", "ple"))
        run.add(*io.save_trace(trace, run.out / "ple_trace.csv"))
    elif args.what == "hbt":
        h = cfg.hbt
        pillar = scenarios.hbt_pillar(cfg.pillars[0].build(), h.max_signal_rate_cps)
        if args.n_emitters is not None:
            if args.n_emitters < 1:
                raise UsageError("--n-emitters must be >= 1")
            pillar = PillarModel((pillar.emitters[0],) * args.n_emitters, pillar.background)
        duration = args.duration or h.duration_s
        power = args.power or h.power_nW
        S = sum(saturation_rate(power, e.transition) for e in pillar.emitters)
        B = float(pillar.background.rate(power))
        drive = Drive(power, h.mode, h.laser_detuning_GHz * 1e9)
        stream = generate_photon_stream(
            pillar, drive, duration, task_rng(cfg.master_seed, "simulate", "hbt"), h.chunk_s,
            meta={"rho_model": S / (S + B),
                  "tau_c_model_s": antibunching_time(power, pillar.emitters[0].transition)})
        run.add(io.save_stream(stream, run.out / "stream.sivtt", cfg.master_seed))
    elif args.what == "survey":
        out = scenarios.survey_output(*scenarios.run_survey(cfg, args.quick, args.threads))
        _write_outputs(run, out, False)
    elif args.what == "lifetime":
        lt = cfg.lifetime
        tau = args.lifetime_ns or lt.lifetime_ns
        n = args.photons or lt.n_photons
        dec = simulate_decay(tau, n, task_rng(cfg.master_seed, "simulate", "lifetime"),
                             lt.irf_sigma_ps, period_ns=lt.period_ns, bin_ps=lt.bin_ps,
                             background_fraction=lt.background_fraction)
        run.table("decay", ["t_s", "counts"], list(zip(dec.t, dec.counts)))


# -- stabilize ---------------------------------------------------------------------------

def cmd_stabilize(args, run: Run):
    if args.emitter:
        try:
            rec = json.loads(Path(args.emitter).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.emitter}: parse error at line {exc.lineno}, column {exc.colno}") from exc
        rec.pop("format_version", None)
        ec = EmitterConfig.model_validate(rec)
    else:
        ec = run.cfg.pillars[0].emitters[0]
    power = parse_power_mw(args.power)
    hours = parse_duration_h(args.duration)
    after = EmitterConfig.from_model(apply_blue_stabilization(ec.build(), power, hours))
    run.record("emitter_stabilized", after.model_dump(mode="json"))
    run.record("stabilization", {"exposure_power_mW": power, "exposure_duration_h": hours,
                                 "population_before": ec.population,
                                 "population_after": after.population,
                                 "changed": after != EmitterConfig.from_model(ec.build())})


# -- analyze ------------------------------------------------------------------------------

def cmd_analyze(args, run: Run):
    if args.what == "ple":
        trace = io.load_trace(args.input)
        sweeps = assemble_single_sweeps(trace, overlapping=args.overlapping)
        avg = average_spectrum(sweeps, len(sweeps))
        run.table("spectrum", *scenarios.spectrum_table(avg))
        fit = fit_lorentzian(avg.detunings, avg.values)
        run.record("spectrum_fit", {**fit.to_record(), "fwhm_MHz": fit["fwhm"] / 1e6,
                                    "n_single_sweeps": len(sweeps)})
        st = per_sweep_statistics(sweeps, trace.laser_power, trace.detection_time_per_point)
        if len(sweeps) >= 10:
            st.convergence_curve = convergence_curve(
                sweeps, n_resamples=args.resamples, rng=task_rng(args.seed or 0, "analyze", "ple"))
        run.add(io.save_stats(st, run.out / "sweep_statistics.json"))
        run.table("single_sweeps", ["fwhm_MHz", "center_MHz", "peak_intensity_per_power", "fit_ok"],
                  [(s.fwhm, s.center, s.peak_intensity_per_power, int(s.fit_ok)) for s in st.per_sweep])
    elif args.what == "g2":
        stream = io.load_stream(args.input)
        if stream.n_channels < 2:
            raise ChannelError("two channels required")
        h = run.cfg.hbt if run.cfg else None
        bw = args.bin_width_ps or (h.bin_width_ps if h else 256.0)
        tmax = args.tau_max_ns or (h.tau_max_ns if h else 100.0)
        far = tuple(args.far_window_ns or (h.far_window_ns if h else (30.0, 100.0)))
        rho = args.rho if args.rho is not None else float(stream.meta.get("rho_model", 1.0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HighRateWarning)
            hist = histogram_waiting_times(stream, bw * 1e-12, tmax * 1e-9)
        res = analyze_histogram(hist, rho, (far[0] * 1e-9, far[1] * 1e-9),
                                tau_c_guess=stream.meta.get("tau_c_model_s"))
        run.add(io.save_g2(res, run.out / "g2.json"))
        run.table("g2", *scenarios.g2_table(res))
    elif args.what == "survey":
        cols, a = io.read_table(args.input)
        col = cols.index("n_estimate") if "n_estimate" in cols else 0
        run.record("poisson_fit", fit_poisson_mean(a[:, col].astype(int)).to_record())


# -- fit ------------------------------------------------------------------------------------

def cmd_fit(args, run: Run):
    m = args.model
    if m == "double-gaussian":
        x, y = io.read_depth_profile(args.input, args.depth_unit)
        res = fit_double_gaussian(x, y)
    else:
        cols, a = io.read_table(args.input)
        if a.ndim != 2 or a.shape[0] == 0:
            raise ValueError(f"{args.input}: empty table")
        if m == "poisson":
            col = cols.index("n_estimate") if "n_estimate" in cols else 0
            res = fit_poisson_mean(a[:, col].astype(int), args.confidence)
            run.record("fit_poisson", res.to_record())
            return
        if a.shape[1] < 2:
            raise ValueError(f"{args.input}: need at least two columns (x, y)")
        x, y = a[:, 0], a[:, 1]
        sigma = a[:, 2] if a.shape[1] > 2 else None
        if m == "exponential":
            res = fit_exponential_decay(x, y)
        elif m == "lorentzian":
            res = fit_lorentzian(x, y, sigma)
        elif m == "multi-lorentzian":
            res = fit_multi_lorentzian(x, y, args.n_peaks, sigma)
        elif m == "saturation":
            res = fit_saturation(x, y, sigma)
        else:
            res = fit_power_broadening(x, y, sigma)
    run.record(f"fit_{m.replace('-', '_')}", res.to_record())


# -- report ------------------------------------------------------------------------------------

def cmd_report(args, run: Run):
    fn = scenarios.FIGURES[args.figure]
    kw = {"threads": args.threads} if args.figure == "2d" else {}
    out = fn(run.cfg, quick=args.quick, **kw)
    _write_outputs(run, out, args.plot)


# -- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sivtwin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate synthetic data").add_subparsers(dest="what", required=True)
    s = sim.add_parser("ple", parents=[common])
    s.add_argument("--scheme", choices=("crf", "cr_515", "cr_445"))
    s.add_argument("--rows", type=int, help="number of one-way sweeps")
    s.add_argument("--power", type=float, help="resonant power, nW")
    s = sim.add_parser("hbt", parents=[common])
    s.add_argument("--n-emitters", type=int)
    s.add_argument("--duration", type=float, help="s")
    s.add_argument("--power", type=float, help="nW")
    s = sim.add_parser("survey", parents=[common])
    s.add_argument("--quick", action="store_true")
    s = sim.add_parser("lifetime", parents=[common])
    s.add_argument("--lifetime-ns", type=float)
    s.add_argument("--photons", type=int)

    s = sub.add_parser("stabilize", parents=[common], help="apply 445 nm exposure to an emitter")
    s.add_argument("--emitter", metavar="PATH", help="emitter record (JSON); default: first emitter of the config")
    s.add_argument("--power", required=True, help="exposure power, e.g. 6mW")
    s.add_argument("--duration", required=True, help="exposure duration, e.g. 2h")

    an = sub.add_parser("analyze", help="analyse stored data").add_subparsers(dest="what", required=True)
    s = an.add_parser("ple", parents=[common])
    s.add_argument("input", help="PLE trace (CSV or its JSON sidecar)")
    s.add_argument("--overlapping", action="store_true")
    s.add_argument("--resamples", type=int, default=20)
    s = an.add_parser("g2", parents=[common])
    s.add_argument("input", help="time-tag stream file")
    s.add_argument("--rho", type=float, help="signal-to-background ratio S/(S+B)")
    s.add_argument("--bin-width-ps", type=float)
    s.add_argument("--tau-max-ns", type=float)
    s.add_argument("--far-window-ns", type=float, nargs=2)
    s = an.add_parser("survey", parents=[common])
    s.add_argument("input", help="per-pillar table with an n_estimate column")

    s = sub.add_parser("fit", parents=[common], help="fit a model to a table")
    s.add_argument("model", choices=FIT_MODELS)
    s.add_argument("input")
    s.add_argument("--n-peaks", type=int, default=2)
    s.add_argument("--confidence", type=float, default=0.95)
    s.add_argument("--depth-unit", choices=("A", "nm", "um"))

    rep = sub.add_parser("report", help="figure pipelines").add_subparsers(dest="what", required=True)
    s = rep.add_parser("figure", parents=[common])
    s.add_argument("figure", choices=tuple(scenarios.FIGURES))
    s.add_argument("--quick", action="store_true", help="reduced statistics")
    s.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True,
                   help="render PNG figures next to the tables")
    return p


NEEDS_CONFIG = {"simulate", "report"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = " ".join(x for x in (args.command, getattr(args, "what", None),
                                   getattr(args, "figure", None) or getattr(args, "model", None)) if x)
    try:
        if args.command in NEEDS_CONFIG or args.config or args.seed is not None:
            cfg = _config(args)
        else:
            cfg = None
        run = Run(args, cfg)
        if cfg is not None and args.config:
            # canonical copy; never the input file itself
            save_config(cfg, run.out / "config.canonical.json")
            run.add(run.out / "config.canonical.json")
        handler = {"simulate": cmd_simulate, "stabilize": cmd_stabilize, "analyze": cmd_analyze,
                   "fit": cmd_fit, "report": cmd_report}[args.command]
        if args.command == "stabilize" and cfg is None and not args.emitter:
            raise UsageError("stabilize needs --emitter or a config")
        with np.errstate(all="ignore"):
            handler(args, run)
        run.finish(command)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": str(exc), "command": command}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        rec = {"error": type(exc).__name__, "message": str(exc), "command": command}
        diag = getattr(exc, "diagnostics", None)
        if diag:
            rec["diagnostics"] = json.loads(io.dumps(diag))
        print(json.dumps(rec), file=sys.stderr)
        if args.verbose:
            log.exception("failed")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
