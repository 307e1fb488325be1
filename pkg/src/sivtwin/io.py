"""Dataset persistence: time-tag files, PLE traces, result records, manifests.

All writes go through a temporary file in the target directory followed by
``os.replace`` so readers never observe a partial file.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .correlator import G2Result, WaitingTimeHistogram
from .photons import TimeTagStream
from .stats import SweepFit, SweepStatistics
from .sweep import LaserSweepPlan, PLETrace, PulseSequenceSpec

FORMAT_VERSION = 1
STREAM_MAGIC = b"SIVTT\x00"


class CorruptionError(ValueError):
    pass


class MigrationError(ValueError):
    """File was written by an incompatible format version."""


class HashMismatchError(CorruptionError):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default, allow_nan=True)


def _check_version(rec: dict, what: str):
    v = rec.get("format_version")
    if v != FORMAT_VERSION:
        raise MigrationError(f"{what}: format_version {v!r} is not supported "
                             f"(expected {FORMAT_VERSION}); re-export with this version")


# -- time tags ----------------------------------------------------------------

def save_stream(stream: TimeTagStream, path, seed: int | None = None) -> Path:
    ch = np.ascontiguousarray(stream.channels, dtype="<u1").tobytes()
    t = np.ascontiguousarray(stream.times, dtype="<f8").tobytes()
    payload = ch + t
    header = {"format_version": FORMAT_VERSION, "kind": "time_tags", "n": int(stream.times.size),
              "duration_s": float(stream.duration),
              "rates_cps": {str(c): stream.rate(c) for c in (1, 2)},
              "seed": seed, "meta": stream.meta, "payload_sha256": sha256_bytes(payload)}
    hb = dumps(header).encode()
    return atomic_write_bytes(path, STREAM_MAGIC + struct.pack("<I", len(hb)) + hb + payload)


def load_stream(path) -> TimeTagStream:
    data = Path(path).read_bytes()
    if not data.startswith(STREAM_MAGIC):
        raise CorruptionError(f"{path}: not a time-tag file")
    off = len(STREAM_MAGIC)
    if len(data) < off + 4:
        raise CorruptionError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off:off + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header") from exc
    _check_version(header, str(path))
    off += hlen
    n = int(header["n"])
    payload = data[off:]
    if len(payload) != 9 * n:
        raise CorruptionError(f"{path}: expected {9 * n} payload bytes, found {len(payload)}")
    if sha256_bytes(payload) != header["payload_sha256"]:
        raise HashMismatchError(f"{path}: payload hash mismatch")
    ch = np.frombuffer(payload[:n], dtype="<u1").copy()
    t = np.frombuffer(payload[n:], dtype="<f8").copy()
    return TimeTagStream(t, ch, header["duration_s"], header.get("meta", {}))


# -- PLE traces ---------------------------------------------------------------

def _trace_meta(trace: PLETrace) -> dict:
    p, s = trace.plan, trace.scheme
    return {"format_version": FORMAT_VERSION, "kind": "ple_trace",
            "detunings_Hz": trace.detunings.tolist(), "laser_power_nW": trace.laser_power,
            "wall_time_per_point_s": trace.wall_time_per_point,
            "plan": {"detuning_start_GHz": p.detuning_start, "detuning_end_GHz": p.detuning_end,
                     "n_setpoints": p.n_setpoints, "dwell_s": p.dwell_time,
                     "integration_bin_s": p.integration_bin, "n_one_way_sweeps": p.n_one_way_sweeps,
                     "settle_fraction": p.settle_fraction, "turnaround_s": p.turnaround_s,
                     "laser_jitter_MHz": p.laser_jitter_mhz},
            "scheme": {"scheme": s.scheme.value, "repump_length_s": s.repump_length,
                       "resonant_window_s": s.resonant_window},
            "row_directions": trace.directions.tolist(),
            "duration_s": trace.duration,
            "meta": trace.meta}


def trace_csv(trace: PLETrace) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in trace.counts:
        w.writerow([int(v) for v in row])
    return buf.getvalue()


def save_trace(trace: PLETrace, path) -> tuple[Path, Path]:
    """``path`` is the CSV matrix; the sidecar is ``<path>.json``."""
    path = Path(path)
    text = trace_csv(trace)
    meta = _trace_meta(trace)
    meta["csv_sha256"] = sha256_bytes(text.encode())
    meta["csv_file"] = path.name
    side = path.with_suffix(path.suffix + ".json")
    atomic_write_text(path, text)
    atomic_write_text(side, dumps(meta))
    return path, side


def load_trace(path) -> PLETrace:
    path = Path(path)
    if path.suffix == ".json":
        side = path
        meta = json.loads(side.read_text())
        path = side.parent / meta["csv_file"]
    else:
        side = path.with_suffix(path.suffix + ".json")
        meta = json.loads(side.read_text())
    _check_version(meta, str(side))
    raw = path.read_bytes()
    if sha256_bytes(raw) != meta["csv_sha256"]:
        raise HashMismatchError(f"{path}: content hash mismatch")
    rows = [list(map(int, r)) for r in csv.reader(_io.StringIO(raw.decode())) if r]
    p = meta["plan"]
    plan = LaserSweepPlan(p["detuning_start_GHz"], p["detuning_end_GHz"], p["n_setpoints"],
                          p["dwell_s"], p["integration_bin_s"], p["n_one_way_sweeps"],
                          p["settle_fraction"], p["turnaround_s"], p["laser_jitter_MHz"])
    s = meta["scheme"]
    scheme = PulseSequenceSpec(s["scheme"], s["repump_length_s"], s["resonant_window_s"])
    return PLETrace(np.array(rows, dtype=np.int64).reshape(len(rows), -1),
                    np.array(meta["detunings_Hz"]), plan, scheme, meta["laser_power_nW"],
                    meta["wall_time_per_point_s"], meta.get("meta", {}))


# -- result records -------------------------------------------------------------

def _arr(x):
    return None if x is None else np.asarray(x, dtype=float).tolist()


def g2_to_record(r: G2Result) -> dict:
    rec = {"format_version": FORMAT_VERSION, "kind": "g2_result", **r.to_record(),
           "tau_s": _arr(r.tau), "g2_norm": _arr(r.g2_norm), "g2_corr": _arr(r.g2_corr),
           "sigma": _arr(r.sigma)}
    if r.histogram is not None:
        h = r.histogram
        rec["histogram"] = {"bin_width_s": h.bin_width, "counts": np.asarray(h.counts).tolist(),
                            "n1_cps": h.n1, "n2_cps": h.n2, "total_time_s": h.total_time,
                            "n_pairs_out_of_range": h.n_pairs_out_of_range}
    return rec


def g2_from_record(rec: dict) -> G2Result:
    _check_version(rec, "g2 record")
    h = rec.get("histogram")
    hist = None
    if h is not None:
        hist = WaitingTimeHistogram(h["bin_width_s"], np.array(h["counts"]), h["n1_cps"], h["n2_cps"],
                                    h["total_time_s"], h["n_pairs_out_of_range"])
    sig = rec.get("sigma")
    return G2Result(np.array(rec["tau_s"]), np.array(rec["g2_norm"]), np.array(rec["g2_corr"]),
                    rec["rho"], rec["g2_0"], rec["g2_0_err"], rec["tau_c_s"], rec["tau_c_err_s"],
                    rec["n_estimate"], rec["n_raw"], rec["w_far_over_C"],
                    None if sig is None else np.array(sig), hist)


def stats_to_record(s: SweepStatistics) -> dict:
    return {"format_version": FORMAT_VERSION, "kind": "sweep_statistics", **s.to_record()}


def stats_from_record(rec: dict) -> SweepStatistics:
    _check_version(rec, "sweep statistics record")
    per = [SweepFit(p["fwhm_MHz"], p["center_MHz"], p["peak_intensity_per_power"], p["fit_ok"],
                    p.get("center_abs_MHz", math.nan))
           for p in rec["per_sweep"]]
    return SweepStatistics(per, rec["sigma_center_MHz"], rec["mean_fwhm_MHz"], rec["mean_intensity"],
                           rec["off_fraction"], list(rec.get("convergence_curve", [])))


def save_record(rec: dict, path) -> Path:
    if "format_version" not in rec:
        rec = {"format_version": FORMAT_VERSION, **rec}
    return atomic_write_text(path, dumps(rec))


def load_record(path) -> dict:
    rec = json.loads(Path(path).read_text())
    _check_version(rec, str(path))
    return rec


def save_g2(r: G2Result, path) -> Path:
    return save_record(g2_to_record(r), path)


def load_g2(path) -> G2Result:
    return g2_from_record(json.loads(Path(path).read_text()))


def save_stats(s: SweepStatistics, path) -> Path:
    return save_record(stats_to_record(s), path)


def load_stats(path) -> SweepStatistics:
    return stats_from_record(json.loads(Path(path).read_text()))


# -- tables ---------------------------------------------------------------------

def table_text(columns: list[str], rows, fmt: str = "csv") -> str:
    rows = [[_cell(v) for v in r] for r in rows]
    if fmt == "json":
        # keep column order; dumps() would sort the keys
        return json.dumps([dict(zip(columns, r)) for r in rows], indent=2, default=_json_default)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


def write_table(path, columns, rows, fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "json" and path.suffix == ".csv":
        path = path.with_suffix(".json")
    return atomic_write_text(path, table_text(columns, rows, fmt))


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Numeric CSV (with header) or JSON table; returns column names and a float array."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        recs = json.loads(text)
        cols = list(recs[0].keys()) if recs else []
        return cols, np.array([[float(r[c]) for c in cols] for r in recs], dtype=float)
    rows = [r for r in csv.reader(_io.StringIO(text)) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        return [], np.empty((0, 0))
    try:
        float(rows[0][0])
        cols, body = [f"c{i}" for i in range(len(rows[0]))], rows
    except ValueError:
        cols, body = rows[0], rows[1:]
    return cols, np.array([[float(x) for x in r] for r in body], dtype=float)


# -- manifest ---------------------------------------------------------------------

MANIFEST = "manifest.json"


def write_manifest(out_dir, files, config_sha256: str | None = None, command: str = "") -> Path:
    out_dir = Path(out_dir)
    entries = []
    for f in sorted({Path(f).resolve() for f in files}):
        rel = f.relative_to(out_dir.resolve()).as_posix()
        entries.append({"path": rel, "sha256": sha256_file(f), "format_version": FORMAT_VERSION})
    man = {"format_version": FORMAT_VERSION, "artifact_version": __version__,
           "config_sha256": config_sha256, "command": command, "files": entries}
    return atomic_write_text(out_dir / MANIFEST, dumps(man))


def verify_manifest(out_dir) -> dict:
    out_dir = Path(out_dir)
    man = json.loads((out_dir / MANIFEST).read_text())
    _check_version(man, str(out_dir / MANIFEST))
    for e in man["files"]:
        p = out_dir / e["path"]
        if not p.exists():
            raise CorruptionError(f"{e['path']}: listed in manifest but missing")
        if sha256_file(p) != e["sha256"]:
            raise HashMismatchError(f"{e['path']}: hash mismatch against manifest")
    return man



# -- implantation profiles ------------------------------------------------------------

_ANGSTROM = re.compile(r"\bang(strom)?s?\b|\(a\)|\bÅ", re.IGNORECASE)


def read_depth_profile(path, depth_unit: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Depth (nm) and density columns from an ion-range table.

    Accepts plain CSV/whitespace tables and the text output of Monte Carlo
    range codes: banner and header lines are skipped, numeric rows kept, and
    the first two columns used.  Depths given in Angstrom (declared in the
    header or via ``depth_unit="A"``) are converted to nm.
    """
    text = Path(path).read_text(errors="replace")
    depth, dens, header = [], [], []
    for line in text.splitlines():
        tok = line.replace(",", " ").split()
        try:
            d, n = float(tok[0]), float(tok[1])
        except (IndexError, ValueError):
            header.append(line)
            continue
        depth.append(d)
        dens.append(n)
    if len(depth) < 2:
        raise ValueError(f"{path}: no numeric depth/density rows found")
    unit = depth_unit
    if unit is None:
        unit = "A" if any(_ANGSTROM.search(h) for h in header) else "nm"
    scale = {"a": 0.1, "angstrom": 0.1, "nm": 1.0, "um": 1e3}.get(unit.lower())
    if scale is None:
        raise ValueError(f"unknown depth unit {unit!r}")
    return np.asarray(depth) * scale, np.asarray(dens)
