import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sivtwin import io
from sivtwin.config import ExperimentConfig
from sivtwin.correlator import analyze_stream
from sivtwin.emitter import EmitterModel, PillarModel
from sivtwin.photons import Drive, TimeTagStream, generate_photon_stream
from sivtwin.physics import OpticalTransitionParams
from sivtwin.rng import task_rng
from sivtwin.scenarios import crf_trace
from sivtwin.stats import per_sweep_statistics
from sivtwin.sweep import assemble_single_sweeps


@pytest.fixture
def stream():
    e = EmitterModel(transition=OpticalTransitionParams(max_signal_rate=3e5))
    return generate_photon_stream(PillarModel((e,)), Drive(23.0), 10.0, task_rng(0, "io"))


@pytest.fixture
def trace():
    return crf_trace(EmitterModel.preset("Stable1"), ExperimentConfig(master_seed=1), 20, ("io",))


def test_stream_round_trip(tmp_path, stream):
    p = io.save_stream(stream, tmp_path / "s.tt", seed=3)
    s = io.load_stream(p)
    np.testing.assert_array_equal(s.times, stream.times)
    np.testing.assert_array_equal(s.channels, stream.channels)
    assert s.duration == stream.duration


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1, exclude_max=True), max_size=200), st.integers(0, 2**32 - 1))
def test_stream_round_trip_property(tmp_path_factory, times, seed):
    t = np.sort(np.asarray(times, float))
    c = np.random.default_rng(seed).integers(1, 3, t.size).astype(np.uint8)
    p = io.save_stream(TimeTagStream(t, c, 1.0), tmp_path_factory.mktemp("p") / "x.tt")
    s = io.load_stream(p)
    assert s.times.tobytes() == t.tobytes() and s.channels.tobytes() == c.tobytes()


def test_truncated_stream_rejected(tmp_path, stream):
    p = io.save_stream(stream, tmp_path / "s.tt")
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(io.CorruptionError):
        io.load_stream(p)
    p.write_bytes(data[:8])
    with pytest.raises(io.CorruptionError):
        io.load_stream(p)
    p.write_bytes(b"garbage")
    with pytest.raises(io.CorruptionError):
        io.load_stream(p)


def test_flipped_payload_hash_mismatch(tmp_path, stream):
    p = io.save_stream(stream, tmp_path / "s.tt")
    b = bytearray(p.read_bytes())
    b[-1] ^= 0xFF
    p.write_bytes(bytes(b))
    with pytest.raises(io.HashMismatchError):
        io.load_stream(p)


def test_future_version_migration_error(tmp_path, stream):
    p = io.save_stream(stream, tmp_path / "s.tt")
    data = p.read_bytes()
    off = len(io.STREAM_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    header = json.loads(data[off + 4:off + 4 + hlen])
    header["format_version"] = 99
    hb = io.dumps(header).encode()
    p.write_bytes(io.STREAM_MAGIC + struct.pack("<I", len(hb)) + hb + data[off + 4 + hlen:])
    with pytest.raises(io.MigrationError, match="format_version"):
        io.load_stream(p)


def test_trace_round_trip_bit_identical(tmp_path, trace):
    csv_path, side = io.save_trace(trace, tmp_path / "t.csv")
    t2 = io.load_trace(csv_path)
    np.testing.assert_array_equal(t2.counts, trace.counts)
    np.testing.assert_array_equal(t2.detunings, trace.detunings)
    assert t2.plan == trace.plan and t2.scheme == trace.scheme
    csv2, side2 = io.save_trace(t2, tmp_path / "t2.csv")
    assert csv2.read_bytes() == csv_path.read_bytes()
    assert io.load_trace(side).counts.shape == trace.counts.shape


def test_trace_edit_detected(tmp_path, trace):
    csv_path, _ = io.save_trace(trace, tmp_path / "t.csv")
    csv_path.write_text(csv_path.read_text().replace("0", "1", 1))
    with pytest.raises(io.HashMismatchError):
        io.load_trace(csv_path)


def test_g2_record_round_trip(tmp_path, stream):
    r = analyze_stream(stream, 1.0, 256e-12, 30e-9, (15e-9, 30e-9))
    r2 = io.load_g2(io.save_g2(r, tmp_path / "g2.json"))
    assert r2.g2_0 == r.g2_0 and r2.g2_0_err == r.g2_0_err
    np.testing.assert_array_equal(r2.g2_corr, r.g2_corr)


def test_stats_record_round_trip(tmp_path, trace):
    s = per_sweep_statistics(assemble_single_sweeps(trace), trace.laser_power,
                             trace.detection_time_per_point)
    s2 = io.load_stats(io.save_stats(s, tmp_path / "st.json"))
    assert s2.sigma_center == s.sigma_center
    assert [f.center for f in s2.per_sweep] == [f.center for f in s.per_sweep]


def test_record_version_checked(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"format_version": 0, "kind": "g2_result"}))
    with pytest.raises(io.MigrationError):
        io.load_g2(p)


def test_manifest_detects_edit(tmp_path):
    a = io.write_table(tmp_path / "a.csv", ["x", "y"], [(1, 2.5), (2, 3.5)])
    b = io.atomic_write_text(tmp_path / "b.txt", "hello\n")
    io.write_manifest(tmp_path, [a, b], "abc", "simulate ple")
    man = io.verify_manifest(tmp_path)
    assert [e["path"] for e in man["files"]] == ["a.csv", "b.txt"]
    b.write_text("hellO\n")
    with pytest.raises(io.HashMismatchError, match="b.txt"):
        io.verify_manifest(tmp_path)
    b.unlink()
    with pytest.raises(io.CorruptionError, match="missing"):
        io.verify_manifest(tmp_path)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_table_round_trip(tmp_path, fmt):
    rows = [(0.5, 1.0, 3), (1.5, 2.0, 4)]
    p = io.write_table(tmp_path / "h.csv", ["lo", "hi", "n"], rows, fmt)
    cols, arr = io.read_table(p)
    assert cols == ["lo", "hi", "n"]
    np.testing.assert_array_equal(arr, np.array(rows, float))


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write_bytes(tmp_path / "f.bin", b"abc")
    io.atomic_write_bytes(tmp_path / "f.bin", b"xyz")
    assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]
    assert (tmp_path / "f.bin").read_bytes() == b"xyz"


def test_depth_profile_angstrom_header(tmp_path):
    p = tmp_path / "srim.txt"
    p.write_text("Depth (Ang.)  Si-Atoms\n-----\n100 1e4\n200 2e4\n")
    d, y = io.read_depth_profile(p)
    np.testing.assert_allclose(d, [10.0, 20.0])
    d, _ = io.read_depth_profile(p, "nm")
    np.testing.assert_allclose(d, [100.0, 200.0])
