import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from echoscape.dataset import (FORMAT_VERSION, OMEGA_RANGE, V_RANGE, Dataset, DatasetFormatError,
                               DatasetHeader, FrameRecord, FrameStack, RandomWalkCommands,
                               generate_dataset, generate_records, make_stacks, read_dataset,
                               stack_arrays, write_dataset)
from echoscape.sim import Energyscape, Pose2D, SensorConfig, VelocityCommand, step_kinematics

SMALL = SensorConfig(num_ranges=16, num_azimuths=8)


def _records(n, sensor=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    return [FrameRecord(0.2 * i, VelocityCommand(*rng.uniform(-0.3, 0.3, 2)),
                        VelocityCommand(*rng.uniform(-0.3, 0.3, 2)),
                        Pose2D(*rng.uniform(-1, 1, 3)),
                        rng.random((sensor.num_ranges, sensor.num_azimuths)).astype(np.float32))
            for i in range(n)]


def _ds(n, seed=0):
    recs = _records(n, seed=seed)
    meta = np.stack([r.meta() for r in recs]) if recs else np.zeros((0, 8))
    frames = np.stack([r.data for r in recs]) if recs else np.zeros((0, 16, 8), np.float32)
    return Dataset(DatasetHeader(SMALL, frame_count=n), meta, frames)


def test_duration_to_frame_count(arena):
    recs = list(generate_records(arena, SMALL, 60.0, seed=0))
    assert len(recs) == 300
    assert sum(1 for _ in generate_records(arena, SMALL, 25 * 60.0, seed=0)) == 7500


def test_generation_deterministic(tmp_path, arena):
    a = generate_dataset(arena, SMALL, 4.0, 3, tmp_path / "a.bin")
    b = generate_dataset(arena, SMALL, 4.0, 3, tmp_path / "b.bin")
    assert a.read_bytes() == b.read_bytes()
    c = generate_dataset(arena, SMALL, 4.0, 4, tmp_path / "c.bin")
    assert a.read_bytes() != c.read_bytes()


def test_generated_commands_respect_ranges(arena):
    recs = list(generate_records(arena, SMALL, 120.0, seed=5))
    v = np.array([r.commanded.v_lin for r in recs])
    w = np.array([r.commanded.omega_r for r in recs])
    assert V_RANGE[0] <= v.min() and v.max() <= V_RANGE[1]
    assert OMEGA_RANGE[0] <= w.min() and w.max() <= OMEGA_RANGE[1]
    # piecewise constant: far fewer changes than frames
    assert np.count_nonzero(np.diff(v)) < len(v) / 3


def test_poses_follow_commands(arena):
    recs = list(generate_records(arena, SMALL, 10.0, seed=6))
    for prev, cur in zip(recs, recs[1:]):
        nxt = step_kinematics(prev.pose, cur.commanded, 0.2)
        assert (nxt.x, nxt.y) == pytest.approx((cur.pose.x, cur.pose.y), abs=1e-12)


def test_dwell_within_bounds(arena):
    walk = RandomWalkCommands(np.random.default_rng(0), arena)
    assert 1.0 <= walk.remaining <= 4.0


def test_round_trip_bit_exact(tmp_path):
    recs = _records(7)
    hdr = DatasetHeader(SMALL, seed=9, world_hash="abc")
    path = write_dataset(tmp_path / "d.bin", hdr, recs)
    ds = read_dataset(path)
    assert ds.header.frame_count == 7 and ds.header.seed == 9 and ds.header.world_hash == "abc"
    assert ds.header.sensor == SMALL
    for i, r in enumerate(recs):
        back = ds.record(i)
        assert np.array_equal(back.data, r.data)
        assert back.commanded == r.commanded and back.executed == r.executed
        assert back.pose == r.pose and back.timestamp == r.timestamp


@given(n=st.integers(0, 6), seed=st.integers(0, 1000))
def test_round_trip_property(tmp_path_factory, n, seed):
    path = tmp_path_factory.mktemp("rt") / "x.bin"
    recs = _records(n, seed=seed)
    ds = read_dataset(write_dataset(path, DatasetHeader(SMALL), recs))
    assert len(ds) == n
    if n:
        assert np.array_equal(ds.frames, np.stack([r.data for r in recs]))
        assert np.array_equal(ds.meta, np.stack([r.meta() for r in recs]))


def test_payload_length_checked(tmp_path):
    bad = _records(1)[0]
    bad.data = np.zeros((3, 3), np.float32)
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "x.bin", DatasetHeader(SMALL), [bad])


def test_truncated_and_trailing_rejected(tmp_path):
    path = write_dataset(tmp_path / "d.bin", DatasetHeader(SMALL), _records(3))
    raw = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0\0")
    with pytest.raises(DatasetFormatError, match="trailing"):
        read_dataset(tmp_path / "x.bin")


def test_version_mismatch_rejected(tmp_path):
    path = write_dataset(tmp_path / "d.bin", DatasetHeader(SMALL), _records(1))
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    head = json.loads(raw[:nl])
    head["format_version"] = FORMAT_VERSION + 1
    (tmp_path / "v.bin").write_bytes(json.dumps(head).encode() + raw[nl:])
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(tmp_path / "v.bin")


def test_header_rejects_bad_period():
    with pytest.raises(ValueError):
        DatasetHeader(SMALL, frame_period=0.0)


def test_unwritable_path_reported(tmp_path, arena):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        generate_dataset(arena, SMALL, 1.0, 0, blocker / "sub" / "d.bin")


def test_make_stacks_counts():
    assert len(make_stacks(_ds(4), 3)) == 1
    assert make_stacks(_ds(3), 3) == []
    assert len(make_stacks(_ds(20), 3)) == 17


def test_stack_contents_and_arrays_agree():
    ds = _ds(9)
    stacks = make_stacks(ds, 3)
    X, V, Y, starts = stack_arrays(ds, 3)
    assert X.shape == (6, 3, 16, 8) and V.shape == (6, 8) and Y.shape == (6, 1, 16, 8)
    for i, s in enumerate(stacks):
        assert np.array_equal(s.frame_array(), X[i])
        assert np.array_equal(s.velocity_vector(), V[i])
        assert np.array_equal(s.target.data, Y[i, 0])
        assert len(s.commands) == 4
    assert np.array_equal(starts, np.arange(6))


def test_frame_stack_validation():
    f = [Energyscape(np.zeros((4, 4)), 5.0, 2.0, t) for t in (0.0, 0.2)]
    with pytest.raises(ValueError):
        FrameStack(f, [VelocityCommand()] * 2)
    with pytest.raises(ValueError):
        FrameStack(f[::-1], [VelocityCommand()] * 3)
