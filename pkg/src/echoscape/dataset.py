"""Frame datasets: random-walk generation, the binary file format and stacking.

File layout: one UTF-8 JSON header line terminated by ``\\n``, then one
record per frame. A record is a little-endian uint32 byte length followed
by eight little-endian float64 values (timestamp, commanded v and omega,
executed v and omega, pose x, y, heading) and the energyscape as
num_ranges*num_azimuths little-endian float32 values in row-major order.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import (NO_SLIP, Energyscape, Pose2D, ReflectorMap, SensorConfig, SlipState,
                  VelocityCommand, executed_command, measure, step_kinematics, wrap_angle)

FORMAT_VERSION = 1
FRAME_PERIOD = 0.2
V_RANGE = (-0.3, 0.3)
OMEGA_RANGE = (-1.0, 1.0)

_LEN = struct.Struct("<I")
_META = np.dtype("<f8")
_PIX = np.dtype("<f4")


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetHeader:
    sensor: SensorConfig
    frame_period: float = FRAME_PERIOD
    frame_count: int = 0
    world_hash: str = ""
    seed: int = 0
    snr_db: float = 5.0
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frame_period > 0:
            raise ValueError("frame_period must be positive")

    def to_dict(self):
        return {"format_version": self.format_version, "sensor": self.sensor.to_dict(),
                "frame_period": self.frame_period, "frame_count": self.frame_count,
                "world_hash": self.world_hash, "seed": self.seed, "snr_db": self.snr_db,
                "extra": self.extra}

    @classmethod
    def from_dict(cls, d):
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise DatasetFormatError(
                f"dataset format version {version!r} is not supported (expected {FORMAT_VERSION}); "
                "regenerate the file with gen-data")
        try:
            return cls(SensorConfig.from_dict(d["sensor"]), float(d["frame_period"]),
                       int(d["frame_count"]), str(d["world_hash"]), int(d["seed"]),
                       float(d.get("snr_db", 5.0)), version, dict(d.get("extra", {})))
        except (KeyError, TypeError) as exc:
            raise DatasetFormatError(f"malformed dataset header: {exc}") from exc


@dataclass
class FrameRecord:
    timestamp: float
    commanded: VelocityCommand
    executed: VelocityCommand
    pose: Pose2D
    data: np.ndarray

    def meta(self):
        return np.array([self.timestamp, *self.commanded.as_tuple(), *self.executed.as_tuple(),
                         self.pose.x, self.pose.y, self.pose.heading], dtype=_META)


@dataclass
class Dataset:
    """In-memory dataset: ``meta`` is (N, 8) float64, ``frames`` (N, R, A) float32."""
    header: DatasetHeader
    meta: np.ndarray
    frames: np.ndarray

    def __len__(self):
        return self.frames.shape[0]

    def record(self, i) -> FrameRecord:
        m = self.meta[i]
        return FrameRecord(float(m[0]), VelocityCommand(m[1], m[2]), VelocityCommand(m[3], m[4]),
                           Pose2D(m[5], m[6], m[7]), self.frames[i])

    def scape(self, i) -> Energyscape:
        s = self.header.sensor
        return Energyscape(self.frames[i], s.r_max, s.fov, float(self.meta[i, 0]))

    @property
    def commands(self):
        return self.meta[:, 1:3]


# -- I/O ------------------------------------------------------------------

def _record_bytes(rec: FrameRecord, n_pix: int) -> bytes:
    pix = np.ascontiguousarray(rec.data, dtype=_PIX).reshape(-1)
    if pix.size != n_pix:
        raise ValueError(f"payload has {pix.size} cells, header expects {n_pix}")
    body = rec.meta().tobytes() + pix.tobytes()
    return _LEN.pack(len(body)) + body


class DatasetWriter:
    """Sequential writer; the header's frame count is fixed up on close."""

    def __init__(self, path, header: DatasetHeader):
        self.path = Path(path)
        self.header = header
        self.n_pix = header.sensor.num_ranges * header.sensor.num_azimuths
        self._records = []

    def append(self, rec: FrameRecord):
        self._records.append(_record_bytes(rec, self.n_pix))

    def close(self):
        self.header.frame_count = len(self._records)
        head = json.dumps(self.header.to_dict(), sort_keys=True).encode("utf-8") + b"\n"
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(head)
                for r in self._records:
                    fh.write(r)
        except OSError as exc:
            raise OSError(f"cannot write dataset to {self.path}: {exc.strerror}") from exc
        return self.path


def write_dataset(path, header: DatasetHeader, records):
    w = DatasetWriter(path, header)
    for r in records:
        w.append(r)
    return w.close()


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetFormatError(f"{path}: missing JSON header line")
    try:
        header = DatasetHeader.from_dict(json.loads(raw[:nl].decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"{path}: header is not valid JSON ({exc})") from exc
    s = header.sensor
    n_pix = s.num_ranges * s.num_azimuths
    body_len = 8 * 8 + 4 * n_pix
    N = header.frame_count
    meta = np.empty((N, 8), dtype=np.float64)
    frames = np.empty((N, s.num_ranges, s.num_azimuths), dtype=np.float32)
    off = nl + 1
    for i in range(N):
        if off + 4 > len(raw):
            raise DatasetFormatError(f"{path}: truncated at record {i} of {N}")
        (n,) = _LEN.unpack_from(raw, off)
        if n != body_len:
            raise DatasetFormatError(f"{path}: record {i} has length {n}, expected {body_len}")
        off += 4
        if off + n > len(raw):
            raise DatasetFormatError(f"{path}: truncated at record {i} of {N}")
        meta[i] = np.frombuffer(raw, dtype=_META, count=8, offset=off)
        frames[i] = np.frombuffer(raw, dtype=_PIX, count=n_pix, offset=off + 64).reshape(
            s.num_ranges, s.num_azimuths)
        off += n
    if off != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - off} trailing bytes after {N} records")
    return Dataset(header, meta, frames)


# -- generation --------------------------------------------------------------

class RandomWalkCommands:
    """Piecewise-constant random-walk commands with uniform dwell times.

    Each dwell draws a new (v, omega) by a Gaussian step from the previous
    one, clipped to the allowed ranges. Near the world boundary the walk is
    overridden by a return-to-centre command so the robot stays in the map,
    and a command that would bring the robot within ``clearance`` of a
    reflector surface is replaced by its reverse or by turning on the spot.
    """

    def __init__(self, rng, world: ReflectorMap, dwell=(1.0, 4.0), v_step=0.15,
                 omega_step=0.5, margin=1.0, clearance=0.35):
        self.rng = rng
        self.world = world
        self.dwell = dwell
        self.v_step = v_step
        self.omega_step = omega_step
        self.margin = margin
        self.clearance = clearance
        self._refl = world.array
        self.cmd = VelocityCommand(float(rng.uniform(*V_RANGE)), float(rng.uniform(*OMEGA_RANGE)))
        self.remaining = float(rng.uniform(*dwell))

    def _outside(self, pose):
        x0, y0, x1, y1 = self.world.bounds
        m = self.margin
        return not (x0 + m <= pose.x <= x1 - m and y0 + m <= pose.y <= y1 - m)

    def _safe(self, pose, cmd, dt):
        if self._refl.size == 0:
            return True
        nxt = step_kinematics(pose, cmd, dt)
        gap = np.hypot(self._refl[:, 0] - nxt.x, self._refl[:, 1] - nxt.y) - self._refl[:, 2]
        here = np.hypot(self._refl[:, 0] - pose.x, self._refl[:, 1] - pose.y) - self._refl[:, 2]
        # moving away from an obstacle we are already too close to is allowed
        return bool(np.all((gap >= self.clearance) | (gap > here)))

    def next(self, pose: Pose2D, dt: float) -> VelocityCommand:
        cmd = self._propose(pose, dt)
        if self._safe(pose, cmd, dt):
            return cmd
        spin = 1.0 if cmd.omega_r >= 0 else -1.0
        for alt in (VelocityCommand(-cmd.v_lin, cmd.omega_r), VelocityCommand(0.0, spin)):
            if self._safe(pose, alt, dt):
                self.cmd = alt
                return alt
        self.cmd = VelocityCommand(0.0, spin)
        return self.cmd

    def _propose(self, pose: Pose2D, dt: float) -> VelocityCommand:
        if self._outside(pose):
            x0, y0, x1, y1 = self.world.bounds
            bearing = wrap_angle(math.atan2(0.5 * (y0 + y1) - pose.y,
                                            0.5 * (x0 + x1) - pose.x) - pose.heading)
            self.remaining = 0.0
            return VelocityCommand(0.2 * max(math.cos(bearing), 0.0),
                                   float(np.clip(1.5 * bearing, *OMEGA_RANGE)))
        if self.remaining <= 1e-9:
            v = float(np.clip(self.cmd.v_lin + self.rng.normal(0.0, self.v_step), *V_RANGE))
            w = float(np.clip(self.cmd.omega_r + self.rng.normal(0.0, self.omega_step), *OMEGA_RANGE))
            self.cmd = VelocityCommand(v, w)
            self.remaining = float(self.rng.uniform(*self.dwell))
        self.remaining -= dt
        return self.cmd


def _random_start(world: ReflectorMap, rng, margin=1.5, clearance=0.5):
    x0, y0, x1, y1 = world.bounds
    refl = world.array
    while True:
        pose = Pose2D(float(rng.uniform(x0 + margin, x1 - margin)),
                      float(rng.uniform(y0 + margin, y1 - margin)),
                      float(rng.uniform(-math.pi, math.pi)))
        if refl.size == 0 or np.min(np.hypot(refl[:, 0] - pose.x, refl[:, 1] - pose.y)
                                    - refl[:, 2]) >= clearance:
            return pose


def generate_records(world: ReflectorMap, sensor: SensorConfig, duration: float, seed: int,
                     frame_period: float = FRAME_PERIOD, snr_db: float = 5.0,
                     slip: SlipState = NO_SLIP):
    """Yield ``round(duration / frame_period)`` records of a random-walk drive."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    walk_rng, noise_rng = rng.spawn(2)
    walk = RandomWalkCommands(walk_rng, world)
    pose = _random_start(world, walk_rng)
    n = int(round(duration / frame_period))
    # one warm-up step so frame 0 also has the command that led into it
    for k in range(n):
        cmd = walk.next(pose, frame_period)
        exe = executed_command(cmd, slip)
        pose = step_kinematics(pose, cmd, frame_period, slip)
        t = k * frame_period
        scape = measure(world, pose, sensor, snr_db, noise_rng, t)
        yield FrameRecord(t, cmd, exe, pose, scape.data.astype(np.float32))


def generate_dataset(world: ReflectorMap, sensor: SensorConfig, duration: float, seed: int,
                     out_path, frame_period: float = FRAME_PERIOD, snr_db: float = 5.0):
    header = DatasetHeader(sensor, frame_period, 0, world.digest(), int(seed), snr_db,
                           extra={"duration": duration, "world": world.name})
    w = DatasetWriter(out_path, header)
    for rec in generate_records(world, sensor, duration, seed, frame_period, snr_db):
        w.append(rec)
    return w.close()


# -- stacks ------------------------------------------------------------------

@dataclass
class FrameStack:
    """``n_frames`` inputs (oldest first), ``n_frames + 1`` commands, optional target.

    ``commands[j]`` is the command that led into ``frames[j]``; the last
    command drives the step from the newest frame to the target.
    """
    frames: list
    commands: list
    target: Energyscape | None = None

    def __post_init__(self):
        if len(self.commands) != len(self.frames) + 1:
            raise ValueError(f"{len(self.frames)} frames need {len(self.frames) + 1} commands, "
                             f"got {len(self.commands)}")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"frames have differing shapes {shapes}")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame timestamps must be strictly increasing")

    @property
    def n_frames(self):
        return len(self.frames)

    def frame_array(self):
        return np.stack([f.data for f in self.frames])

    def velocity_vector(self):
        return np.array([c for cmd in self.commands for c in cmd.as_tuple()])


def make_stacks(ds: Dataset, n_frames: int = 3):
    """Sliding windows: stack i uses frames i..i+n-1 and predicts frame i+n."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    out = []
    for i in range(len(ds) - n_frames):
        frames = [ds.scape(j) for j in range(i, i + n_frames)]
        cmds = [VelocityCommand(*ds.meta[j, 1:3]) for j in range(i, i + n_frames + 1)]
        out.append(FrameStack(frames, cmds, ds.scape(i + n_frames)))
    return out


def stack_arrays(ds: Dataset, n_frames: int = 3, horizon: int = 1):
    """Vectorised stacks for training.

    Returns ``(inputs, velocities, targets, starts)`` with inputs
    (M, n_frames, R, A), velocities (M, 2*(n_frames+1)), targets
    (M, horizon, R, A) and the index of each window's first frame.
    ``horizon > 1`` yields the extra future frames needed for AR scoring;
    the matching future commands are in ``ds.commands``.
    """
    M = len(ds) - n_frames - horizon + 1
    if M <= 0:
        empty = np.zeros((0,), dtype=int)
        R, A = ds.frames.shape[1:]
        return (np.zeros((0, n_frames, R, A), np.float32), np.zeros((0, 2 * (n_frames + 1))),
                np.zeros((0, horizon, R, A), np.float32), empty)
    starts = np.arange(M)
    idx = starts[:, None] + np.arange(n_frames)[None, :]
    inputs = ds.frames[idx]
    vel = ds.commands[starts[:, None] + np.arange(n_frames + 1)[None, :]].reshape(M, -1)
    tidx = starts[:, None] + n_frames + np.arange(horizon)[None, :]
    return inputs, vel, ds.frames[tidx], starts
