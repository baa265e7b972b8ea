"""Differential-drive kinematics and a surrogate 2D in-air sonar renderer.

The renderer is deliberately simple: every reflector deposits a separable
point-spread function (Gaussian pulse envelope along range, squared sinc
along azimuth) weighted by a Gaussian directivity and 1/r^2 spreading.
Occlusion, multipath and Doppler are not modelled.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

INF_SNR = math.inf


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w == -math.pi:
        w = math.pi
    return w


def _require_finite(**values):
    for name, v in values.items():
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        _require_finite(x=self.x, y=self.y, heading=self.heading)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


@dataclass(frozen=True)
class VelocityCommand:
    v_lin: float = 0.0
    omega_r: float = 0.0

    def __post_init__(self):
        _require_finite(v_lin=self.v_lin, omega_r=self.omega_r)

    def __neg__(self):
        return VelocityCommand(-self.v_lin, -self.omega_r)

    def as_tuple(self):
        return (self.v_lin, self.omega_r)


@dataclass(frozen=True)
class SlipState:
    left_slip: float = 0.0
    right_slip: float = 0.0

    def __post_init__(self):
        for name in ("left_slip", "right_slip"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


NO_SLIP = SlipState()


def executed_command(cmd: VelocityCommand, slip: SlipState = NO_SLIP,
                     wheel_base: float = 0.3) -> VelocityCommand:
    """The body velocity actually realised when the wheels slip."""
    if wheel_base <= 0:
        raise ValueError("wheel_base must be positive")
    v_left = (cmd.v_lin - 0.5 * cmd.omega_r * wheel_base) * (1.0 - slip.left_slip)
    v_right = (cmd.v_lin + 0.5 * cmd.omega_r * wheel_base) * (1.0 - slip.right_slip)
    return VelocityCommand(0.5 * (v_left + v_right), (v_right - v_left) / wheel_base)


def arc_displacement(v: float, omega: float, dt: float):
    """Body-frame displacement (dx, dy, dphi) of an exact constant-twist arc."""
    dphi = omega * dt
    # chord of length v*dt*sinc(dphi/2) at half the turn; avoids the
    # cancellation in 1 - cos(dphi) when the turn is tiny
    half = 0.5 * dphi
    chord = v * dt * (math.sin(half) / half if half else 1.0)
    dx = chord * math.cos(half)
    dy = chord * math.sin(half)
    return dx, dy, dphi


def step_kinematics(pose: Pose2D, cmd: VelocityCommand, dt: float,
                    slip: SlipState = NO_SLIP, wheel_base: float = 0.3) -> Pose2D:
    """Integrate one exact-arc differential-drive step."""
    _require_finite(dt=dt, wheel_base=wheel_base)
    if dt <= 0:
        raise ValueError("dt must be positive")
    exe = executed_command(cmd, slip, wheel_base)
    dx, dy, dphi = arc_displacement(exe.v_lin, exe.omega_r, dt)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    return Pose2D(pose.x + c * dx - s * dy, pose.y + s * dx + c * dy, pose.heading + dphi)


@dataclass(frozen=True)
class SensorConfig:
    """Polar sonar grid and point-spread-function parameters.

    ``base_snr_db`` is the measurement SNR used when no burst is active;
    ``floor_db`` sets the deterministic render floor below the strongest
    deposit. ``directivity_sigma = inf`` disables the directivity weighting.
    """
    num_ranges: int = 128
    num_azimuths: int = 64
    r_max: float = 5.0
    fov: float = math.radians(120.0)
    range_sigma: float = 0.05
    beam_null_spacing: float = 0.12
    directivity_sigma: float = 0.6
    base_snr_db: float = 5.0
    floor_db: float = 40.0
    r_min: float = 0.1

    def __post_init__(self):
        for name in ("num_ranges", "num_azimuths", "r_max", "fov", "range_sigma",
                     "beam_null_spacing", "directivity_sigma", "r_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SensorConfig.{name} must be positive")
        if self.fov > math.pi + 1e-12:
            raise ValueError("fov must not exceed pi")

    @property
    def range_bin(self) -> float:
        return self.r_max / self.num_ranges

    @property
    def azimuth_bin(self) -> float:
        return self.fov / self.num_azimuths

    @property
    def ranges(self) -> np.ndarray:
        return (np.arange(self.num_ranges) + 0.5) * self.range_bin

    @property
    def azimuths(self) -> np.ndarray:
        return -0.5 * self.fov + (np.arange(self.num_azimuths) + 0.5) * self.azimuth_bin

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Energyscape:
    """Range x azimuth echo-energy grid (rows are range bins)."""
    data: np.ndarray
    r_max: float
    fov: float
    timestamp: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"energyscape data must be 2D, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def range_bin(self) -> float:
        return self.r_max / self.data.shape[0]

    @property
    def azimuth_bin(self) -> float:
        return self.fov / self.data.shape[1]

    def with_data(self, data, timestamp=None):
        return Energyscape(data, self.r_max, self.fov,
                           self.timestamp if timestamp is None else timestamp)

    def noise_floor(self) -> float:
        return float(np.median(self.data))

    def is_valid(self) -> bool:
        return bool(np.all(np.isfinite(self.data)) and np.all(self.data >= 0))


@dataclass(frozen=True)
class Reflector:
    x: float
    y: float
    radius: float = 0.0
    reflectivity: float = 1.0


@dataclass
class ReflectorMap:
    """Reflector world plus the metadata experiments need.

    ``bounds`` is (xmin, ymin, xmax, ymax); spawn boxes are
    (xmin, ymin, xmax, ymax, heading_min, heading_max).
    """
    reflectors: list
    bounds: tuple
    spawn_boxes: list = field(default_factory=list)
    waypoint: tuple | None = None
    corridor: dict | None = None
    name: str = "world"

    def __post_init__(self):
        self.reflectors = [r if isinstance(r, Reflector) else Reflector(*r) for r in self.reflectors]
        xmin, ymin, xmax, ymax = self.bounds
        for r in self.reflectors:
            if r.radius < 0:
                raise ValueError("reflector radius must be >= 0")
            if r.reflectivity <= 0:
                raise ValueError("reflector reflectivity must be > 0")
            if not (xmin <= r.x <= xmax and ymin <= r.y <= ymax):
                raise ValueError(f"reflector at ({r.x}, {r.y}) outside bounds {self.bounds}")
        self._arr = np.array([[r.x, r.y, r.radius, r.reflectivity] for r in self.reflectors],
                             dtype=np.float64).reshape(-1, 4)

    @property
    def array(self) -> np.ndarray:
        return self._arr

    def add(self, reflector: Reflector) -> "ReflectorMap":
        return replace(self, reflectors=list(self.reflectors) + [reflector])

    def to_dict(self):
        d = {
            "name": self.name,
            "bounds": list(self.bounds),
            "reflectors": [[r.x, r.y, r.radius, r.reflectivity] for r in self.reflectors],
            "spawn_boxes": [list(b) for b in self.spawn_boxes],
            "waypoint": list(self.waypoint) if self.waypoint is not None else None,
        }
        if self.corridor is not None:
            d["corridor"] = self.corridor
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                reflectors=[tuple(r) for r in d["reflectors"]],
                bounds=tuple(d["bounds"]),
                spawn_boxes=[tuple(b) for b in d.get("spawn_boxes", [])],
                waypoint=tuple(d["waypoint"]) if d.get("waypoint") is not None else None,
                corridor=d.get("corridor"),
                name=d.get("name", "world"),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed world description: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_world(path) -> ReflectorMap:
    with open(path) as fh:
        return ReflectorMap.from_dict(json.load(fh))


def save_world(world: ReflectorMap, path):
    Path(path).write_text(json.dumps(world.to_dict(), indent=1, sort_keys=True) + "\n")


def builtin_world(name: str = "arena") -> ReflectorMap:
    return load_world(Path(__file__).with_name("worlds") / f"{name}.json")


def directivity(theta, sigma):
    if math.isinf(sigma):
        return np.ones_like(np.asarray(theta, dtype=np.float64))
    return np.exp(-0.5 * (np.asarray(theta) / sigma) ** 2)


def azimuth_psf(dtheta, null_spacing):
    """Squared sinc with its first null at ``null_spacing``."""
    return np.sinc(np.asarray(dtheta) / null_spacing) ** 2


def range_psf(dr, sigma):
    return np.exp(-0.5 * (np.asarray(dr) / sigma) ** 2)


def reflector_polar(world: ReflectorMap, pose: Pose2D, sensor: SensorConfig):
    """Sensor-frame (range, azimuth, amplitude) of every reflector.

    A circle reflector returns from its nearest surface point, so its range
    is centre distance minus radius.
    """
    arr = world.array
    if arr.shape[0] == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    dx = arr[:, 0] - pose.x
    dy = arr[:, 1] - pose.y
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    fx = c * dx + s * dy
    fy = -s * dx + c * dy
    dist = np.hypot(fx, fy)
    r = dist - arr[:, 2]
    theta = np.arctan2(fy, fx)
    amp = arr[:, 3] * directivity(theta, sensor.directivity_sigma) / np.maximum(r, sensor.r_min) ** 2
    inside = r <= 0
    return np.where(inside, sensor.r_min, r), theta, np.where(inside, 0.0, amp)


def render_polar(r, theta, amp, sensor: SensorConfig):
    """Deposit point responses at sensor-frame polar coordinates (no floor)."""
    margin_theta = 0.5 * sensor.fov + 6.0 * sensor.beam_null_spacing
    margin_r = sensor.r_max + 6.0 * sensor.range_sigma
    keep = (np.abs(theta) <= margin_theta) & (r <= margin_r) & (amp > 0)
    r, theta, amp = r[keep], theta[keep], amp[keep]
    grid = np.zeros((sensor.num_ranges, sensor.num_azimuths))
    if r.size == 0:
        return grid
    g_r = range_psf(sensor.ranges[:, None] - r[None, :], sensor.range_sigma)
    g_t = azimuth_psf(theta[:, None] - sensor.azimuths[None, :], sensor.beam_null_spacing)
    return (g_r * amp[None, :]) @ g_t


def floor_level(peak: float, sensor: SensorConfig) -> float:
    ref = peak if peak > 0 else 1.0 / sensor.r_max ** 2
    return ref * 10.0 ** (-sensor.floor_db / 10.0)


def render_energyscape(world: ReflectorMap, pose: Pose2D, sensor: SensorConfig,
                       timestamp: float = 0.0) -> Energyscape:
    """Noise-free energyscape seen from ``pose``, plus the constant render floor."""
    r, theta, amp = reflector_polar(world, pose, sensor)
    grid = render_polar(r, theta, amp, sensor)
    grid += floor_level(float(grid.max()) if grid.size else 0.0, sensor)
    return Energyscape(grid, sensor.r_max, sensor.fov, timestamp)


@dataclass(frozen=True)
class BurstSchedule:
    """Noise bursts of fixed length; times are seconds."""
    starts: tuple = ()
    length: float = 1.2
    burst_snr_db: float = -80.0
    base_snr_db: float = 5.0

    def in_burst(self, t: float) -> bool:
        eps = 1e-9
        return any(s - eps <= t < s + self.length - eps for s in self.starts)

    def to_dict(self):
        return {"starts": list(self.starts), "length": self.length,
                "burst_snr_db": self.burst_snr_db, "base_snr_db": self.base_snr_db}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d.get("starts", ())), d.get("length", 1.2),
                   d.get("burst_snr_db", -80.0), d.get("base_snr_db", 5.0))


def make_burst_schedule(duration: float, rng: np.random.Generator, duty: float = 0.3,
                        length: float = 1.2, frame_period: float = 0.2,
                        jitter: float = 0.4, burst_snr_db: float = -80.0,
                        base_snr_db: float = 5.0) -> BurstSchedule:
    """Periodic bursts with a random phase and per-burst jitter on the frame grid."""
    if not 0 < duty < 1:
        raise ValueError("duty must lie in (0, 1)")
    period = length / duty
    n_jit = int(round(jitter / frame_period))
    phase = frame_period * int(rng.integers(0, max(1, int(round(period / frame_period)))))
    starts = []
    k = 0
    while True:
        base = phase + k * period
        if base >= duration:
            break
        j = int(rng.integers(-n_jit, n_jit + 1)) if n_jit else 0
        s = round((base + j * frame_period) / frame_period) * frame_period
        if s < 0:
            s = 0.0
        if not starts or s >= starts[-1] + length:
            starts.append(round(s, 9))
        k += 1
    return BurstSchedule(tuple(starts), length, burst_snr_db, base_snr_db)


def noise_schedule(t: float, schedule: BurstSchedule | None) -> float:
    """SNR in dB at time ``t``."""
    if schedule is None:
        return BurstSchedule().base_snr_db
    return schedule.burst_snr_db if schedule.in_burst(t) else schedule.base_snr_db


def inject_noise(scape: Energyscape, snr_db: float, rng: np.random.Generator) -> Energyscape:
    """Add full-wave rectified Gaussian noise at the requested SNR.

    Signal power is the mean squared clean cell value; the noise power is
    E[n^2] = sigma^2. An all-zero input gets unit-variance noise.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return scape.with_data(scape.data.copy())
    p_signal = float(np.mean(scape.data ** 2))
    sigma = math.sqrt(p_signal / 10.0 ** (snr_db / 10.0)) if p_signal > 0 else 1.0
    noise = np.abs(rng.standard_normal(scape.data.shape)) * sigma
    return scape.with_data(np.maximum(scape.data + noise, 0.0))


def measure(world, pose, sensor, snr_db, rng, timestamp=0.0) -> Energyscape:
    """Render and corrupt one frame the way the sensor would deliver it."""
    return inject_noise(render_energyscape(world, pose, sensor, timestamp), snr_db, rng)
