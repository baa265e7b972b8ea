"""Prediction benchmark and the two closed-loop experiments (slip, corridor)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, RandomWalkCommands
from .metrics import DegenerateMetricWarning, cross_corr_coeff, nrmsd, summarize, welch_t_test
from .predictive import (ControllerState, EchoPTPredictor, FlowPredictor, NaivePredictor,
                         corridor_controller, data_validity_gate, predict_ar_arrays,
                         slip_error_signal)
from .sim import (NO_SLIP, BurstSchedule, Energyscape, Pose2D, ReflectorMap, SensorConfig,
                  SlipState, VelocityCommand, executed_command, make_burst_schedule, measure,
                  noise_schedule, step_kinematics, wrap_angle)

FRAME_PERIOD = 0.2
HORIZONS = (1, 3, 5, 10)


def _predictors(params):
    preds = [NaivePredictor(FRAME_PERIOD), FlowPredictor(FRAME_PERIOD)]
    if params is not None:
        preds.append(EchoPTPredictor(params, FRAME_PERIOD))
    return preds


def _quiet_metrics(pred, target):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMetricWarning)
        return cross_corr_coeff(pred, target), nrmsd(pred, target)


# -- table-style benchmark ---------------------------------------------------

@dataclass
class BenchResult:
    rows: list            # per-sample: method, horizon, sample, start, cc, nrmsd
    summary: list         # per method x horizon: mean/std of cc and nrmsd
    tests: list           # Welch tests of echopt against each baseline

    def mean_cc(self, method, horizon):
        return next(s["cc_mean"] for s in self.summary
                    if s["method"] == method and s["horizon"] == horizon)

    def mean_nrmsd(self, method, horizon):
        return next(s["nrmsd_mean"] for s in self.summary
                    if s["method"] == method and s["horizon"] == horizon)


def bench_sequences(ds: Dataset, n_stacks: int, n_frames: int, max_h: int, seed: int):
    """Evenly spaced-at-random held-out windows: history, commands and futures."""
    M = len(ds) - n_frames - max_h + 1
    if M < n_stacks:
        raise ValueError(f"dataset holds only {max(M, 0)} windows, {n_stacks} requested")
    rng = np.random.default_rng(seed)
    starts = np.sort(rng.choice(M, size=n_stacks, replace=False))
    hist = starts[:, None] + np.arange(n_frames)[None, :]
    fut = starts[:, None] + n_frames + np.arange(max_h)[None, :]
    cmds = ds.commands
    return (starts, ds.frames[hist].astype(np.float64), cmds[hist], cmds[fut],
            ds.frames[fut].astype(np.float64))


def run_bench(ds: Dataset, params=None, n_stacks=200, horizons=HORIZONS, seed=0,
              n_frames=None) -> BenchResult:
    n_frames = params.cfg.n_frames if params is not None else (n_frames or 3)
    max_h = max(horizons)
    starts, frames, hcmds, fcmds, targets = bench_sequences(ds, n_stacks, n_frames, max_h, seed)
    like = ds.scape(0)
    rows, summary, tests = [], [], []
    per = {}
    for p in _predictors(params):
        preds = predict_ar_arrays(p, frames, hcmds, fcmds, max_h, like)
        for h in horizons:
            ccs, nrs = [], []
            for i in range(n_stacks):
                cc, nr = _quiet_metrics(preds[i, h - 1], targets[i, h - 1])
                ccs.append(cc)
                nrs.append(nr)
                rows.append({"method": p.name, "horizon": h, "sample": i, "start": int(starts[i]),
                             "cc": cc, "nrmsd": nr})
            per[(p.name, h)] = (np.array(ccs), np.array(nrs))
            cm, cs = summarize(ccs)
            nm, ns = summarize(nrs)
            summary.append({"method": p.name, "horizon": h, "n": n_stacks, "cc_mean": cm,
                            "cc_std": cs, "nrmsd_mean": nm, "nrmsd_std": ns})
    if params is not None:
        for h in horizons:
            for base in ("naive", "flow"):
                t_cc, p_cc = welch_t_test(per[("echopt", h)][0], per[(base, h)][0])
                t_nr, p_nr = welch_t_test(per[("echopt", h)][1], per[(base, h)][1])
                tests.append({"horizon": h, "baseline": base, "t_cc": t_cc, "p_cc": p_cc,
                              "t_nrmsd": t_nr, "p_nrmsd": p_nr})
    return BenchResult(rows, summary, tests)


# -- slip experiment ---------------------------------------------------------

@dataclass
class SlipConfig:
    duration: float = 50.0
    both_window: tuple = (10.0, 16.0)
    both_slip: float = 0.8
    single_window: tuple = (30.0, 36.0)
    single_slip: float = 0.6
    horizons: tuple = (1, 3, 5)
    # a 0.5 m loop in the open part of the arena; it stays clear of the posts
    # even after the single-wheel slip shifts its centre
    v_lin: float = 0.25
    omega_r: float = 0.5
    start: tuple = (0.5, -0.3, 0.0)
    snr_db: float = 5.0
    seed: int = 0

    def slip_at(self, t):
        eps = 1e-9
        if self.both_window[0] - eps <= t < self.both_window[1] - eps:
            return SlipState(self.both_slip, self.both_slip)
        if self.single_window[0] - eps <= t < self.single_window[1] - eps:
            return SlipState(self.single_slip, 0.0)
        return NO_SLIP

    def window_of(self, t):
        eps = 1e-9
        if self.both_window[0] - eps <= t < self.both_window[1] - eps:
            return "both"
        if self.single_window[0] - eps <= t < self.single_window[1] - eps:
            return "single"
        return "none"


@dataclass
class SlipRun:
    times: np.ndarray
    poses: list
    commanded: np.ndarray
    executed: np.ndarray
    windows: list
    eps: dict = field(default_factory=dict)      # (method, horizon) -> array over times

    def series(self, method, horizon):
        return self.eps[(method, horizon)]


def simulate_slip_drive(world: ReflectorMap, sensor: SensorConfig, cfg: SlipConfig):
    """Drive a constant-curvature loop; slip alters only the executed motion.

    Frame k is measured at time k*dt after the step from k-1 to k, whose
    slip state is taken at the step's start time.
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration / FRAME_PERIOD))
    pose = Pose2D(*cfg.start)
    cmd = VelocityCommand(cfg.v_lin, cfg.omega_r)
    frames, poses, commanded, executed, times = [], [], [], [], []
    for k in range(n):
        t = k * FRAME_PERIOD
        slip = cfg.slip_at(t - FRAME_PERIOD) if k else NO_SLIP
        exe = executed_command(cmd, slip)
        if k:
            pose = step_kinematics(pose, cmd, FRAME_PERIOD, slip)
        frames.append(measure(world, pose, sensor, cfg.snr_db, rng, t).data)
        poses.append(pose)
        commanded.append(cmd.as_tuple())
        executed.append(exe.as_tuple())
        times.append(t)
    return (np.array(times), np.stack(frames), np.array(commanded), np.array(executed), poses)


def run_slip_experiment(world, sensor, params=None, cfg: SlipConfig | None = None) -> SlipRun:
    cfg = cfg or SlipConfig()
    times, frames, commanded, executed, poses = simulate_slip_drive(world, sensor, cfg)
    # a window is tagged by the motion that produced the predicted frame
    windows = [cfg.window_of(t - FRAME_PERIOD) for t in times]
    run = SlipRun(times, poses, commanded, executed, windows)
    like = Energyscape(frames[0], sensor.r_max, sensor.fov)
    max_h = max(cfg.horizons)
    N = len(times)
    for p in _predictors(params):
        n = p.n_history
        starts = np.arange(0, N - n - 1 + 1)
        first_target = starts + n
        hist = starts[:, None] + np.arange(n)[None, :]
        k = min(max_h, N - n)
        fut = np.minimum(first_target[:, None] + np.arange(k)[None, :], N - 1)
        preds = predict_ar_arrays(p, frames[hist], commanded[hist], commanded[fut], k, like)
        for h in cfg.horizons:
            eps = np.full(N, np.nan)
            for s_i, s in enumerate(starts):
                tgt = s + n + h - 1
                if tgt < N:
                    eps[tgt] = slip_error_signal(preds[s_i, h - 1], frames[tgt])
            run.eps[(p.name, h)] = eps
    return run


def slip_statistics(run: SlipRun, method="echopt", horizon=5):
    e = run.series(method, horizon)
    w = np.array(run.windows)
    ok = np.isfinite(e)
    out = e[ok & (w == "none")]
    both = e[ok & (w == "both")]
    single = e[ok & (w == "single")]
    med_out = float(np.median(out))
    p95 = float(np.percentile(out, 95))
    return {"method": method, "horizon": horizon, "median_out": med_out, "p95_out": p95,
            "median_both": float(np.median(both)),
            "both_ratio": float(np.median(both) / med_out),
            "single_frac_above_p95": float(np.mean(single > p95)),
            "max_out_over_median": float(out.max() / med_out)}


# -- corridor experiment -----------------------------------------------------

CONDITIONS = ("clean", "noisy", "noisy+prediction")


@dataclass
class CorridorConfig:
    runs: int = 50
    timeout: float = 120.0
    snr_db: float = 5.0
    burst_snr_db: float = -80.0
    burst_duty: float = 0.3
    burst_length: float = 1.2
    seed: int = 0
    controller: dict = field(default_factory=dict)
    lin_accel: float = 0.25
    ang_accel: float = 4.0


@dataclass
class CorridorRun:
    condition: str
    run: int
    trajectory: list            # (t, x, y, heading)
    travel_time: float
    arrived: bool
    midline_deviations: list
    stops: int
    gate_failures: int
    predicted_frames: int


class BaseDynamics:
    """Acceleration-limited tracking of the commanded body velocity."""

    def __init__(self, lin_accel, ang_accel):
        self.lin_accel = lin_accel
        self.ang_accel = ang_accel
        self.v = 0.0
        self.w = 0.0

    def track(self, cmd: VelocityCommand, dt) -> VelocityCommand:
        dv = self.lin_accel * dt
        dw = self.ang_accel * dt
        self.v += float(np.clip(cmd.v_lin - self.v, -dv, dv))
        self.w += float(np.clip(cmd.omega_r - self.w, -dw, dw))
        return VelocityCommand(self.v, self.w)


def _spawn(world: ReflectorMap, rng):
    box = world.spawn_boxes[int(rng.integers(len(world.spawn_boxes)))]
    x0, y0, x1, y1, h0, h1 = box
    return Pose2D(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), float(rng.uniform(h0, h1)))


def _midline_offset(world: ReflectorMap, pose: Pose2D):
    """Signed distance from the corridor axis and the along-axis coordinate."""
    (sx, sy), (ex, ey) = world.corridor["start"], world.corridor["end"]
    L = math.hypot(ex - sx, ey - sy)
    ux, uy = (ex - sx) / L, (ey - sy) / L
    dx, dy = pose.x - sx, pose.y - sy
    return -uy * dx + ux * dy, ux * dx + uy * dy


def run_corridor(world: ReflectorMap, sensor: SensorConfig, condition: str, run: int,
                 cfg: CorridorConfig, params=None) -> CorridorRun:
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; choose from {CONDITIONS}")
    if condition == "noisy+prediction" and params is None:
        raise ValueError("the noisy+prediction condition needs a trained model")
    spawn_rng, noise_rng, burst_rng = np.random.default_rng([cfg.seed, run]).spawn(3)
    pose = _spawn(world, spawn_rng)
    schedule = None
    if condition != "clean":
        schedule = make_burst_schedule(cfg.timeout, burst_rng, cfg.burst_duty, cfg.burst_length,
                                       FRAME_PERIOD, burst_snr_db=cfg.burst_snr_db,
                                       base_snr_db=cfg.snr_db)
    state = ControllerState(**cfg.controller)
    base = BaseDynamics(cfg.lin_accel, cfg.ang_accel)
    predictor = EchoPTPredictor(params, FRAME_PERIOD) if condition == "noisy+prediction" else None
    wx, wy, wr = world.waypoint
    (sx, sy), (ex, ey) = world.corridor["start"], world.corridor["end"]
    wp_along = _midline_offset(world, Pose2D(wx, wy, 0.0))[1]
    history, hist_cmds = [], []
    last_cmd = VelocityCommand(0.0, 0.0)
    traj, devs = [], []
    n_pred = 0
    steps = int(round(cfg.timeout / FRAME_PERIOD))
    arrived, t = False, 0.0
    for k in range(steps + 1):
        t = k * FRAME_PERIOD
        traj.append((t, pose.x, pose.y, pose.heading))
        if math.hypot(pose.x - wx, pose.y - wy) <= wr:
            arrived = True
            break
        if k == steps:
            break
        off, along = _midline_offset(world, pose)
        if 0.0 <= along <= wp_along:
            devs.append(abs(off))
        snr = cfg.snr_db if schedule is None else noise_schedule(t, schedule)
        frame = measure(world, pose, sensor, snr, noise_rng, t)
        used = frame
        if predictor is not None and not data_validity_gate(frame, state.gate_db):
            if len(history) >= predictor.n_history:
                used = predictor.predict(history, hist_cmds, last_cmd)
                used = used.with_data(used.data, t)
                n_pred += 1
        history = (history + [used])[-3:]
        hist_cmds = (hist_cmds + [last_cmd])[-3:]
        cmd = corridor_controller(used, pose, (wx, wy), state)
        exe = base.track(cmd, FRAME_PERIOD)
        pose = step_kinematics(pose, exe, FRAME_PERIOD)
        last_cmd = exe
    travel = t if arrived else cfg.timeout
    return CorridorRun(condition, run, traj, travel, arrived, devs, state.stops,
                       state.gate_failures, n_pred)


def run_corridor_experiment(world, sensor, cfg: CorridorConfig, params=None,
                            conditions=CONDITIONS):
    return {c: [run_corridor(world, sensor, c, r, cfg, params) for r in range(cfg.runs)]
            for c in conditions}


def corridor_statistics(runs):
    travel = np.array([r.travel_time for r in runs])
    devs = np.concatenate([np.asarray(r.midline_deviations, dtype=float) for r in runs] or [np.zeros(0)])
    return {"runs": len(runs), "arrivals": int(sum(r.arrived for r in runs)),
            "median_travel_time": float(np.median(travel)),
            "median_abs_deviation": float(np.median(devs)) if devs.size else math.nan,
            "mean_stops": float(np.mean([r.stops for r in runs])),
            "mean_predicted_frames": float(np.mean([r.predicted_frames for r in runs]))}
