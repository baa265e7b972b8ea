"""Predictors, auto-regressive rollout, the slip error signal and the corridor controller."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import flow
from .dataset import FrameStack
from .metrics import cross_corr_coeff
from .model import ModelParams, predict_arrays
from .sim import Energyscape, Pose2D, VelocityCommand, wrap_angle

EPSILON_CEILING = 1e9
FRAME_PERIOD = 0.2


class Predictor:
    """Common interface: next frame from history frames and commands.

    ``commands[j]`` led into ``frames[j]``; ``next_cmd`` drives the step
    being predicted.
    """
    name = "base"
    n_history = 1

    def __init__(self, dt: float = FRAME_PERIOD):
        self.dt = dt

    def predict(self, frames, commands, next_cmd) -> Energyscape:
        return self.predict_batch(np.stack([f.data for f in frames[-self.n_history:]])[None],
                                  np.array([[c.v_lin, c.omega_r] for c in commands[-self.n_history:]])[None],
                                  np.array([next_cmd.as_tuple()]), frames[-1])[0]

    def predict_batch(self, frames, commands, next_cmds, like: Energyscape):
        """Vectorised variant on arrays: frames (B, n, R, A), commands (B, n, 2),
        next_cmds (B, 2). Returns a list of Energyscapes shaped like ``like``."""
        raise NotImplementedError


class _AnalyticPredictor(Predictor):
    n_history = 1
    _fn = None

    def predict_batch(self, frames, commands, next_cmds, like):
        out = []
        for b in range(frames.shape[0]):
            src = like.with_data(np.asarray(frames[b, -1], dtype=np.float64))
            out.append(type(self)._fn(src, VelocityCommand(*next_cmds[b]), self.dt))
        return out


class NaivePredictor(_AnalyticPredictor):
    name = "naive"
    _fn = staticmethod(flow.naive_shift)


class FlowPredictor(_AnalyticPredictor):
    name = "flow"
    _fn = staticmethod(flow.flow_warp)


class EchoPTPredictor(Predictor):
    name = "echopt"

    def __init__(self, params: ModelParams, dt: float = FRAME_PERIOD):
        super().__init__(dt)
        self.params = params
        self.n_history = params.cfg.n_frames

    def predict_batch(self, frames, commands, next_cmds, like):
        n = self.n_history
        if frames.shape[1] < n:
            raise ValueError(f"EchoPT needs {n} history frames, got {frames.shape[1]}")
        vel = np.concatenate([commands[:, -n:, :].reshape(frames.shape[0], -1),
                              np.asarray(next_cmds, dtype=np.float64)], axis=1)
        y = predict_arrays(self.params, frames[:, -n:], vel)
        return [like.with_data(y[b]) for b in range(y.shape[0])]


def make_predictor(method: str, params: ModelParams | None = None, dt: float = FRAME_PERIOD):
    method = method.lower()
    if method == "naive":
        return NaivePredictor(dt)
    if method == "flow":
        return FlowPredictor(dt)
    if method == "echopt":
        if params is None:
            raise ValueError("the echopt predictor needs trained parameters (--model)")
        return EchoPTPredictor(params, dt)
    raise ValueError(f"unknown method {method!r}; choose naive, flow or echopt")


def predict_ar(p: Predictor, history: FrameStack, future_cmds, k: int):
    """Roll ``p`` forward ``k`` steps, feeding predictions back as history.

    ``history.commands[:n]`` are the commands that led into the history
    frames; step ``j`` (1-based) is driven by ``future_cmds[j-1]``.
    Returns the ``k`` predicted frames.
    """
    if k < 1:
        raise ValueError("horizon k must be >= 1")
    if len(future_cmds) < k:
        raise ValueError(f"need {k} future commands, got {len(future_cmds)}")
    n = history.n_frames
    frames = list(history.frames)
    cmds = list(history.commands[:n])
    out = []
    for j in range(k):
        nxt = future_cmds[j]
        pred = p.predict(frames, cmds, nxt)
        pred = pred.with_data(pred.data, frames[-1].timestamp + p.dt)
        out.append(pred)
        frames = frames[1:] + [pred]
        cmds = cmds[1:] + [nxt]
    return out


def predict_ar_arrays(p: Predictor, frames, commands, future_cmds, k: int, like: Energyscape):
    """Batched rollout. frames (B, n, R, A); commands (B, n, 2); future (B, >=k, 2).

    Returns (B, k, R, A); entry ``[:, j]`` is the AR-(j+1) prediction.
    """
    if k < 1:
        raise ValueError("horizon k must be >= 1")
    frames = np.asarray(frames, dtype=np.float64).copy()
    commands = np.asarray(commands, dtype=np.float64).copy()
    B = frames.shape[0]
    out = np.empty((B, k) + frames.shape[2:])
    for j in range(k):
        nxt = future_cmds[:, j]
        preds = p.predict_batch(frames, commands, nxt, like)
        y = np.stack([q.data for q in preds])
        out[:, j] = y
        frames = np.concatenate([frames[:, 1:], y[:, None]], axis=1)
        commands = np.concatenate([commands[:, 1:], nxt[:, None]], axis=1)
    return out


# -- slip detection ------------------------------------------------------------

def slip_error_signal(pred, meas) -> float:
    """sqrt(sum (pred - meas)^2) / sqrt(|CC(pred, meas)|); 1e9 when |CC| < 1e-6."""
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(meas, "data", meas), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    num = math.sqrt(float(np.sum((a - b) ** 2)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cc = cross_corr_coeff(a, b)
    if abs(cc) < 1e-6:
        return EPSILON_CEILING
    return min(num / math.sqrt(abs(cc)), EPSILON_CEILING)


# -- gating and control ----------------------------------------------------

DEFAULT_GATE_DB = 12.0


def gate_ratio_db(scape) -> float:
    """Peak-to-median energy ratio in dB (inf for a zero median, nan if undefined)."""
    d = np.asarray(getattr(scape, "data", scape), dtype=np.float64)
    if d.size == 0 or not np.all(np.isfinite(d)):
        return math.nan
    peak, med = float(d.max()), float(np.median(d))
    if peak <= 0:
        return math.nan
    if med <= 0:
        return math.inf
    return 10.0 * math.log10(peak / med)


def data_validity_gate(scape, threshold_db: float = DEFAULT_GATE_DB) -> bool:
    r = gate_ratio_db(scape)
    return bool(r == r and r > threshold_db)


@dataclass
class ControllerState:
    """Frozen gains plus per-run counters."""
    k_balance: float = 1.5
    k_waypoint: float = 1.0
    speed: float = 0.3
    range_window: tuple = (0.3, 2.5)
    omega_limit: float = 1.0
    gate_db: float = DEFAULT_GATE_DB
    stops: int = 0
    gate_failures: int = 0
    last_valid: bool = True


def lateral_centroids(scape: Energyscape, range_window=(0.3, 2.5)):
    """Energy-weighted mean lateral distance r|sin(theta)| of echoes in each half.

    Returns ``(left, right)``; a half without echo energy reports the far
    edge of the range window, i.e. "open space".
    """
    R, A = scape.shape
    r = (np.arange(R) + 0.5) * scape.range_bin
    th = -0.5 * scape.fov + (np.arange(A) + 0.5) * scape.azimuth_bin
    rows = (r >= range_window[0]) & (r <= range_window[1])
    e = np.maximum(scape.data[rows] - np.median(scape.data), 0.0)
    lat = r[rows, None] * np.abs(np.sin(th))[None, :]
    out = []
    for half in (th > 0, th < 0):
        w = e[:, half]
        tot = float(w.sum())
        out.append(float((w * lat[:, half]).sum() / tot) if tot > 0 else range_window[1])
    return out[0], out[1]


def corridor_controller(scape: Energyscape, pose_estimate: Pose2D, waypoint, state: ControllerState):
    """Energy-balance steering plus waypoint bearing at constant speed.

    The robot turns away from the side whose echoes sit laterally closer
    and toward the waypoint. A frame failing the validity gate yields a
    full stop.
    """
    valid = data_validity_gate(scape, state.gate_db)
    if not valid:
        state.gate_failures += 1
        if state.last_valid:
            state.stops += 1
        state.last_valid = False
        return VelocityCommand(0.0, 0.0)
    state.last_valid = True
    left, right = lateral_centroids(scape, state.range_window)
    wx, wy = waypoint[0], waypoint[1]
    bearing = wrap_angle(math.atan2(wy - pose_estimate.y, wx - pose_estimate.x) - pose_estimate.heading)
    omega = state.k_balance * (left - right) + state.k_waypoint * bearing
    omega = float(np.clip(omega, -state.omega_limit, state.omega_limit))
    return VelocityCommand(state.speed, omega)
