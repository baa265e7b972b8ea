"""Analytic next-frame predictors: naive polar shift and acoustic-flow warping.

Sensor frame convention: x forward, y to the left, azimuth positive
counter-clockwise. A positive turn rate therefore moves scene content
toward negative azimuth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .sim import Energyscape, VelocityCommand, arc_displacement


@dataclass(frozen=True)
class PolarPoint:
    r: float
    theta: float
    in_view: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.r) and math.isfinite(self.theta)):
            raise ValueError("polar point must be finite")


def flow_line_constant(p: PolarPoint) -> float:
    """Lateral intercept r*sin(theta) that stays fixed under pure translation."""
    return p.r * math.sin(p.theta)


def rigid_transform_polar(r, theta, v_lin, omega_r, dt):
    """Vectorised ego-motion map: coordinates of static points after the
    sensor executes the exact arc (v_lin, omega_r) for ``dt``."""
    dx, dy, dphi = arc_displacement(v_lin, omega_r, dt)
    px = r * np.cos(theta) - dx
    py = r * np.sin(theta) - dy
    c, s = math.cos(dphi), math.sin(dphi)
    qx = c * px + s * py
    qy = -s * px + c * py
    return np.hypot(qx, qy), np.arctan2(qy, qx)


def polar_rigid_transform(p: PolarPoint, cmd: VelocityCommand, dt: float,
                          fov: float | None = None, r_max: float | None = None) -> PolarPoint:
    if dt <= 0:
        raise ValueError("dt must be positive")
    r, th = rigid_transform_polar(np.float64(p.r), np.float64(p.theta), cmd.v_lin, cmd.omega_r, dt)
    r, th = float(r), float(th)
    in_view = r > 1e-12
    if fov is not None:
        in_view = in_view and abs(th) <= 0.5 * fov
    if r_max is not None:
        in_view = in_view and r <= r_max
    if r <= 1e-12:
        th = 0.0
    return PolarPoint(r, th, in_view)


def _grid_axes(scape: Energyscape):
    R, A = scape.shape
    dr, da = scape.range_bin, scape.azimuth_bin
    ranges = (np.arange(R) + 0.5) * dr
    azimuths = -0.5 * scape.fov + (np.arange(A) + 0.5) * da
    return ranges, azimuths, dr, da


def _to_index(scape, r, theta):
    dr, da = scape.range_bin, scape.azimuth_bin
    return r / dr - 0.5, (theta + 0.5 * scape.fov) / da - 0.5


def naive_shift(scape: Energyscape, cmd: VelocityCommand, dt: float) -> Energyscape:
    """Translate the grid by -v*dt in range and -omega*dt in azimuth."""
    if cmd.v_lin == 0.0 and cmd.omega_r == 0.0:
        return scape.with_data(scape.data.copy(), scape.timestamp + dt)
    R, A = scape.shape
    rows = np.arange(R, dtype=np.float64)[:, None] + cmd.v_lin * dt / scape.range_bin
    cols = np.arange(A, dtype=np.float64)[None, :] + cmd.omega_r * dt / scape.azimuth_bin
    rows, cols = np.broadcast_arrays(rows, cols)
    out = kernels.bilinear_sample(scape.data, rows, cols, scape.noise_floor())
    return scape.with_data(out, scape.timestamp + dt)


def flow_warp(scape: Energyscape, cmd: VelocityCommand, dt: float) -> Energyscape:
    """Pull-warp the frame through the exact rigid ego-motion map."""
    if cmd.v_lin == 0.0 and cmd.omega_r == 0.0:
        return scape.with_data(scape.data.copy(), scape.timestamp + dt)
    ranges, azimuths, _, _ = _grid_axes(scape)
    rr, tt = np.meshgrid(ranges, azimuths, indexing="ij")
    # undo the motion: where was each output cell one step earlier?
    src_r, src_t = rigid_transform_polar(rr, tt, -cmd.v_lin, -cmd.omega_r, dt)
    rows, cols = _to_index(scape, src_r, src_t)
    out = kernels.bilinear_sample(scape.data, rows, cols, scape.noise_floor())
    return scape.with_data(out, scape.timestamp + dt)
