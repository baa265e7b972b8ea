"""Image-comparison metrics and the Welch t-test used to score predictors."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal


class DegenerateMetricWarning(RuntimeWarning):
    """A metric was undefined for its inputs (e.g. a constant image)."""


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def cross_corr_coeff(a, b) -> float:
    """Zero-shift Pearson correlation over all cells; 0 if either is constant."""
    a, b = _arr(a), _arr(b)
    _check_shapes(a, b)
    a0 = a - a.mean()
    b0 = b - b.mean()
    den = math.sqrt(float(np.sum(a0 * a0)) * float(np.sum(b0 * b0)))
    if den == 0.0 or not math.isfinite(den):
        warnings.warn("correlation undefined for constant image; reporting 0",
                      DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.sum(a0 * b0) / den, -1.0, 1.0))


def correlogram(a, b):
    """Normalised 2D cross-correlation over all integer shifts.

    Returns ``(map, (d_range, d_azimuth))`` where the offset is the shift
    ``s`` maximising sum_x a(x) b(x + s); if ``b`` is ``a`` moved by ``s``
    the peak sits at ``s``. Zero shift is at the centre of the map.
    """
    a, b = _arr(a), _arr(b)
    _check_shapes(a, b)
    a0 = a - a.mean()
    b0 = b - b.mean()
    den = math.sqrt(float(np.sum(a0 * a0)) * float(np.sum(b0 * b0)))
    if den == 0.0:
        warnings.warn("correlogram undefined for constant image", DegenerateMetricWarning,
                      stacklevel=2)
        cmap = np.zeros((2 * a.shape[0] - 1, 2 * a.shape[1] - 1))
        return cmap, (0, 0)
    cmap = signal.correlate(b0, a0, mode="full", method="auto") / den
    i, j = np.unravel_index(int(np.argmax(cmap)), cmap.shape)
    return cmap, (int(i - (a.shape[0] - 1)), int(j - (a.shape[1] - 1)))


def rms(x) -> float:
    x = _arr(x)
    return math.sqrt(float(np.mean(x * x)))


def nrmsd(pred, target) -> float:
    """rms(pred - target) / rms(target); NaN (with a warning) for a zero target."""
    p, t = _arr(pred), _arr(target)
    _check_shapes(p, t)
    den = rms(t)
    if den == 0.0:
        warnings.warn("NRMSD undefined for an all-zero target", DegenerateMetricWarning,
                      stacklevel=2)
        return math.nan
    return rms(p - t) / den


@dataclass(frozen=True)
class MetricReport:
    cc: float
    nrmsd: float
    correlogram_peak_offset: tuple

    @classmethod
    def compare(cls, pred, target):
        _, off = correlogram(pred, target)
        return cls(cross_corr_coeff(pred, target), nrmsd(pred, target), off)


# --- Student t distribution via the regularised incomplete beta -----------

def _betacf(a, b, x, max_iter=300, tol=3e-16):
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    x = df / (df + t * t)
    tail = 0.5 * betainc_regularized(0.5 * df, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def welch_t_test(xs, ys):
    """Two-sided Welch unequal-variance t-test; returns ``(t, p)``."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ValueError("each sample needs at least two values")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se2 = vx + vy
    if se2 == 0.0:
        if mx == my:
            return 0.0, 1.0
        return math.copysign(math.inf, mx - my), 0.0
    t = (mx - my) / math.sqrt(se2)
    df = se2 * se2 / (vx * vx / (x.size - 1) + vy * vy / (y.size - 1))
    # two-sided tail directly, avoids cancellation for tiny p
    p = betainc_regularized(0.5 * df, 0.5, df / (df + t * t))
    return float(t), float(min(max(p, 0.0), 1.0))


def summarize(values):
    """``(mean, sample std)``; std is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("summarize needs at least one value")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
