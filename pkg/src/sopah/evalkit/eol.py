"""End-of-life estimation with a weighted, clamped tail extrapolation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError, TooFewPoints

TAIL_POINTS = 10


@dataclass(frozen=True)
class TailFit:
    slope: float
    intercept: float
    clamped: bool
    raw_slope: float
    raw_intercept: float


def slope_bounds(q0: float, lo_div: float = 100.0, hi_div: float = 1000.0) -> tuple[float, float]:
    """Admissible slope interval ``[-q0/lo_div, -q0/hi_div]`` per cycle."""
    return -abs(q0) / lo_div, -abs(q0) / hi_div


def tail_weights(n: int) -> np.ndarray:
    return np.linspace(0.01, 1.0, n)


def weighted_tail_regression(x, y, q0: float, bounds: tuple[float, float] | None = None) -> TailFit:
    """Weighted line through the last (at most ten) points, slope clamped.

    Weights rise linearly from 0.01 on the oldest point to 1.0 on the
    newest.  A clamped slope keeps the line through the weighted centroid.
    """
    x = np.asarray(x, dtype=float)[-TAIL_POINTS:]
    y = np.asarray(y, dtype=float)[-TAIL_POINTS:]
    if len(x) != len(y):
        raise ConfigError("x and y must have equal length")
    if len(x) < 2:
        raise TooFewPoints("tail regression needs at least two points")
    w = tail_weights(len(x))
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    if sxx <= 0:
        raise TooFewPoints("tail regression needs two distinct cycle positions")
    b = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    a = float(ym - b * xm)
    lo, hi = slope_bounds(q0) if bounds is None else bounds
    s = min(max(b, lo), hi)
    if s == b:
        return TailFit(b, a, False, b, a)
    return TailFit(s, float(ym - s * xm), True, b, a)


@dataclass(frozen=True)
class EolEstimate:
    segment_ref: tuple[str, int] | None
    threshold: float
    eol_cycles: float
    method: str  # "observed" or "extrapolated"


def eol_cycle(capacity, threshold: float, q0: float | None = None, positions=None,
              segment_ref=None, bounds: tuple[float, float] | None = None) -> EolEstimate:
    """Cycles from segment start until capacity reaches ``threshold * q0``.

    ``positions`` are 1-based cycle counts from the segment start (default
    ``1..n``).  An observed crossing returns the position of the first value
    at or below the threshold.  Otherwise the clamped tail line is anchored
    at the last point and extended to the threshold.
    """
    y = np.asarray(capacity, dtype=float)
    if y.ndim != 1 or len(y) == 0:
        raise ConfigError("capacity series must be a nonempty 1-d array")
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    x = np.arange(1, len(y) + 1, dtype=float) if positions is None else np.asarray(positions, dtype=float)
    q0 = float(y[0]) if q0 is None else float(q0)
    level = threshold * q0
    hit = np.flatnonzero(y <= level)
    if len(hit):
        return EolEstimate(segment_ref, threshold, float(x[hit[0]]), "observed")
    if len(y) >= 2:
        slope = weighted_tail_regression(x, y, q0, bounds).slope
    else:
        slope = (slope_bounds(q0) if bounds is None else bounds)[1]
    return EolEstimate(segment_ref, threshold, float(x[-1] + (y[-1] - level) / -slope), "extrapolated")


@dataclass(frozen=True)
class EolPair:
    segment_ref: tuple[str, int]
    threshold: float
    experimental: float
    predicted: float

    @property
    def error(self) -> float:
        return self.predicted - self.experimental


@dataclass(frozen=True)
class EolSummary:
    threshold: float
    mae: float
    rmse: float
    n: int


def summarize_eol(pairs: Sequence[EolPair]) -> list[EolSummary]:
    out = []
    for thr in sorted({p.threshold for p in pairs}, reverse=True):
        e = np.array([p.error for p in pairs if p.threshold == thr])
        out.append(EolSummary(thr, float(np.mean(np.abs(e))), float(math.sqrt(np.mean(e * e))), len(e)))
    return out


def predicted_capacity_curve(context_positions, context_values, pred_positions, pred_values):
    """Dense integer-position curve from context points and sparse forecasts."""
    xs = np.concatenate([np.asarray(context_positions, float), np.asarray(pred_positions, float)])
    ys = np.concatenate([np.asarray(context_values, float), np.asarray(pred_values, float)])
    grid = np.arange(int(xs[0]), int(xs[-1]) + 1, dtype=float)
    return grid, np.interp(grid, xs, ys)


def eol_error_report(tm, segments, thresholds=(0.8, 0.9)) -> tuple[list[EolSummary], list[EolPair]]:
    """Predicted versus experimental EOL for each segment.

    The forecast starts from the first context window and runs to the
    segment end; sparse forecasts are linearly interpolated onto every
    cycle so both trajectories go through the same ``eol_cycle`` rules.
    """
    from ..sttf.train import predict_trajectory

    cap_col = list(tm.feature_names).index("Q_d")
    c = tm.context_points
    pairs = []
    for seg in segments:
        n = len(seg)
        if n <= c:
            continue
        vals = seg.filtered_values
        cyc = np.asarray(seg.cycle_indices)
        fc = predict_trajectory(tm, vals[:c], cyc[:c], int(cyc[-1] - cyc[c - 1]))
        q0 = float(seg.initial_capacity)
        base = cyc[0] - 1
        gx, gy = predicted_capacity_curve(cyc[:c] - base, vals[:c, cap_col], fc.target_cycles - base,
                                          fc.values[:, cap_col])
        ref = (seg.cell_id, int(seg.start_cycle))
        for thr in thresholds:
            exp = eol_cycle(vals[:, cap_col], thr, q0, cyc - base, ref)
            pred = eol_cycle(gy, thr, q0, gx, ref)
            pairs.append(EolPair(ref, thr, exp.eol_cycles, pred.eol_cycles))
    return summarize_eol(pairs), pairs


def write_eol_scatter(pairs: Sequence[EolPair], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "segment_start", "threshold", "experimental_eol", "predicted_eol"])
        for p in pairs:
            w.writerow([p.segment_ref[0], p.segment_ref[1], p.threshold, repr(p.experimental), repr(p.predicted)])
