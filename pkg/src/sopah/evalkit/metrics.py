"""Forecast error metrics, per-feature aggregation and percentile curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import EmptyErrors, LengthMismatch, NoSegments, ZeroTruth

TRUTH_FLOOR = 1e-9


@dataclass(frozen=True)
class ErrorMetrics:
    mae: float
    rmse: float
    mape: float  # percent, NaN when undefined
    rmspe: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mae, self.rmse, self.mape, self.rmspe)


def error_metrics(pred, truth, truth_floor: float = TRUTH_FLOOR, *, strict: bool = True) -> ErrorMetrics:
    """MAE, RMSE, MAPE and RMSPE of ``pred`` against ``truth``.

    When some ``|truth| <= truth_floor`` the percent metrics are undefined:
    with ``strict`` a :class:`ZeroTruth` carrying the absolute metrics is
    raised, otherwise they come back as NaN.
    """
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if len(p) != len(t):
        raise LengthMismatch(f"prediction has {len(p)} points, truth has {len(t)}")
    if len(p) == 0:
        raise LengthMismatch("error_metrics needs at least one pair")
    e = p - t
    mae = float(np.mean(np.abs(e)))
    rmse = float(np.sqrt(np.mean(e * e)))
    if np.any(np.abs(t) <= truth_floor):
        if strict:
            err = ZeroTruth("truth values too close to zero for percent metrics")
            err.partial = ErrorMetrics(mae, rmse, math.nan, math.nan)
            raise err
        return ErrorMetrics(mae, rmse, math.nan, math.nan)
    pe = 100.0 * e / t
    return ErrorMetrics(mae, rmse, float(np.mean(np.abs(pe))), float(np.sqrt(np.mean(pe * pe))))


@dataclass(frozen=True)
class MetricRow:
    feature: str
    mae: tuple[float, float]  # (mean, sd) across segments
    rmse: tuple[float, float]
    mape: tuple[float, float]
    rmspe: tuple[float, float]
    n_segments: int

    def to_record(self) -> dict:
        out = {"feature": self.feature, "n_segments": self.n_segments}
        for k in ("mae", "rmse", "mape", "rmspe"):
            out[f"{k}_mean"], out[f"{k}_sd"] = getattr(self, k)
        return out


def aggregate_report(per_segment: Sequence[Mapping[str, ErrorMetrics]], feature_names: Sequence[str]) -> list[MetricRow]:
    """Mean and population sd of each metric across segments, one row per
    feature in ``feature_names`` order."""
    if not per_segment:
        raise NoSegments("aggregate_report needs at least one segment")
    rows = []
    for name in feature_names:
        ms = [seg[name] for seg in per_segment if name in seg]
        if not ms:
            raise NoSegments(f"no segment has metrics for {name}")
        arr = np.array([m.as_tuple() for m in ms], dtype=float)
        stats = []
        for j in range(4):
            col = arr[:, j][np.isfinite(arr[:, j])]
            stats.append((float(col.mean()), float(col.std())) if len(col) else (math.nan, math.nan))
        rows.append(MetricRow(name, *stats, n_segments=len(ms)))
    return rows


def write_metric_report(rows: Iterable[MetricRow], path: str | Path) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "MAE", "RMSE", "MAPE", "RMSPE", "n_segments"])
        for r in rows:
            w.writerow([r.feature] + [f"{m:.6g} +/- {s:.6g}" for m, s in (r.mae, r.rmse, r.mape, r.rmspe)]
                       + [r.n_segments])


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorObservation:
    """One absolute percent error with its position in the forecast."""

    horizon: int  # predicted cycle minus last context cycle
    start_cycle: int  # absolute cycle of the context end
    ape: float


@dataclass(frozen=True)
class PercentileBin:
    lo: int  # bins cover [lo, lo + width)
    n: int
    mean: float
    p70: float
    p95: float


def percentile_curves(observations: Sequence[ErrorObservation], axis: str = "horizon",
                      bin_width: int = 10) -> list[PercentileBin]:
    """Mean, 70th and 95th percentile of the absolute percent error per bin.

    Percentiles interpolate linearly between order statistics; bins without
    observations are left out.
    """
    if axis not in ("horizon", "start_cycle"):
        raise ValueError(f"axis must be 'horizon' or 'start_cycle', got {axis!r}")
    if not observations:
        raise EmptyErrors("percentile_curves needs at least one observation")
    key = np.array([getattr(o, axis) for o in observations], dtype=int)
    ape = np.array([o.ape for o in observations], dtype=float)
    bins = np.floor_divide(key, bin_width)
    out = []
    for b in np.unique(bins):
        v = ape[bins == b]
        p70, p95 = np.percentile(v, [70, 95], method="linear")
        out.append(PercentileBin(int(b) * bin_width, len(v), float(v.mean()), float(p70), float(p95)))
    return out


def write_percentile_csv(bins: Iterable[PercentileBin], path: str | Path, axis: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{axis}_bin_start", "n", "mean_ape", "p70_ape", "p95_ape"])
        for b in bins:
            w.writerow([b.lo, b.n, repr(b.mean), repr(b.p70), repr(b.p95)])
