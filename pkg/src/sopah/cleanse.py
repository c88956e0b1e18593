"""Median filtering, jump detection and extraction of clean cycling segments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .features import FeatureSchema, FeatureSeries, feature_class


@dataclass(frozen=True)
class CleanseConfig:
    kernel_halfwidths: tuple[int, ...] = (40, 20, 10, 5, 2)
    jump_thresholds: Mapping[str, float] = field(
        default_factory=lambda: {"capacity_energy": 0.01, "efficiency": 0.007, "resistance": 0.02})
    min_segment_cycles: int = 50
    # capacity/energy and efficiency share the first limit
    segment_mape_limits: Mapping[str, float] = field(
        default_factory=lambda: {"capacity_energy_efficiency": 1.0, "resistance": 2.0})

    def __post_init__(self):
        hw = tuple(int(h) for h in self.kernel_halfwidths)
        object.__setattr__(self, "kernel_halfwidths", hw)
        object.__setattr__(self, "jump_thresholds", dict(self.jump_thresholds))
        object.__setattr__(self, "segment_mape_limits", dict(self.segment_mape_limits))
        if not hw or any(h <= 0 for h in hw) or any(b >= a for a, b in zip(hw, hw[1:])):
            raise ConfigError("kernel_halfwidths must be strictly descending positive integers")
        if any(v <= 0 for v in self.jump_thresholds.values()):
            raise ConfigError("jump thresholds must be positive")
        missing = {"capacity_energy", "efficiency", "resistance"} - set(self.jump_thresholds)
        if missing:
            raise ConfigError(f"jump_thresholds missing {sorted(missing)}")
        if self.min_segment_cycles < 1:
            raise ConfigError("min_segment_cycles must be positive")

    def scaled(self, factor: float) -> "CleanseConfig":
        return CleanseConfig(
            self.kernel_halfwidths,
            {k: v * factor for k, v in self.jump_thresholds.items()},
            self.min_segment_cycles,
            {k: v * factor for k, v in self.segment_mape_limits.items()},
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_halfwidths"] = list(self.kernel_halfwidths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CleanseConfig":
        d = dict(d)
        if "preset" in d:
            base = PRESETS[d.pop("preset")]
            d = {**base.to_dict(), **d}
        return cls(**d)


CAMP_PRESET = CleanseConfig()
# "less stringent" thresholds for the fast-charge data: twice the CAMP values
FAST_CHARGE_PRESET = CAMP_PRESET.scaled(2.0)
PRESETS = {"camp": CAMP_PRESET, "fast_charge": FAST_CHARGE_PRESET}


def _mape_class(name: str) -> str:
    return "resistance" if feature_class(name) == "resistance" else "capacity_energy_efficiency"


def halfwidth_at(i: int, length: int, halfwidths: Sequence[int]) -> int:
    """Largest configured half-width that fits inside the series at ``i``,
    else the distance to the nearer edge."""
    d = min(i, length - 1 - i)
    for h in halfwidths:
        if h <= d:
            return h
    return d


def edge_aware_median(series, halfwidths: Sequence[int] = CAMP_PRESET.kernel_halfwidths, valid=None) -> np.ndarray:
    """Median filter whose window shrinks near the series ends.

    Invalid entries (mask ``False`` or NaN) are skipped inside each window.
    An index whose window has no valid entry keeps its input value.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or len(x) == 0:
        raise ConfigError("edge_aware_median needs a nonempty 1-d series")
    ok = np.isfinite(x) if valid is None else (np.asarray(valid, dtype=bool) & np.isfinite(x))
    hw = sorted((int(h) for h in halfwidths), reverse=True)
    n = len(x)
    out = x.copy()
    for i in range(n):
        h = halfwidth_at(i, n, hw)
        win = x[i - h : i + h + 1][ok[i - h : i + h + 1]]
        if len(win):
            out[i] = np.median(win)
    return out


def filter_matrix(values: np.ndarray, valid: np.ndarray, halfwidths: Sequence[int]) -> np.ndarray:
    return np.column_stack([
        edge_aware_median(values[:, j], halfwidths, valid[:, j]) for j in range(values.shape[1])
    ]) if values.size else values.copy()


def normalize_for_jumps(filtered: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Efficiencies divided by 100; every other feature by its first valid value."""
    out = np.array(filtered, dtype=float)
    for j, name in enumerate(schema.feature_names):
        col = out[:, j]
        if feature_class(name) == "efficiency":
            out[:, j] = col / 100.0
            continue
        finite = np.flatnonzero(np.isfinite(col))
        if len(finite) and col[finite[0]] != 0:
            out[:, j] = col / abs(col[finite[0]])
    return out


def detect_jumps(filtered: np.ndarray, schema: FeatureSchema, thresholds: Mapping[str, float] | None = None,
                 *, normalized: bool = False) -> list[int]:
    """Positions whose change from the previous position exceeds the class
    threshold in at least one feature.  Position 0 is never flagged."""
    thresholds = CAMP_PRESET.jump_thresholds if thresholds is None else thresholds
    z = np.asarray(filtered, dtype=float)
    if not normalized:
        z = normalize_for_jumps(z, schema)
    if len(z) < 2:
        return []
    thr = np.array([thresholds[feature_class(n)] for n in schema.feature_names])
    diff = np.abs(np.diff(z, axis=0))
    with np.errstate(invalid="ignore"):
        hit = np.any(np.nan_to_num(diff, nan=0.0) > thr, axis=1)
    return [int(j) + 1 for j in np.flatnonzero(hit)]


@dataclass(frozen=True)
class Segment:
    cell_id: str
    start_cycle: int  # position in the feature series, inclusive
    end_cycle: int  # inclusive
    filtered_values: np.ndarray
    raw_values: np.ndarray
    initial_capacity: float
    cycle_indices: np.ndarray  # absolute cycle numbers
    schema: FeatureSchema | None = None
    chemistry: str = "unknown"

    def __len__(self) -> int:
        return self.end_cycle - self.start_cycle + 1

    def to_record(self) -> dict:
        return {"cell_id": self.cell_id, "start_cycle": self.start_cycle, "end_cycle": self.end_cycle,
                "initial_capacity": self.initial_capacity}


def segment_mape(raw: np.ndarray, filtered: np.ndarray, schema: FeatureSchema) -> dict[str, float]:
    """Mean absolute percent difference between filtered and raw per class."""
    out = {}
    for cls in ("capacity_energy_efficiency", "resistance"):
        cols = [j for j, n in enumerate(schema.feature_names) if _mape_class(n) == cls]
        if not cols:
            continue
        r = raw[:, cols]
        f = filtered[:, cols]
        ok = np.isfinite(r) & np.isfinite(f) & (r != 0)
        if not ok.any():
            continue
        out[cls] = float(np.mean(100.0 * np.abs(f[ok] - r[ok]) / np.abs(r[ok])))
    return out


def extract_segments(raw, filtered, jumps: Sequence[int], config: CleanseConfig = CAMP_PRESET,
                     schema: FeatureSchema | None = None, *, cell_id: str = "", cycle_indices=None,
                     chemistry: str = "unknown") -> list[Segment]:
    """Keep the runs between jumps that are long and quiet enough."""
    raw = np.asarray(raw, dtype=float)
    filtered = np.asarray(filtered, dtype=float)
    n = len(raw)
    if cycle_indices is None:
        cycle_indices = np.arange(n)
    cycle_indices = np.asarray(cycle_indices)
    if schema is None:
        raise ConfigError("extract_segments needs the feature schema to classify columns")
    q_col = schema.index("Q_d") if "Q_d" in schema.feature_names else 0
    bounds = [0] + sorted(j for j in set(jumps) if 0 < j < n) + [n]
    segments = []
    for a, b in zip(bounds, bounds[1:]):
        if b - a < config.min_segment_cycles:
            continue
        mape = segment_mape(raw[a:b], filtered[a:b], schema)
        if any(v > config.segment_mape_limits[k] for k, v in mape.items()):
            continue
        segments.append(Segment(cell_id, a, b - 1, filtered[a:b].copy(), raw[a:b].copy(),
                                float(filtered[a, q_col]), cycle_indices[a:b].copy(), schema, chemistry))
    return segments


@dataclass(frozen=True)
class CleanResult:
    filtered: np.ndarray
    jumps: list[int]
    segments: list[Segment]


def clean_feature_series(fs: FeatureSeries, config: CleanseConfig = CAMP_PRESET) -> CleanResult:
    filtered = filter_matrix(fs.values, fs.valid, config.kernel_halfwidths)
    jumps = detect_jumps(filtered, fs.schema, config.jump_thresholds)
    segs = extract_segments(fs.values, filtered, jumps, config, fs.schema, cell_id=fs.cell_id,
                            cycle_indices=fs.cycle_indices, chemistry=fs.chemistry)
    return CleanResult(filtered, jumps, segs)


# ---------------------------------------------------------------------------
# persistence


def write_segments(segments: Sequence[Segment], directory: str | Path) -> None:
    """JSON lines index plus one CSV of filtered and raw values per segment."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "segments.jsonl", "w") as fh:
        for seg in segments:
            rec = seg.to_record()
            rec["schema"] = seg.schema.name if seg.schema else None
            rec["chemistry"] = seg.chemistry
            rec["file"] = f"{seg.cell_id}_{seg.start_cycle}.csv"
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            names = seg.schema.feature_names
            lines = [",".join(["cycle_index", *names, *(f"raw_{n}" for n in names)])]
            for c, f, r in zip(seg.cycle_indices, seg.filtered_values, seg.raw_values):
                cells = [str(int(c))] + [_fmt(x) for x in f] + [_fmt(x) for x in r]
                lines.append(",".join(cells))
            (directory / rec["file"]).write_text("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x)) if np.isfinite(x) else ""


def read_segments(directory: str | Path) -> list[Segment]:
    from .features import get_schema

    directory = Path(directory)
    out = []
    for line in (directory / "segments.jsonl").read_text().splitlines():
        rec = json.loads(line)
        schema = get_schema(rec["schema"])
        m = len(schema)
        rows = (directory / rec["file"]).read_text().splitlines()[1:]
        data = np.array([[float(v) if v != "" else np.nan for v in r.split(",")] for r in rows])
        data = data.reshape(len(rows), 1 + 2 * m)
        out.append(Segment(rec["cell_id"], rec["start_cycle"], rec["end_cycle"], data[:, 1 : 1 + m],
                           data[:, 1 + m :], rec["initial_capacity"], data[:, 0].astype(int), schema,
                           rec.get("chemistry", "unknown")))
    return out
