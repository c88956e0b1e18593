"""Per-cycle state-of-performance-and-health features."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ecm import SAMPLE_SOCS, EcmConfig, fit_ecm, sample_ecm
from .errors import ConfigError, DataError, EmptyCell, NoCharge, NoDischarge, NoValidTransition
from .ingest import CellHistory, CycleRecord

OCV_NAMES = tuple(f"OCV_{int(round(100 * s))}" for s in SAMPLE_SOCS)
R_NAMES = tuple(f"R_{int(round(100 * s))}" for s in SAMPLE_SOCS)

_UNITS = {"Q_d": "Ah", "E_d": "Wh", "V_avg": "V", "Q_eff": "%", "E_eff": "%", "R_ohmic": "ohm"}
_UNITS.update({n: "V" for n in OCV_NAMES})
_UNITS.update({n: "ohm" for n in R_NAMES})


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ConfigError("feature names must be unique")

    @property
    def units(self) -> dict[str, str]:
        return {f: _UNITS[f] for f in self.feature_names}

    def index(self, name: str) -> int:
        return self.feature_names.index(name)

    def __len__(self) -> int:
        return len(self.feature_names)


FAST_CHARGE = FeatureSchema("fast_charge", ("Q_d", "E_d", "V_avg", "Q_eff", "E_eff") + OCV_NAMES + R_NAMES)
CAMP = FeatureSchema("camp", ("Q_d", "E_d", "Q_eff", "E_eff", "R_ohmic"))
SCHEMAS = {s.name: s for s in (FAST_CHARGE, CAMP)}


def get_schema(name: str) -> FeatureSchema:
    try:
        return SCHEMAS[name]
    except KeyError:
        raise ConfigError(f"unknown schema {name!r}; expected one of {sorted(SCHEMAS)}") from None


def feature_class(name: str) -> str:
    """Threshold class of a feature: capacity_energy, efficiency or resistance.

    Voltages (average voltage, ECM OCVs) share the capacity/energy class.
    """
    if name in ("Q_eff", "E_eff"):
        return "efficiency"
    if name == "R_ohmic" or name.startswith("R_"):
        return "resistance"
    return "capacity_energy"


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasicFeatures:
    q_d: float
    e_d: float
    v_avg: float
    q_eff: float = math.nan
    e_eff: float = math.nan

    @property
    def has_efficiency(self) -> bool:
        return not math.isnan(self.q_eff)


def _direction_runs(cycle: CycleRecord, charge: bool):
    """Maximal runs of consecutive loaded steps in one direction."""
    runs, cur = [], []
    for step in cycle.steps:
        hit = step.is_charge if charge else step.is_discharge
        if hit:
            cur.append(step)
        elif cur:
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    out = []
    for run in runs:
        t = np.concatenate([s.time for s in run])
        i = np.concatenate([s.current for s in run])
        v = np.concatenate([s.voltage for s in run])
        out.append((t, i, v))
    return out


def _throughput(runs) -> tuple[float, float, int]:
    q = e = 0.0
    n = 0
    for t, i, v in runs:
        n += len(t)
        if len(t) < 2:
            continue
        q += np.trapezoid(np.abs(i), t)
        e += np.trapezoid(v * np.abs(i), t)
    return q / 3600.0, e / 3600.0, n


def cycle_basic_features(cycle: CycleRecord) -> BasicFeatures:
    """Discharge capacity/energy/average voltage and round-trip efficiencies.

    Efficiencies are NaN when the cycle has no charge step.
    """
    q_d, e_d, n = _throughput(_direction_runs(cycle, charge=False))
    if n < 2 or q_d <= 0:
        raise NoDischarge(f"cycle {cycle.cycle_index} has no usable discharge step")
    out = BasicFeatures(q_d, e_d, e_d / q_d)
    q_c, e_c, nc = _throughput(_direction_runs(cycle, charge=True))
    if nc < 2 or q_c <= 0 or e_c <= 0:
        return out
    return BasicFeatures(q_d, e_d, e_d / q_d, 100.0 * q_d / q_c, 100.0 * e_d / e_c)


def cycle_efficiencies(cycle: CycleRecord) -> tuple[float, float]:
    """Coulombic and energy efficiency in percent; raises NoCharge."""
    b = cycle_basic_features(cycle)
    if not b.has_efficiency:
        raise NoCharge(f"cycle {cycle.cycle_index} has no charge step")
    return b.q_eff, b.e_eff


def ohmic_resistance(cycle: CycleRecord, delta_i_floor: float, max_transitions: int = 4) -> float:
    """Smallest IR-drop resistance over the cycle's rest/load boundaries.

    Each boundary gives ``|dV|/|dI|`` from the last sample before and the
    first sample after it.  Boundaries with ``|dI| < delta_i_floor`` are
    dropped; of the rest, the ``max_transitions`` with the largest current
    step are kept.
    """
    cands = []
    for a, b in zip(cycle.steps, cycle.steps[1:]):
        if a.is_rest == b.is_rest:
            continue
        di = abs(b.current[0] - a.current[-1])
        if di < delta_i_floor:
            continue
        cands.append((di, abs(b.voltage[0] - a.voltage[-1]) / di))
    if not cands:
        raise NoValidTransition(f"cycle {cycle.cycle_index} has no rest/load boundary above the current floor")
    cands.sort(key=lambda c: -c[0])
    return min(r for _, r in cands[:max_transitions])


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSeries:
    cell_id: str
    schema: FeatureSchema
    values: np.ndarray  # cycles x features, NaN where invalid
    cycle_indices: np.ndarray
    valid: np.ndarray
    chemistry: str = "unknown"
    failures: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        valid = np.array(self.valid, dtype=bool) & np.isfinite(values)
        values[~valid] = np.nan
        if values.shape != (len(self.cycle_indices), len(self.schema)):
            raise ConfigError(f"values shape {values.shape} does not match cycles x features")
        for arr in (values, valid):
            arr.setflags(write=False)
        idx = np.array(self.cycle_indices, dtype=int)
        idx.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "cycle_indices", idx)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def to_csv(self, path: str | Path) -> None:
        """Write the CSV and its ``.json`` sidecar (schema name and units)."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle_index", *self.schema.feature_names])
            for c, row, ok in zip(self.cycle_indices, self.values, self.valid):
                w.writerow([int(c)] + [repr(float(x)) if k else "" for x, k in zip(row, ok)])
        side = {"cell_id": self.cell_id, "chemistry": self.chemistry, "schema": self.schema.name,
                "units": self.schema.units}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureSeries":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        schema = get_schema(side["schema"])
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if tuple(header[1:]) != schema.feature_names:
                raise DataError(f"{path}: columns do not match schema {schema.name}")
            idx, vals = [], []
            for row in r:
                idx.append(int(row[0]))
                vals.append([float(x) if x != "" else np.nan for x in row[1:]])
        vals = np.array(vals, dtype=float).reshape(len(idx), len(schema))
        return cls(side["cell_id"], schema, vals, np.array(idx), np.isfinite(vals),
                   side.get("chemistry", "unknown"))


def _in_range(values: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Physical plausibility: positive capacities/energies/resistances,
    efficiencies in (0, 150] percent."""
    ok = np.ones(values.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        for j, name in enumerate(schema.feature_names):
            col = values[:, j]
            if feature_class(name) == "efficiency":
                ok[:, j] = (col > 0) & (col <= 150.0)
            elif name in ("Q_d", "E_d", "V_avg") or name.startswith("OCV_"):
                ok[:, j] = col > 0
            else:
                ok[:, j] = col >= 0
    return ok


def build_feature_series(
    cell: CellHistory,
    schema: FeatureSchema | str,
    ecm_config: EcmConfig | None = None,
    delta_i_floor: float | None = None,
) -> FeatureSeries:
    """One row per usable cycle; failed computations are masked, never zero."""
    if isinstance(schema, str):
        schema = get_schema(schema)
    cycles = cell.usable_cycles()
    if not cycles:
        raise EmptyCell(f"cell {cell.cell_id} has no usable cycles")
    floor = 0.05 * cell.nominal_capacity if delta_i_floor is None else delta_i_floor
    if ecm_config is None:
        ecm_config = EcmConfig(delta_i_floor=floor)
    need_ecm = any(n in OCV_NAMES or n in R_NAMES for n in schema.feature_names)
    m = len(schema)
    values = np.full((len(cycles), m), np.nan)
    failures: dict[str, int] = {}

    def fail(kind: str):
        failures[kind] = failures.get(kind, 0) + 1

    for row, cyc in enumerate(cycles):
        feats: dict[str, float] = {}
        try:
            b = cycle_basic_features(cyc)
        except DataError:
            fail("discharge")
            b = None
        if b is not None:
            feats.update(Q_d=b.q_d, E_d=b.e_d, V_avg=b.v_avg)
            if b.has_efficiency:
                feats.update(Q_eff=b.q_eff, E_eff=b.e_eff)
            else:
                fail("charge")
        if "R_ohmic" in schema.feature_names:
            try:
                feats["R_ohmic"] = ohmic_resistance(cyc, floor)
            except DataError:
                fail("ohmic")
        if need_ecm and b is not None:
            try:
                fit = fit_ecm(cyc, ecm_config, q_d_ah=b.q_d)
                ocv, r = sample_ecm(fit)
                feats.update(zip(OCV_NAMES, ocv))
                feats.update(zip(R_NAMES, r))
            except DataError:
                fail("ecm")
        for j, name in enumerate(schema.feature_names):
            if name in feats:
                values[row, j] = feats[name]
    bad = ~_in_range(values, schema) & np.isfinite(values)
    if bad.any():
        failures["out_of_range"] = int(bad.sum())
        values[bad] = np.nan
    return FeatureSeries(cell.cell_id, schema, values, np.array([c.cycle_index for c in cycles]),
                         np.isfinite(values), cell.chemistry, failures)
