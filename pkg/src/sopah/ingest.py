"""Raw cycling data: in-memory model, CSV I/O, step annotation and a
synthetic cell generator with exact ground truth.

Sign convention throughout the package: positive current charges the cell.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EmptyInput, InfeasibleSpec, MissingColumn, NonMonotonicTime

STEP_KINDS = ("charge_cc", "charge_cv", "discharge_cc", "discharge_cv", "rest")
CHARGE_KINDS = ("charge_cc", "charge_cv")
DISCHARGE_KINDS = ("discharge_cc", "discharge_cv")

REQUIRED_COLUMNS = ("cell_id", "cycle_index", "test_time_s", "current_A", "voltage_V")
OPTIONAL_COLUMNS = ("step_type", "exclude")

DEFAULT_CV_VOLTAGE_BAND = 0.005
REST_FLOOR_PER_AH = 0.005


class SamplePoint(NamedTuple):
    time: float
    current: float
    voltage: float


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Step:
    """One contiguous run of samples of a single step kind."""

    kind: str
    time: np.ndarray
    current: np.ndarray
    voltage: np.ndarray

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ConfigError(f"unknown step kind {self.kind!r}")
        object.__setattr__(self, "time", _frozen(self.time))
        object.__setattr__(self, "current", _frozen(self.current))
        object.__setattr__(self, "voltage", _frozen(self.voltage))
        if not (len(self.time) == len(self.current) == len(self.voltage)) or len(self.time) == 0:
            raise ConfigError("step arrays must be nonempty and of equal length")

    def __len__(self) -> int:
        return len(self.time)

    def points(self) -> list[SamplePoint]:
        return [SamplePoint(*p) for p in zip(self.time, self.current, self.voltage)]

    @property
    def is_charge(self) -> bool:
        return self.kind in CHARGE_KINDS

    @property
    def is_discharge(self) -> bool:
        return self.kind in DISCHARGE_KINDS

    @property
    def is_rest(self) -> bool:
        return self.kind == "rest"


@dataclass(frozen=True)
class CycleRecord:
    cycle_index: int
    steps: tuple[Step, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def time(self) -> np.ndarray:
        return np.concatenate([s.time for s in self.steps])

    @property
    def current(self) -> np.ndarray:
        return np.concatenate([s.current for s in self.steps])

    @property
    def voltage(self) -> np.ndarray:
        return np.concatenate([s.voltage for s in self.steps])

    def has_discharge(self) -> bool:
        return any(s.is_discharge for s in self.steps)


@dataclass(frozen=True)
class CellHistory:
    cell_id: str
    chemistry: str
    nominal_capacity: float
    cycles: tuple[CycleRecord, ...]
    excluded_cycles: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        object.__setattr__(self, "excluded_cycles", frozenset(self.excluded_cycles))
        if not self.nominal_capacity > 0:
            raise ConfigError("nominal_capacity must be positive")
        idx = [c.cycle_index for c in self.cycles]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError("cycle_index must be strictly increasing")

    @property
    def rest_current_floor(self) -> float:
        return REST_FLOOR_PER_AH * self.nominal_capacity

    def usable_cycles(self) -> list[CycleRecord]:
        return [c for c in self.cycles if c.cycle_index not in self.excluded_cycles]


# ---------------------------------------------------------------------------
# step annotation


def _sign_runs(current: np.ndarray, floor: float) -> list[tuple[int, int, int]]:
    sign = np.where(current > floor, 1, np.where(current < -floor, -1, 0))
    runs = []
    start = 0
    for k in range(1, len(sign) + 1):
        if k == len(sign) or sign[k] != sign[start]:
            runs.append((start, k, int(sign[start])))
            start = k
    return runs


def _cv_mask(current: np.ndarray, voltage: np.ndarray, band: float) -> np.ndarray:
    """Flag points that belong to a constant-voltage taper within one
    constant-sign run.  A taper starts at the first point whose |I| drops
    below its predecessor and continues while |I| keeps decreasing and the
    voltage stays within ``band`` of the taper's first voltage."""
    n = len(current)
    mag = np.abs(current)
    mask = np.zeros(n, dtype=bool)
    k = 1
    while k < n:
        if mag[k] < mag[k - 1] and abs(voltage[k] - voltage[k - 1]) < band:
            j = k
            v0 = voltage[k]
            while j + 1 < n and mag[j + 1] < mag[j] and abs(voltage[j + 1] - v0) < band:
                j += 1
            if j - k + 1 >= 3:
                mask[k : j + 1] = True
            k = j + 1
        else:
            k += 1
    return mask


def annotate_steps(
    time: Sequence[float],
    current: Sequence[float],
    voltage: Sequence[float],
    rest_current_floor: float,
    cv_voltage_band: float = DEFAULT_CV_VOLTAGE_BAND,
) -> list[Step]:
    """Partition a sample sequence into charge/discharge/rest steps.

    Consecutive samples with current above ``rest_current_floor`` are charge,
    below its negative are discharge, and the rest are rest.  Inside charge
    and discharge runs, tapers with monotonically falling |I| at near-fixed
    voltage become the ``*_cv`` sub-steps.  Concatenating the returned steps
    reproduces the input exactly.
    """
    t = np.asarray(time, dtype=float)
    i = np.asarray(current, dtype=float)
    v = np.asarray(voltage, dtype=float)
    if len(t) == 0:
        raise EmptyInput("annotate_steps needs at least one point")
    steps: list[Step] = []
    for a, b, sgn in _sign_runs(i, rest_current_floor):
        if sgn == 0:
            steps.append(Step("rest", t[a:b], i[a:b], v[a:b]))
            continue
        prefix = "charge" if sgn > 0 else "discharge"
        cv = _cv_mask(i[a:b], v[a:b], cv_voltage_band)
        start = 0
        for k in range(1, b - a + 1):
            if k == b - a or cv[k] != cv[start]:
                kind = f"{prefix}_cv" if cv[start] else f"{prefix}_cc"
                steps.append(Step(kind, t[a + start : a + k], i[a + start : a + k], v[a + start : a + k]))
                start = k
    return steps


# ---------------------------------------------------------------------------
# CSV


def parse_cycling_csv(
    stream: IO[str] | str,
    schema: Mapping[str, str] | None = None,
    *,
    chemistry: str = "unknown",
    nominal_capacity: float | None = None,
    cv_voltage_band: float = DEFAULT_CV_VOLTAGE_BAND,
) -> CellHistory:
    """Read one cell from a cycling CSV.

    ``schema`` maps canonical column names (``cell_id``, ``cycle_index``,
    ``test_time_s``, ``current_A``, ``voltage_V``, ``step_type``,
    ``exclude``) to the header names used in the file.  Times are stored
    relative to the first sample of each cycle.  When ``nominal_capacity``
    is not given it is estimated as the largest per-cycle discharge
    throughput.
    """
    cells = read_cells_csv(stream, schema, chemistry=chemistry, nominal_capacity=nominal_capacity,
                           cv_voltage_band=cv_voltage_band)
    if len(cells) != 1:
        raise ConfigError(f"expected one cell in CSV, found {len(cells)}: {sorted(cells)}")
    return next(iter(cells.values()))


def read_cells_csv(
    stream: IO[str] | str,
    schema: Mapping[str, str] | None = None,
    *,
    chemistry: str = "unknown",
    nominal_capacity: float | None = None,
    cv_voltage_band: float = DEFAULT_CV_VOLTAGE_BAND,
) -> dict[str, CellHistory]:
    """Like :func:`parse_cycling_csv` but returns every cell in the file."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    colmap = {name: name for name in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
    if schema:
        colmap.update(schema)
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise EmptyInput("CSV has no header row")
    header = [h.strip() for h in header]
    pos = {}
    for name in REQUIRED_COLUMNS:
        if colmap[name] not in header:
            raise MissingColumn(colmap[name])
        pos[name] = header.index(colmap[name])
    for name in OPTIONAL_COLUMNS:
        if colmap[name] in header:
            pos[name] = header.index(colmap[name])

    rows: dict[str, dict[int, list]] = {}
    excluded: dict[str, set[int]] = {}
    n_rows = 0
    for row in reader:
        if not row or all(not f.strip() for f in row):
            continue
        n_rows += 1
        cell = row[pos["cell_id"]].strip()
        cyc = int(row[pos["cycle_index"]])
        rec = (
            float(row[pos["test_time_s"]]),
            float(row[pos["current_A"]]),
            float(row[pos["voltage_V"]]),
            row[pos["step_type"]].strip() if "step_type" in pos else "",
        )
        rows.setdefault(cell, {}).setdefault(cyc, []).append(rec)
        if "exclude" in pos and row[pos["exclude"]].strip() not in ("", "0", "false", "False"):
            excluded.setdefault(cell, set()).add(cyc)
    if n_rows == 0:
        raise EmptyInput("CSV has no data rows")

    cells = {}
    for cell_id, by_cycle in rows.items():
        raw = {}
        for cyc in sorted(by_cycle):
            recs = by_cycle[cyc]
            t = np.array([r[0] for r in recs])
            if np.any(np.diff(t) <= 0):
                raise NonMonotonicTime(cyc, cell_id)
            raw[cyc] = (t - t[0], np.array([r[1] for r in recs]), np.array([r[2] for r in recs]),
                        [r[3] for r in recs])
        nominal = nominal_capacity
        if nominal is None:
            nominal = max(_discharge_throughput(t, i) for t, i, _, _ in raw.values())
            if not nominal > 0:
                raise EmptyInput(f"cell {cell_id}: no discharge current found to estimate capacity")
        floor = REST_FLOOR_PER_AH * nominal
        cycles = []
        for cyc, (t, i, v, kinds) in raw.items():
            if all(kinds):
                steps = _steps_from_labels(t, i, v, kinds)
            else:
                steps = annotate_steps(t, i, v, floor, cv_voltage_band)
            cycles.append(CycleRecord(cyc, tuple(steps)))
        cells[cell_id] = CellHistory(cell_id, chemistry, float(nominal), tuple(cycles),
                                     frozenset(excluded.get(cell_id, ())))
    return cells


def _discharge_throughput(t: np.ndarray, i: np.ndarray) -> float:
    d = np.minimum(i, 0.0)
    return float(-np.trapezoid(d, t) / 3600.0) if len(t) > 1 else 0.0


def _steps_from_labels(t, i, v, kinds) -> list[Step]:
    steps = []
    start = 0
    for k in range(1, len(kinds) + 1):
        if k == len(kinds) or kinds[k] != kinds[start]:
            steps.append(Step(kinds[start], t[start:k], i[start:k], v[start:k]))
            start = k
    return steps


def write_cycling_csv(cells: CellHistory | Iterable[CellHistory], stream: IO[str]) -> None:
    """Write cells in the canonical CSV layout (with step_type and exclude)."""
    if isinstance(cells, CellHistory):
        cells = [cells]
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(list(REQUIRED_COLUMNS) + list(OPTIONAL_COLUMNS))
    for cell in cells:
        for cyc in cell.cycles:
            ex = "1" if cyc.cycle_index in cell.excluded_cycles else "0"
            for step in cyc.steps:
                for t, i, v in zip(step.time, step.current, step.voltage):
                    w.writerow([cell.cell_id, cyc.cycle_index, repr(float(t)), repr(float(i)),
                                repr(float(v)), step.kind, ex])


# ---------------------------------------------------------------------------
# synthetic cells


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic cell.

    Capacity follows ``base*(1 - fade_rate*n - knee_sharpness*max(0, n-knee_cycle)**2)``.
    Voltage follows ``OCV(s) + I*R(n, s)`` with
    ``R = r0 + r_growth*n + poly(r_soc_coeffs, s)``.  Polynomial coefficients
    are in ascending powers of SOC.
    """

    base_capacity: float = 1.0
    fade_rate: float = 0.0
    knee_cycle: int | None = None
    knee_sharpness: float = 0.0
    ocv_coeffs: tuple[float, ...] = (3.0, 0.4)
    r0: float = 0.05
    r_growth: float = 0.0
    noise_sd: float = 0.0
    n_cycles: int = 100
    r_soc_coeffs: tuple[float, ...] = ()
    charge_c_rate: float = 1.0
    discharge_c_rate: float = 1.0
    taper_fraction: float = 0.1
    taper_end_c_rate: float = 0.05
    samples_per_step: int = 40
    cell_id: str = "synthetic"
    chemistry: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "ocv_coeffs", tuple(float(c) for c in self.ocv_coeffs))
        object.__setattr__(self, "r_soc_coeffs", tuple(float(c) for c in self.r_soc_coeffs))
        if not self.base_capacity > 0:
            raise InfeasibleSpec("base_capacity must be positive")
        if self.noise_sd < 0:
            raise InfeasibleSpec("noise_sd must be nonnegative")
        if self.n_cycles < 1:
            raise InfeasibleSpec("n_cycles must be at least 1")
        if not 0 < self.taper_fraction < 1:
            raise InfeasibleSpec("taper_fraction must lie in (0, 1)")
        if self.samples_per_step < 2:
            raise InfeasibleSpec("samples_per_step must be at least 2")
        s = np.linspace(0.0, 1.0, 1001)
        slope = np.polynomial.polynomial.polyval(s, np.polynomial.polynomial.polyder(self.ocv_coeffs or (0.0,)))
        if np.any(slope < 0):
            raise InfeasibleSpec("OCV polynomial must be nondecreasing on [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SyntheticSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ocv_coeffs"] = list(self.ocv_coeffs)
        d["r_soc_coeffs"] = list(self.r_soc_coeffs)
        return d

    def capacity(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        knee = 0.0
        if self.knee_cycle is not None:
            knee = self.knee_sharpness * np.maximum(0.0, n - self.knee_cycle) ** 2
        return self.base_capacity * (1.0 - self.fade_rate * n - knee)

    def resistance_coeffs(self, n: int) -> np.ndarray:
        """Ascending SOC polynomial of R at cycle ``n``."""
        c = np.zeros(max(1, len(self.r_soc_coeffs)))
        c[: len(self.r_soc_coeffs)] = self.r_soc_coeffs
        c[0] += self.r0 + self.r_growth * n
        return c


def load_synthetic_specs(source: str | IO[str]) -> list[SyntheticSpec]:
    """Read a JSON document holding one spec object or a list of them."""
    doc = json.loads(source) if isinstance(source, str) else json.load(source)
    if isinstance(doc, Mapping):
        doc = [doc]
    return [SyntheticSpec.from_dict(d) for d in doc]


@dataclass(frozen=True)
class GroundTruth:
    cycle_indices: np.ndarray
    capacity: np.ndarray
    ocv_coeffs: tuple[float, ...]
    r_coeffs: np.ndarray = field(repr=False)  # cycles x SOC-polynomial

    def resistance(self, n_pos: int, soc) -> np.ndarray:
        return np.polynomial.polynomial.polyval(np.asarray(soc, dtype=float), self.r_coeffs[n_pos])

    def ocv(self, soc) -> np.ndarray:
        return np.polynomial.polynomial.polyval(np.asarray(soc, dtype=float), self.ocv_coeffs)


def _cycle_segments(spec: SyntheticSpec, q_ah: float):
    """Piecewise-linear current schedule for one cycle.

    Yields (kind, duration_s, i_start, i_end, n_samples).  Integrals of the
    schedule are exact under the trapezoid rule on the sampled grid.
    """
    nom = spec.base_capacity
    ic = spec.charge_c_rate * nom
    idis = spec.discharge_c_rate * nom
    f = spec.taper_fraction
    k = spec.samples_per_step
    q_as = q_ah * 3600.0
    rest_n = max(3, k // 8)
    ic_end = spec.taper_end_c_rate * nom
    id_end = spec.taper_end_c_rate * nom
    return [
        ("rest", 60.0, 0.0, 0.0, rest_n),
        ("charge_cc", (1 - f) * q_as / ic, ic, ic, k),
        ("charge_cv", 2 * f * q_as / (ic + ic_end), ic, ic_end, k),
        ("rest", 60.0, 0.0, 0.0, rest_n),
        ("discharge_cc", (1 - f) * q_as / idis, -idis, -idis, k),
        ("discharge_cv", 2 * f * q_as / (idis + id_end), -idis, -id_end, k),
        ("rest", 60.0, 0.0, 0.0, rest_n),
    ]


def synthesize_cell(spec: SyntheticSpec, seed: int = 0) -> tuple[CellHistory, GroundTruth]:
    """Simulate ``spec.n_cycles`` cycles of a cell with known ground truth.

    Each cycle starts empty: rest, CC charge, linear-taper charge, rest, CC
    discharge, linear-taper discharge, rest.  Gaussian voltage noise is drawn
    from ``numpy.random.default_rng(seed)``.
    """
    n = np.arange(spec.n_cycles)
    q = spec.capacity(n)
    if np.any(q <= 0):
        bad = int(n[np.argmax(q <= 0)])
        raise InfeasibleSpec(f"capacity reaches zero at cycle {bad} before n_cycles={spec.n_cycles}")
    rng = np.random.default_rng(seed)
    ocv = np.asarray(spec.ocv_coeffs)
    r_all = np.array([spec.resistance_coeffs(int(c)) for c in n])
    gap = 1.0  # seconds between the last sample of a step and the first of the next

    cycles = []
    for pos, cyc in enumerate(n):
        q_as = q[pos] * 3600.0
        t_end = -gap
        charge = 0.0  # coulombs above empty
        steps = []
        prev_kind = "rest"
        for kind, dur, i_a, i_b, k in _cycle_segments(spec, q[pos]):
            if _continues(prev_kind, kind):
                # a taper carries on the previous schedule; its first sample is one interval in
                tt = np.linspace(0.0, dur, k + 1)[1:]
                t0 = t_end
            else:
                tt = np.linspace(0.0, dur, k)
                t0 = t_end + gap
            ii = i_a + (i_b - i_a) * tt / dur
            qq = charge + i_a * tt + 0.5 * (i_b - i_a) * tt**2 / dur
            charge = charge + 0.5 * (i_a + i_b) * dur
            s = np.clip(qq / q_as, 0.0, 1.0)
            if kind.endswith("cv"):
                s[-1] = 1.0 if kind.startswith("charge") else 0.0
            v = np.polynomial.polynomial.polyval(s, ocv) + ii * np.polynomial.polynomial.polyval(s, r_all[pos])
            if spec.noise_sd > 0:
                v = v + rng.normal(0.0, spec.noise_sd, size=len(tt))
            steps.append(Step(kind, t0 + tt, ii, v))
            t_end = t0 + dur
            prev_kind = kind
        cycles.append(CycleRecord(int(cyc), tuple(steps)))

    cell = CellHistory(spec.cell_id, spec.chemistry, spec.base_capacity, tuple(cycles))
    truth = GroundTruth(_frozen(n), _frozen(q), tuple(spec.ocv_coeffs), _frozen(r_all))
    return cell, truth


def _continues(prev_kind: str, kind: str) -> bool:
    return kind.endswith("_cv") and prev_kind == kind.replace("_cv", "_cc")


def true_soc(cycle: CycleRecord, capacity_ah: float) -> np.ndarray:
    """SOC of every sample of a synthetic cycle, recomputed from its schedule."""
    out = []
    charge = 0.0
    prev = None
    for step in cycle.steps:
        if step.is_rest:
            out.append(np.full(len(step), charge))
        else:
            start = prev.time[-1] if prev is not None and _continues(prev.kind, step.kind) else step.time[0]
            i_a = prev.current[-1] if start != step.time[0] else step.current[0]
            t = step.time - start
            dur = t[-1]
            i_b = step.current[-1]
            out.append(charge + i_a * t + 0.5 * (i_b - i_a) * t**2 / dur)
            charge = charge + 0.5 * (i_a + i_b) * dur
        prev = step
    return np.clip(np.concatenate(out) / (capacity_ah * 3600.0), 0.0, 1.0)
