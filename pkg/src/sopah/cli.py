"""Command line pipeline: synth, featurize, clean, dataset, train, predict,
eval and context-sweep, driven by one JSON run configuration.

Every stage writes into ``<out>/<stage>/`` and leaves a ``manifest.json``
with input/output hashes, the seed and the upstream provenance chain.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .cleanse import PRESETS, CleanseConfig, clean_feature_series, read_segments, write_segments
from .dataset import fit_scaler, make_samples, read_samples, split_by_cell, stack_samples, write_samples
from .errors import ConfigError, DataError, MissingStage, SopahError, exit_code
from .evalkit import (
    ErrorObservation,
    aggregate_report,
    bayes_factor_const_vs_linear,
    eol_error_report,
    error_metrics,
    linear_posterior_band,
    percentile_curves,
    write_eol_scatter,
    write_metric_report,
    write_percentile_csv,
)
from .evalkit.plot import line_chart, scatter_chart
from .features import FeatureSeries, build_feature_series, get_schema
from .ingest import SyntheticSpec, read_cells_csv, synthesize_cell, write_cycling_csv

log = logging.getLogger("sopah")

STAGES = ("synth", "featurize", "clean", "dataset", "train", "predict", "eval", "context-sweep")
_STAGE_DIRS = {"context-sweep": "sweep"}


# ---------------------------------------------------------------------------
# configuration


DEFAULT_DATASET = {"context_points": 1, "skip_context": 1, "skip_target": 10, "max_target_points": 64,
                   "split": [0.7, 0.15, 0.15], "sample_stride": 1}
DEFAULT_EVAL = {"thresholds": [0.8, 0.9], "bin_width": 10}
DEFAULT_SWEEP = {"context_values": [1, 2, 4, 8, 16, 32, 64]}


@dataclass
class RunConfig:
    data: dict
    schema: str = "camp"
    cleanse: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "run"
    threads: int = 1
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        get_schema(self.schema)
        self.dataset = {**DEFAULT_DATASET, **self.dataset}
        self.eval = {**DEFAULT_EVAL, **self.eval}
        self.sweep = {**DEFAULT_SWEEP, **self.sweep}
        if not isinstance(self.data, Mapping) or not self.data:
            raise ConfigError("config needs a 'data' section")
        kinds = {"csv", "synthetic", "synthetic_families"} & set(self.data)
        if len(kinds) != 1:
            raise ConfigError("data must have exactly one of 'csv', 'synthetic', 'synthetic_families'")
        self.cleanse_config()  # validate early
        if int(self.threads) < 1:
            raise ConfigError("threads must be positive")

    @property
    def out_dir(self) -> Path:
        p = Path(self.out)
        return p if p.is_absolute() else self.base_dir / p

    def cleanse_config(self) -> CleanseConfig:
        if not self.cleanse:
            return PRESETS["fast_charge" if self.schema == "fast_charge" else "camp"]
        return CleanseConfig.from_dict(self.cleanse)

    def to_dict(self) -> dict:
        return {"data": self.data, "schema": self.schema, "cleanse": self.cleanse, "dataset": self.dataset,
                "model": self.model, "optim": self.optim, "eval": self.eval, "sweep": self.sweep,
                "seed": self.seed, "out": self.out, "threads": self.threads}

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | str = ".") -> "RunConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{k: copy.deepcopy(v) for k, v in d.items()}, base_dir=Path(base_dir))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        return cls.from_dict(doc, path.parent)


def expand_families(doc: Mapping) -> list[SyntheticSpec]:
    """Synthetic cells drawn from degradation families.

    Cells are assigned to families round-robin.  Each cell draws one latent
    ``u ~ U(0, 1)``; every ``[a, b]`` family parameter becomes
    ``a + u*(b - a)``, so ranged parameters move together.  ``n_cycles`` runs
    until capacity falls below ``end_fraction`` of its base value.
    """
    n_cells = int(doc.get("n_cells", 0))
    families = doc.get("families", [])
    if n_cells < 1 or not families:
        raise ConfigError("synthetic_families needs n_cells >= 1 and at least one family")
    rng = np.random.default_rng(int(doc.get("seed", 0)))
    common = dict(doc.get("common", {}))
    end_fraction = float(doc.get("end_fraction", 0.7))
    max_cycles = int(doc.get("max_cycles", 3000))
    specs = []
    for k in range(n_cells):
        fam = dict(families[k % len(families)])
        name = fam.pop("name", f"family{k % len(families)}")
        u = float(rng.uniform())
        params = dict(common)
        for key, v in fam.items():
            if isinstance(v, (list, tuple)) and len(v) == 2 and key not in ("ocv_coeffs", "r_soc_coeffs"):
                params[key] = float(v[0] + u * (v[1] - v[0]))
            else:
                params[key] = v
        if "knee_cycle" in params and params["knee_cycle"] is not None:
            params["knee_cycle"] = int(round(params["knee_cycle"]))
        params.setdefault("chemistry", name)
        params["cell_id"] = f"{name}_{k:03d}"
        probe = SyntheticSpec.from_dict({**params, "n_cycles": 1})
        q = probe.capacity(np.arange(max_cycles))
        below = np.flatnonzero(q < end_fraction * probe.base_capacity)
        params["n_cycles"] = int(below[0]) + 1 if len(below) else max_cycles
        specs.append(SyntheticSpec.from_dict(params))
    return specs


def synthetic_specs(cfg: RunConfig) -> list[SyntheticSpec]:
    if "synthetic" in cfg.data:
        return [SyntheticSpec.from_dict(d) for d in cfg.data["synthetic"]]
    return expand_families(cfg.data["synthetic_families"])


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


def stage_dir(cfg: RunConfig, stage: str) -> Path:
    return cfg.out_dir / _STAGE_DIRS.get(stage, stage)


def _hash_tree(root: Path, exclude=("manifest.json",)) -> dict[str, str]:
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in exclude}


def read_manifest(cfg: RunConfig, stage: str) -> dict:
    path = stage_dir(cfg, stage) / "manifest.json"
    if not path.exists():
        raise MissingStage(stage, path)
    return json.loads(path.read_text())


def write_manifest(cfg: RunConfig, stage: str, inputs: Mapping[str, str], upstream: Sequence[str],
                   started: float, extra: Mapping | None = None) -> dict:
    """Record provenance; ``chain`` accumulates every upstream input hash."""
    d = stage_dir(cfg, stage)
    chain: dict[str, dict] = {}
    for up in upstream:
        m = read_manifest(cfg, up)
        chain.update(m.get("chain", {}))
        chain[up] = {"inputs": m["inputs"], "outputs": m["outputs"],
                     "manifest_sha256": sha256_file(stage_dir(cfg, up) / "manifest.json")}
    doc = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": config_hash(cfg),
        "inputs": dict(inputs),
        "outputs": _hash_tree(d),
        "chain": chain,
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        doc.update(extra)
    (d / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def prepare_stage_dir(cfg: RunConfig, stage: str, force: bool) -> Path:
    d = stage_dir(cfg, stage)
    if d.exists() and any(d.iterdir()):
        if not force:
            raise ConfigError(f"{d} already holds outputs; pass --force to overwrite")
        for p in sorted(d.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(cfg: RunConfig, stage: str) -> Path:
    read_manifest(cfg, stage)
    return stage_dir(cfg, stage)


# ---------------------------------------------------------------------------
# stages


def _load_cells(cfg: RunConfig):
    """Cells plus the input hashes they came from."""
    data = cfg.data
    if "csv" in data:
        cells, inputs = {}, {}
        for entry in data["csv"]:
            entry = {"path": entry} if isinstance(entry, str) else dict(entry)
            path = Path(entry["path"])
            path = path if path.is_absolute() else cfg.base_dir / path
            if not path.exists():
                raise DataError(f"input file {path} does not exist")
            with open(path, newline="") as fh:
                got = read_cells_csv(fh, entry.get("columns"), chemistry=entry.get("chemistry", "unknown"),
                                     nominal_capacity=entry.get("nominal_capacity"))
            cells.update(got)
            inputs[str(path)] = sha256_file(path)
        return [cells[k] for k in sorted(cells)], inputs
    synth = stage_dir(cfg, "synth")
    if (synth / "manifest.json").exists():
        cells = []
        for p in sorted(synth.glob("*.csv")):
            with open(p, newline="") as fh:
                cells.extend(read_cells_csv(fh).values())
        spec_chem = {s.cell_id: s for s in synthetic_specs(cfg)}
        out = []
        for c in cells:
            s = spec_chem.get(c.cell_id)
            if s is not None:
                c = dataclasses.replace(c, chemistry=s.chemistry, nominal_capacity=s.base_capacity)
            out.append(c)
        return out, {"synth/manifest.json": sha256_file(synth / "manifest.json")}
    specs = synthetic_specs(cfg)
    cells = [synthesize_cell(s, seed=cfg.seed + k)[0] for k, s in enumerate(specs)]
    digest = hashlib.sha256(canonical_json([s.to_dict() for s in specs]).encode()).hexdigest()
    return cells, {"synthetic_specs": digest}


def cmd_synth(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    if "csv" in cfg.data:
        raise ConfigError("synth needs a synthetic data section")
    d = prepare_stage_dir(cfg, "synth", force)
    specs = synthetic_specs(cfg)
    truth_rows = []
    for k, spec in enumerate(specs):
        cell, truth = synthesize_cell(spec, seed=cfg.seed + k)
        with open(d / f"{spec.cell_id}.csv", "w", newline="") as fh:
            write_cycling_csv(cell, fh)
        truth_rows += [(spec.cell_id, int(c), float(q)) for c, q in zip(truth.cycle_indices, truth.capacity)]
    (d / "specs.json").write_text(json.dumps([s.to_dict() for s in specs], indent=2, sort_keys=True) + "\n")
    with open(d / "truth_capacity.tsv", "w") as fh:
        fh.write("cell_id\tcycle_index\tcapacity_Ah\n")
        fh.writelines(f"{a}\t{b}\t{c!r}\n" for a, b, c in truth_rows)
    digest = hashlib.sha256(canonical_json([s.to_dict() for s in specs]).encode()).hexdigest()
    return write_manifest(cfg, "synth", {"synthetic_specs": digest}, [], t0, {"n_cells": len(specs)})


def cmd_featurize(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    d = stage_dir(cfg, "featurize")
    if d.exists() and any(d.iterdir()) and not force:
        raise ConfigError(f"{d} already holds outputs; pass --force to overwrite")
    cells, inputs = _load_cells(cfg)
    if not cells:
        raise DataError("no cells found in the configured inputs")
    d = prepare_stage_dir(cfg, "featurize", force)
    schema = get_schema(cfg.schema)
    report = {}
    for cell in cells:
        fs = build_feature_series(cell, schema)
        fs.to_csv(d / f"{cell.cell_id}.csv")
        report[cell.cell_id] = {"cycles": len(fs.cycle_indices), "masked_entries": int((~fs.valid).sum()),
                                "failures": dict(sorted(fs.failures.items())),
                                "excluded_cycles": list(cell.excluded_cycles)}
    total = sum(sum(r["failures"].values()) for r in report.values())
    (d / "extraction_log.json").write_text(json.dumps({"cells": report, "total_failures": total},
                                                      indent=2, sort_keys=True) + "\n")
    up = ["synth"] if "synth/manifest.json" in inputs else []
    return write_manifest(cfg, "featurize", inputs, up, t0, {"n_cells": len(cells), "total_failures": total})


def _feature_series(cfg: RunConfig) -> list[FeatureSeries]:
    d = _require(cfg, "featurize")
    return [FeatureSeries.from_csv(p) for p in sorted(d.glob("*.csv"))]


def cmd_clean(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    series = _feature_series(cfg)
    d = prepare_stage_dir(cfg, "clean", force)
    config = cfg.cleanse_config()
    segments, jumps = [], {}
    for fs in series:
        res = clean_feature_series(fs, config)
        segments += res.segments
        jumps[fs.cell_id] = [int(fs.cycle_indices[j]) for j in res.jumps]
    write_segments(segments, d)
    (d / "jumps.json").write_text(json.dumps(jumps, indent=2, sort_keys=True) + "\n")
    inputs = {"featurize/manifest.json": sha256_file(stage_dir(cfg, "featurize") / "manifest.json")}
    return write_manifest(cfg, "clean", inputs, ["featurize"], t0,
                          {"n_segments": len(segments), "cleanse": config.to_dict()})


def _segments(cfg: RunConfig):
    return read_segments(_require(cfg, "clean"))


def split_segments(cfg: RunConfig, segments):
    ids = sorted({s.cell_id for s in segments})
    tr, va, te = split_by_cell(ids, cfg.dataset["split"], cfg.seed)
    by = {"train": set(tr), "val": set(va), "test": set(te)}
    return {k: [s for s in segments if s.cell_id in v] for k, v in by.items()}, {"train": tr, "val": va, "test": te}


def build_partitions(cfg: RunConfig, segments, context_points: int | None = None):
    ds = cfg.dataset
    c = ds["context_points"] if context_points is None else context_points
    parts, members = split_segments(cfg, segments)
    out = {}
    for name, segs in parts.items():
        samples = []
        for seg in segs:
            if len(seg) - 1 <= (c - 1) * ds["skip_context"]:
                continue
            samples += make_samples(seg, c, ds["skip_context"], ds["skip_target"], ds["max_target_points"],
                                    stride=ds["sample_stride"])
        out[name] = samples
    return out, members


def cmd_dataset(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    segments = _segments(cfg)
    if not segments:
        raise DataError("clean stage produced no segments")
    d = prepare_stage_dir(cfg, "dataset", force)
    parts, members = build_partitions(cfg, segments)
    for k, v in parts.items():
        if not v:
            raise DataError(f"partition {k} has no samples")
    scaler = fit_scaler(parts["train"])
    schema = get_schema(cfg.schema)
    meta = {"schema": schema.name, **{k: cfg.dataset[k] for k in DEFAULT_DATASET}, "seed": cfg.seed,
            "scaler": scaler.to_dict(), "partitions": members}
    write_samples(d, parts, schema.feature_names, meta)
    inputs = {"clean/manifest.json": sha256_file(stage_dir(cfg, "clean") / "manifest.json")}
    return write_manifest(cfg, "dataset", inputs, ["clean"], t0, {k: len(v) for k, v in parts.items()})


def _set_threads(n: int) -> None:
    import torch

    torch.set_num_threads(int(n))


def train_model(cfg: RunConfig, parts, context_points: int, seed: int):
    from .sttf import OptimConfig, SttfConfig, TrainedModel, build_model, fit

    schema = get_schema(cfg.schema)
    train_s, val_s = stack_samples(parts["train"]), stack_samples(parts["val"])
    scaler = fit_scaler(train_s)
    mcfg = SttfConfig(n_features=len(schema), **cfg.model)
    model = build_model(mcfg, seed)
    optim = OptimConfig.from_dict({**cfg.optim, "seed": seed})
    model, history = fit(model, train_s, val_s, optim, scaler, log=lambda h: log.info(
        "epoch %d train_mse %.4g val_mse %.4g", h["epoch"], h["train_mse"], h["val_mse"]))
    return TrainedModel(model, scaler, schema.feature_names, cfg.dataset["skip_target"],
                        cfg.dataset["max_target_points"], context_points, schema.name, seed, history)


def cmd_train(cfg: RunConfig, force: bool = False) -> dict:
    from .sttf import save_model

    t0 = time.time()
    dd = _require(cfg, "dataset")
    d = prepare_stage_dir(cfg, "train", force)
    _set_threads(cfg.threads)
    parts, meta = read_samples(dd)
    tm = train_model(cfg, parts, meta["context_points"], cfg.seed)
    save_model(tm, d / "model.bin")
    with open(d / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse", "val_mae"])
        for h in tm.history:
            w.writerow([h["epoch"], repr(h["train_mse"]), repr(h["val_mse"]), repr(h["val_mae"])])
    inputs = {"dataset/manifest.json": sha256_file(dd / "manifest.json")}
    best = min(h["val_mse"] for h in tm.history)
    return write_manifest(cfg, "train", inputs, ["dataset"], t0, {"epochs": len(tm.history), "best_val_mse": best})


def _load_trained(cfg: RunConfig):
    from .sttf import load_model

    d = _require(cfg, "train")
    return load_model(d / "model.bin")


def _test_segments(cfg: RunConfig):
    dm = json.loads((_require(cfg, "dataset") / "samples.json").read_text())
    test_ids = set(dm["partitions"]["test"])
    return [s for s in _segments(cfg) if s.cell_id in test_ids]


def cmd_predict(cfg: RunConfig, force: bool = False) -> dict:
    from .sttf import predict_trajectory

    t0 = time.time()
    tm = _load_trained(cfg)
    segs = _test_segments(cfg)
    d = prepare_stage_dir(cfg, "predict", force)
    _set_threads(cfg.threads)
    c = tm.context_points
    names = list(tm.feature_names)
    with open(d / "forecasts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "segment_start", "cycle_index", *[f"pred_{n}" for n in names],
                    *[f"true_{n}" for n in names]])
        for seg in segs:
            if len(seg) <= c:
                continue
            cyc = np.asarray(seg.cycle_indices)
            fc = predict_trajectory(tm, seg.filtered_values[:c], cyc[:c], int(cyc[-1] - cyc[c - 1]))
            pos = {int(x): i for i, x in enumerate(cyc)}
            for cy, row in zip(fc.target_cycles, fc.values):
                truth = seg.filtered_values[pos[int(cy)]] if int(cy) in pos else np.full(len(names), np.nan)
                w.writerow([seg.cell_id, seg.start_cycle, int(cy), *map(_num, row), *map(_num, truth)])
    inputs = {f"{s}/manifest.json": sha256_file(stage_dir(cfg, s) / "manifest.json") for s in ("train", "clean")}
    return write_manifest(cfg, "predict", inputs, ["train", "clean", "dataset"], t0, {"n_segments": len(segs)})


def _num(x: float) -> str:
    return repr(float(x)) if np.isfinite(x) else ""


def evaluate_samples(tm, samples):
    """Per-segment error metrics and APE observations for test samples."""
    import torch

    from .sttf import forward

    ss = stack_samples(samples)
    names = list(tm.feature_names)
    preds = []
    with torch.no_grad():
        for a in range(0, len(ss), 64):
            sub = ss.subset(np.arange(a, min(a + 64, len(ss))))
            z = forward(tm.model, tm.scaler.apply(sub.context), sub.context_cycles, sub.target_cycles,
                        target_rows=sub.target_mask.any(axis=-1), context_valid=sub.context_mask)
            preds.append(tm.scaler.invert(z.numpy()))
    pred = np.concatenate(preds)
    by_seg: dict[tuple, dict[str, list]] = {}
    obs = []
    for k, ref in enumerate(ss.refs):
        seg = by_seg.setdefault(ref, {n: ([], []) for n in names})
        mask = ss.target_mask[k]
        c_end = int(ss.context_cycles[k][-1])
        for j, n in enumerate(names):
            ok = mask[:, j]
            seg[n][0].extend(pred[k][ok, j])
            seg[n][1].extend(ss.target[k][ok, j])
        rows = np.flatnonzero(mask.any(axis=1))
        for r in rows:
            t = ss.target[k][r]
            ok = mask[r] & (np.abs(t) > 1e-9)
            if ok.any():
                ape = float(np.mean(100.0 * np.abs(pred[k][r][ok] - t[ok]) / np.abs(t[ok])))
                obs.append(ErrorObservation(int(ss.target_cycles[k][r]) - c_end, c_end, ape))
    per_segment = []
    for ref in sorted(by_seg):
        per_segment.append({n: error_metrics(p, t, strict=False) for n, (p, t) in by_seg[ref].items() if p})
    return per_segment, obs


def cmd_eval(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    tm = _load_trained(cfg)
    dd = _require(cfg, "dataset")
    parts, meta = read_samples(dd)
    segs = _test_segments(cfg)
    d = prepare_stage_dir(cfg, "eval", force)
    _set_threads(cfg.threads)
    names = list(tm.feature_names)
    per_segment, obs = evaluate_samples(tm, parts["test"])
    rows = aggregate_report(per_segment, names)
    write_metric_report(rows, d / "metrics.csv")
    bw = int(cfg.eval["bin_width"])
    curves = {}
    for axis in ("horizon", "start_cycle"):
        bins = percentile_curves(obs, axis, bw)
        write_percentile_csv(bins, d / f"percentiles_{axis}.csv", axis)
        curves[axis] = bins
    summary_eol, pairs = eol_error_report(tm, segs, tuple(cfg.eval["thresholds"]))
    write_eol_scatter(pairs, d / "eol_scatter.csv")
    lifetimes = [p.experimental for p in pairs if p.threshold == 0.8]
    summary = {
        "metrics": [r.to_record() for r in rows],
        "eol": [{"threshold": s.threshold, "mae_cycles": s.mae, "rmse_cycles": s.rmse, "n": s.n} for s in summary_eol],
        "mean_experimental_eol80": float(np.mean(lifetimes)) if lifetimes else None,
        "n_test_samples": len(parts["test"]),
        "n_test_segments": len(segs),
        "seed": cfg.seed,
    }
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for axis, bins in curves.items():
        x = np.array([b.lo for b in bins], float)
        line_chart(d / f"percentiles_{axis}.svg",
                   {"mean": (x, [b.mean for b in bins]), "p70": (x, [b.p70 for b in bins]),
                    "p95": (x, [b.p95 for b in bins])},
                   title=f"Absolute percent error vs {axis.replace('_', ' ')}", xlabel=axis.replace("_", " "),
                   ylabel="APE (%)")
    for thr in sorted({p.threshold for p in pairs}):
        sel = [p for p in pairs if p.threshold == thr]
        scatter_chart(d / f"eol_{int(round(100 * thr))}.svg",
                      {f"EOL {int(round(100 * thr))}%": ([p.experimental for p in sel], [p.predicted for p in sel])},
                      title=f"Cycles to {int(round(100 * thr))}% of initial capacity",
                      xlabel="experimental (cycles)", ylabel="predicted (cycles)")
    inputs = {f"{s}/manifest.json": sha256_file(stage_dir(cfg, s) / "manifest.json") for s in ("train", "dataset")}
    return write_manifest(cfg, "eval", inputs, ["train", "dataset", "clean"], t0, {"report_rows": len(rows)})


def cmd_context_sweep(cfg: RunConfig, force: bool = False, context_values: Sequence[int] | None = None,
                      runner: Callable | None = None) -> dict:
    """One model per context length; Bayes factors of constant vs linear
    validation loss against context length.

    ``runner(cfg, c, seed) -> (val_mse, val_mae)`` replaces training when
    given (used for injected losses).
    """
    t0 = time.time()
    values = list(context_values or cfg.sweep["context_values"])
    segments = _segments(cfg) if runner is None else None
    d = prepare_stage_dir(cfg, "context-sweep", force)
    _set_threads(cfg.threads)
    rows = []
    for k, c in enumerate(values):
        seed = cfg.seed + k
        try:
            if runner is not None:
                mse, mae = runner(cfg, c, seed)
            else:
                parts, _ = build_partitions(cfg, segments, c)
                for name in ("train", "val"):
                    if not parts[name]:
                        raise DataError(f"no {name} samples at context length {c}")
                tm = train_model(cfg, parts, c, seed)
                best = min(tm.history, key=lambda h: h["val_mse"])
                mse, mae = best["val_mse"], best["val_mae"]
            if not (np.isfinite(mse) and np.isfinite(mae)):
                raise DataError("non-finite validation loss")
            rows.append({"context": c, "seed": seed, "status": "ok", "val_mse": float(mse), "val_mae": float(mae)})
        except SopahError as e:
            log.warning("context %s failed: %s", c, e)
            rows.append({"context": c, "seed": seed, "status": f"failed: {type(e).__name__}",
                         "val_mse": None, "val_mae": None})
    with open(d / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["context", "seed", "status", "val_mse", "val_mae"])
        for r in rows:
            w.writerow([r["context"], r["seed"], r["status"], _opt(r["val_mse"]), _opt(r["val_mae"])])
    ok = [r for r in rows if r["status"] == "ok"]
    bayes = {}
    band_rows = []
    if len(ok) >= 3 and len({r["context"] for r in ok}) > 1:
        x = np.array([r["context"] for r in ok], float)
        grid = np.linspace(x.min(), x.max(), 50)
        for metric in ("val_mse", "val_mae"):
            y = np.array([r[metric] for r in ok])
            bc = bayes_factor_const_vs_linear(x, y)
            bayes[metric] = {"bf_const_over_linear": bc.bf_const_over_linear, "log_ml_const": bc.log_ml_const,
                             "log_ml_linear": bc.log_ml_linear, "n": bc.n}
            mean, lo, hi = linear_posterior_band(x, y, grid)
            band_rows += [(metric, g, m, a, b) for g, m, a, b in zip(grid, mean, lo, hi)]
    with open(d / "band.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "context", "posterior_mean", "lower_95", "upper_95"])
        for r in band_rows:
            w.writerow([r[0], *map(repr, map(float, r[1:]))])
    (d / "bayes.json").write_text(json.dumps(bayes, indent=2, sort_keys=True) + "\n")
    if band_rows:
        for metric in ("val_mse", "val_mae"):
            br = [r for r in band_rows if r[0] == metric]
            xs = np.array([r[1] for r in br])
            line_chart(d / f"{metric}.svg",
                       {"posterior mean": (xs, [r[2] for r in br]),
                        "observed": (np.array([r["context"] for r in ok], float), [r[metric] for r in ok])},
                       bands={"95% band": (xs, np.array([r[3] for r in br]), np.array([r[4] for r in br]))},
                       title=f"{metric} vs context cycles", xlabel="context cycles", ylabel=metric)
    up = ["clean"] if runner is None else []
    inputs = {"clean/manifest.json": sha256_file(stage_dir(cfg, "clean") / "manifest.json")} if up else {}
    return write_manifest(cfg, "context-sweep", inputs, up, t0, {"runs": rows, "bayes": bayes})


def _opt(v):
    return "" if v is None else repr(float(v))


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "clean": cmd_clean,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "context-sweep": cmd_context_sweep,
}


def run_pipeline(cfg: RunConfig, force: bool = False,
                 stages=("featurize", "clean", "dataset", "train", "predict", "eval")) -> dict:
    return {s: COMMANDS[s](cfg, force) for s in stages}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sopah", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=STAGES)
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    p.add_argument("--threads", type=int, help="torch intra-op threads (1 for reproducible runs)")
    p.add_argument("--contexts", help="comma-separated context lengths for context-sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out, cfg.base_dir = args.out, Path.cwd()
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            cfg.threads = args.threads
        kwargs = {}
        if args.command == "context-sweep" and args.contexts:
            try:
                kwargs["context_values"] = [int(v) for v in args.contexts.split(",")]
            except ValueError:
                raise ConfigError(f"bad --contexts value {args.contexts!r}") from None
        manifest = COMMANDS[args.command](cfg, args.force, **kwargs)
    except SopahError as e:
        print(f"sopah {args.command}: error: {e}", file=sys.stderr)
        return exit_code(e)
    print(f"sopah {args.command}: wrote {stage_dir(cfg, args.command)} ({len(manifest['outputs'])} files)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
