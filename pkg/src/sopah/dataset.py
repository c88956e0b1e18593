"""Forecast samples from clean segments, feature scaling and cell splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cleanse import Segment
from .errors import ConfigError, EmptyTrainingSet, SegmentTooShort, TooFewCells


@dataclass(frozen=True)
class ForecastSample:
    context: np.ndarray  # C x M
    context_cycles: np.ndarray  # C
    target: np.ndarray  # T x M
    target_cycles: np.ndarray  # T
    target_mask: np.ndarray  # T x M
    segment_ref: tuple[str, int]
    context_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.context_mask is None:
            object.__setattr__(self, "context_mask", np.isfinite(self.context))

    @property
    def n_valid_targets(self) -> int:
        return int(np.any(self.target_mask, axis=1).sum())


def sample_positions(length: int, context_points: int, skip_context: int = 1, stride: int = 1) -> range:
    """Admissible context-window end positions inside a segment of ``length``."""
    first = (context_points - 1) * skip_context
    return range(first, length - 1, stride)


def make_samples(
    segment: Segment,
    context_points: int = 1,
    skip_context: int = 1,
    skip_target: int = 10,
    max_target_points: int | None = 64,
    *,
    stride: int = 1,
    use_raw: bool = False,
) -> list[ForecastSample]:
    """Every context window of ``context_points`` cycles with the targets
    that follow it up to the segment end.

    Targets are taken every ``skip_target`` cycles starting right after the
    context, truncated to ``max_target_points`` and mask-padded up to it.
    ``stride`` subsamples the window end positions.
    """
    if context_points < 1 or skip_context < 1 or skip_target < 1 or stride < 1:
        raise ConfigError("context_points, skips and stride must be positive")
    values = segment.raw_values if use_raw else segment.filtered_values
    cycles = np.asarray(segment.cycle_indices)
    n = len(values)
    positions = sample_positions(n, context_points, skip_context, stride)
    if len(positions) == 0:
        raise SegmentTooShort(
            f"segment {segment.cell_id}@{segment.start_cycle} of length {n} is too short for "
            f"{context_points} context cycles at stride {skip_context}")
    m = values.shape[1]
    out = []
    offsets = skip_context * np.arange(context_points - 1, -1, -1)
    for p in positions:
        cpos = p - offsets
        tpos = np.arange(p + 1, n, skip_target)
        if max_target_points is not None:
            tpos = tpos[:max_target_points]
        t_real = len(tpos)
        tgt = values[tpos]
        tcyc = cycles[tpos]
        pad = 0 if max_target_points is None else max_target_points - t_real
        if pad:
            tgt = np.vstack([tgt, np.full((pad, m), np.nan)])
            tcyc = np.concatenate([tcyc, tcyc[-1] + skip_target * np.arange(1, pad + 1)])
        ctx = values[cpos]
        out.append(ForecastSample(
            context=ctx,
            context_cycles=cycles[cpos],
            target=tgt,
            target_cycles=tcyc,
            target_mask=np.isfinite(tgt),
            segment_ref=(segment.cell_id, int(segment.start_cycle)),
            context_mask=np.isfinite(ctx),
        ))
    return out


@dataclass
class SampleSet:
    """Stacked arrays of equally shaped samples, ready for batching."""

    context: np.ndarray  # N x C x M
    context_cycles: np.ndarray
    context_mask: np.ndarray
    target: np.ndarray  # N x T x M
    target_cycles: np.ndarray
    target_mask: np.ndarray
    refs: list[tuple[str, int]]

    def __len__(self) -> int:
        return len(self.context)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.context[idx], self.context_cycles[idx], self.context_mask[idx],
                         self.target[idx], self.target_cycles[idx], self.target_mask[idx],
                         [self.refs[i] for i in idx])


def stack_samples(samples: Sequence[ForecastSample]) -> SampleSet:
    if not samples:
        raise EmptyTrainingSet("no samples to stack")
    shapes = {(s.context.shape, s.target.shape) for s in samples}
    if len(shapes) != 1:
        raise ConfigError(f"samples have mixed shapes {sorted(shapes)}")
    return SampleSet(
        np.stack([s.context for s in samples]),
        np.stack([s.context_cycles for s in samples]),
        np.stack([s.context_mask for s in samples]),
        np.stack([s.target for s in samples]),
        np.stack([s.target_cycles for s in samples]),
        np.stack([s.target_mask for s in samples]),
        [s.segment_ref for s in samples],
    )


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray  # features whose sd was degenerate

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.sd

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.sd + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "sd": [float(v) for v in self.sd],
                "constant": [bool(v) for v in self.constant]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scaler":
        return cls(np.array(d["mean"], dtype=float), np.array(d["sd"], dtype=float),
                   np.array(d["constant"], dtype=bool))


def fit_scaler(train: Sequence[ForecastSample] | SampleSet, min_sd: float = 1e-12) -> Scaler:
    """Per-feature mean and population sd over every valid context and
    target entry of the training samples."""
    if not isinstance(train, SampleSet):
        if not train:
            raise EmptyTrainingSet("fit_scaler needs at least one training sample")
        train = stack_samples(train)
    if len(train) == 0:
        raise EmptyTrainingSet("fit_scaler needs at least one training sample")
    m = train.context.shape[-1]
    ctx = train.context.reshape(-1, m)
    cm = train.context_mask.reshape(-1, m)
    tgt = train.target.reshape(-1, m)
    tm = train.target_mask.reshape(-1, m)
    mean = np.zeros(m)
    sd = np.ones(m)
    const = np.zeros(m, dtype=bool)
    for j in range(m):
        vals = np.concatenate([ctx[cm[:, j], j], tgt[tm[:, j], j]])
        if len(vals) == 0:
            const[j] = True
            continue
        mean[j] = vals.mean()
        s = vals.std()
        if s <= min_sd * max(1.0, abs(mean[j])):
            const[j] = True
        else:
            sd[j] = s
    return Scaler(mean, sd, const)


def apply_scaler(scaler: Scaler, x):
    return scaler.apply(x)


def invert_scaler(scaler: Scaler, z):
    return scaler.invert(z)


# ---------------------------------------------------------------------------


def split_by_cell(cell_ids: Iterable[str], ratios=(0.7, 0.15, 0.15), seed: int = 0
                  ) -> tuple[list[str], list[str], list[str]]:
    """Seeded shuffle of the sorted cell ids into train/val/test.

    Train and validation sizes are ``floor(ratio * n)`` (at least one each);
    the test partition takes the remainder.
    """
    ids = sorted(set(cell_ids))
    n = len(ids)
    if n < 3:
        raise TooFewCells(f"need at least 3 cells to split, got {n}")
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r <= 0) or not math.isclose(r.sum(), 1.0, abs_tol=1e-9):
        raise ConfigError("split ratios must be three positive numbers summing to 1")
    n_train = max(1, math.floor(r[0] * n + 1e-9))
    n_val = max(1, math.floor(r[1] * n + 1e-9))
    while n - n_train - n_val < 1:
        if n_train > 1:
            n_train -= 1
        else:
            n_val -= 1
    perm = np.random.default_rng(seed).permutation(n)
    order = [ids[i] for i in perm]
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


# ---------------------------------------------------------------------------
# persistence: one CSV shard per partition plus a JSON manifest


def _fmt(x: float) -> str:
    return repr(float(x)) if np.isfinite(x) else ""


def write_samples(directory: str | Path, partitions: Mapping[str, Sequence[ForecastSample]],
                  feature_names: Sequence[str], manifest: Mapping) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards = {}
    for name, samples in partitions.items():
        fname = f"{name}.csv"
        shards[name] = {"file": fname, "n_samples": len(samples)}
        with open(directory / fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "cell_id", "segment_start", "role", "cycle_index", *feature_names])
            for k, s in enumerate(samples):
                for c, row, ok in zip(s.context_cycles, s.context, s.context_mask):
                    w.writerow([k, s.segment_ref[0], s.segment_ref[1], "context", int(c),
                                *(_fmt(x) if o else "" for x, o in zip(row, ok))])
                for c, row, ok in zip(s.target_cycles, s.target, s.target_mask):
                    w.writerow([k, s.segment_ref[0], s.segment_ref[1], "target", int(c),
                                *(_fmt(x) if o else "" for x, o in zip(row, ok))])
    doc = dict(manifest)
    doc["feature_names"] = list(feature_names)
    doc["shards"] = shards
    (directory / "samples.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_samples(directory: str | Path) -> tuple[dict[str, list[ForecastSample]], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "samples.json").read_text())
    m = len(manifest["feature_names"])
    out = {}
    for name, info in manifest["shards"].items():
        groups: dict[int, dict] = {}
        with open(directory / info["file"], newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                g = groups.setdefault(int(row[0]), {"ref": (row[1], int(row[2])), "context": [], "target": []})
                vals = [float(v) if v != "" else np.nan for v in row[5 : 5 + m]]
                g[row[3]].append((int(row[4]), vals))
        samples = []
        for k in sorted(groups):
            g = groups[k]
            ctx = np.array([v for _, v in g["context"]], dtype=float).reshape(-1, m)
            tgt = np.array([v for _, v in g["target"]], dtype=float).reshape(-1, m)
            samples.append(ForecastSample(ctx, np.array([c for c, _ in g["context"]]), tgt,
                                          np.array([c for c, _ in g["target"]]), np.isfinite(tgt),
                                          g["ref"], np.isfinite(ctx)))
        out[name] = samples
    return out, manifest
