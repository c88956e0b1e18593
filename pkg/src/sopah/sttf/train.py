"""Training loop, early stopping and chunked trajectory prediction."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..dataset import ForecastSample, SampleSet, Scaler, stack_samples
from ..errors import ConfigError, DivergenceDetected, EmptyTrainingSet, HorizonZero
from .model import DTYPE, Sttf, forward, masked_mae, masked_mse


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr, eps and clip_norm must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d) -> "OptimConfig":
        return cls(**dict(d))


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training
    should stop, i.e. after ``patience`` epochs without an improvement of at
    least ``min_delta``."""

    def __init__(self, patience: int = 5, min_delta: float = 1e-5):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float, state=None) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.best_state = state
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainedModel:
    """A fitted network plus everything needed to run it on raw features."""

    model: Sttf
    scaler: Scaler
    feature_names: tuple[str, ...]
    skip_target: int = 10
    max_target_points: int = 64
    context_points: int = 1
    schema: str = ""
    seed: int = 0
    history: list = field(default_factory=list)

    @property
    def cfg(self):
        return self.model.cfg


def _tensors(ss: SampleSet, scaler: Scaler | None):
    ctx, tgt = ss.context, ss.target
    if scaler is not None:
        ctx, tgt = scaler.apply(ctx), scaler.apply(tgt)
    return (torch.as_tensor(ctx, dtype=DTYPE), torch.as_tensor(ss.context_cycles, dtype=DTYPE),
            torch.as_tensor(ss.context_mask), torch.as_tensor(tgt, dtype=DTYPE),
            torch.as_tensor(ss.target_cycles, dtype=DTYPE), torch.as_tensor(ss.target_mask))


def _batch_forward(model, tensors, idx):
    ctx, ccyc, cmask, tgt, tcyc, tmask = (t[idx] for t in tensors)
    pred = forward(model, ctx, ccyc, tcyc, target_rows=tmask.any(dim=-1), context_valid=cmask)
    return pred, tgt, tmask


def evaluate(model: Sttf, samples: SampleSet, scaler: Scaler | None, batch_size: int = 64) -> tuple[float, float]:
    """Masked MSE and MAE over all entries of ``samples`` (normalized units)."""
    tensors = _tensors(samples, scaler)
    model.eval()
    se = ae = 0.0
    n = 0
    with torch.no_grad():
        for a in range(0, len(samples), batch_size):
            idx = torch.arange(a, min(a + batch_size, len(samples)))
            pred, tgt, mask = _batch_forward(model, tensors, idx)
            k = int(mask.sum())
            if k == 0:
                continue
            se += float(masked_mse(pred, tgt, mask)) * k
            ae += float(masked_mae(pred, tgt, mask)) * k
            n += k
    if n == 0:
        raise EmptyTrainingSet("no valid target entries to evaluate")
    return se / n, ae / n


def fit(model: Sttf, train: Sequence[ForecastSample] | SampleSet, val: Sequence[ForecastSample] | SampleSet,
        optim: OptimConfig = OptimConfig(), scaler: Scaler | None = None, log=None) -> tuple[Sttf, list[dict]]:
    """Mini-batch Adam with gradient clipping and early stopping.

    Returns the best-validation state (loaded into ``model``) and the
    per-epoch history.  Deterministic for a fixed seed on one thread.
    """
    train = train if isinstance(train, SampleSet) else stack_samples(list(train))
    val = val if isinstance(val, SampleSet) else stack_samples(list(val))
    if len(train) == 0 or len(val) == 0:
        raise EmptyTrainingSet("training and validation partitions must be nonempty")
    torch.manual_seed(optim.seed)
    rng = np.random.default_rng(optim.seed)
    tensors = _tensors(train, scaler)
    opt = torch.optim.Adam(model.parameters(), lr=optim.lr, betas=optim.betas, eps=optim.eps)
    stopper = EarlyStopping(optim.patience, optim.min_delta)
    history = []
    for epoch in range(1, optim.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        tot = 0.0
        nb = 0
        for a in range(0, len(order), optim.batch_size):
            idx = torch.as_tensor(order[a : a + optim.batch_size])
            pred, tgt, mask = _batch_forward(model, tensors, idx)
            if not mask.any():
                continue
            loss = masked_mse(pred, tgt, mask)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), optim.clip_norm)
            opt.step()
            tot += loss.item()
            nb += 1
        val_mse, val_mae = evaluate(model, val, scaler)
        if not math.isfinite(val_mse):
            raise DivergenceDetected(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_mse": tot / max(nb, 1), "val_mse": val_mse, "val_mae": val_mae})
        if log is not None:
            log(history[-1])
        stop = stopper.update(epoch, val_mse, None)
        if stopper.best_epoch == epoch:
            stopper.best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    model.load_state_dict(stopper.best_state)
    model.eval()
    return model, history


def train_steps(model: Sttf, batch: Sequence[ForecastSample] | SampleSet, steps: int,
                optim: OptimConfig = OptimConfig(), scaler: Scaler | None = None) -> list[float]:
    """Repeated optimizer steps on one fixed batch; returns the loss per step."""
    batch = batch if isinstance(batch, SampleSet) else stack_samples(list(batch))
    torch.manual_seed(optim.seed)
    tensors = _tensors(batch, scaler)
    idx = torch.arange(len(batch))
    opt = torch.optim.Adam(model.parameters(), lr=optim.lr, betas=optim.betas, eps=optim.eps)
    model.train()
    losses = []
    for step in range(steps):
        pred, tgt, mask = _batch_forward(model, tensors, idx)
        loss = masked_mse(pred, tgt, mask)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), optim.clip_norm)
        opt.step()
        losses.append(loss.item())
    model.eval()
    return losses


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Forecast:
    values: np.ndarray  # T x M, original units
    target_cycles: np.ndarray
    valid: np.ndarray
    chunks: int = 1


def target_schedule(last_context_cycle: int, horizon: int, skip_target: int) -> np.ndarray:
    """Cycles ``c+1, c+1+skip, ...`` no further than ``c + horizon``."""
    if horizon < 1:
        raise HorizonZero("horizon must be at least one cycle")
    return last_context_cycle + 1 + np.arange(0, horizon, skip_target)


def predict_trajectory(tm: TrainedModel, context, context_cycles, horizon: int,
                       skip_target: int | None = None, max_target_points: int | None = None) -> Forecast:
    """Forecast up to ``horizon`` cycles past the context.

    Long horizons are split into chunks of ``max_target_points`` that all
    condition on the same measured context.
    """
    ctx = np.atleast_2d(np.asarray(context, dtype=float))
    ccyc = np.atleast_1d(np.asarray(context_cycles, dtype=float))
    if len(ccyc) < 1:
        raise ConfigError("context must contain at least one cycle")
    skip = tm.skip_target if skip_target is None else skip_target
    cap = tm.max_target_points if max_target_points is None else max_target_points
    cycles = target_schedule(int(ccyc[-1]), horizon, skip)
    z = tm.scaler.apply(ctx)
    outs = []
    tm.model.eval()
    with torch.no_grad():
        for a in range(0, len(cycles), cap):
            chunk = cycles[a : a + cap]
            pred = forward(tm.model, z[None], ccyc[None], chunk[None].astype(float), context_valid=np.isfinite(z)[None])
            outs.append(pred[0].numpy())
    values = tm.scaler.invert(np.concatenate(outs, axis=0))
    return Forecast(values, cycles, np.isfinite(values), len(outs))
