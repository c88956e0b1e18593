"""Single-file model format.

Layout: the magic line ``SOPAH-STTF\\n``, an 8-byte little-endian header
length, a UTF-8 JSON header with sorted keys, then every parameter block as
little-endian float64 in row-major order, sorted by parameter name.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..dataset import Scaler
from ..errors import DataError
from .model import DTYPE, Sttf, SttfConfig
from .train import TrainedModel

MAGIC = b"SOPAH-STTF\n"
FORMAT_VERSION = 1


def model_bytes(tm: TrainedModel) -> bytes:
    state = tm.model.state_dict()
    names = sorted(state)
    header = {
        "format_version": FORMAT_VERSION,
        "config": tm.cfg.to_dict(),
        "scaler": tm.scaler.to_dict(),
        "feature_names": list(tm.feature_names),
        "schema": tm.schema,
        "seed": tm.seed,
        "skip_target": tm.skip_target,
        "max_target_points": tm.max_target_points,
        "context_points": tm.context_points,
        "history": tm.history,
        "parameters": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(state[n].detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes() for n in names)
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def save_model(tm: TrainedModel, path: str | Path) -> None:
    Path(path).write_bytes(model_bytes(tm))


def load_model(path: str | Path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a model file")
    off = len(MAGIC)
    try:
        (n,) = struct.unpack("<Q", raw[off : off + 8])
        header = json.loads(raw[off + 8 : off + 8 + n])
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: unreadable header ({e})") from None
    off += 8
    off += n
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    cfg = SttfConfig.from_dict(header["config"])
    model = Sttf(cfg)
    expected = model.shapes()
    state = {}
    for p in header["parameters"]:
        name, shape = p["name"], tuple(p["shape"])
        if expected.get(name) != shape:
            raise DataError(f"{path}: parameter {name} has shape {shape}, config implies {expected.get(name)}")
        size = int(np.prod(shape)) * 8
        if off + size > len(raw):
            raise DataError(f"{path}: file ends inside parameter {name}")
        arr = np.frombuffer(raw[off : off + size], dtype="<f8").reshape(shape)
        off += size
        state[name] = torch.from_numpy(arr.copy())
    if set(state) != set(expected) or off != len(raw):
        raise DataError(f"{path}: parameter blocks do not match the config")
    model.load_state_dict(state)
    model.eval()
    return TrainedModel(model, Scaler.from_dict(header["scaler"]), tuple(header["feature_names"]),
                        header["skip_target"], header["max_target_points"], header["context_points"],
                        header["schema"], header["seed"], header["history"])
