"""Encoder-decoder transformer over flattened (cycle, variable) tokens."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..errors import ConfigError, EmptyMask, SequenceTooLong, ShapeMismatch

DTYPE = torch.float64
ATTENTION_MODES = ("spatiotemporal", "temporal")


@dataclass(frozen=True)
class SttfConfig:
    n_features: int
    d_model: int = 100
    d_ff: int = 200
    enc_layers: int = 4
    dec_layers: int = 4
    n_heads: int = 4
    start_token_len: int = 4
    dropout: float = 0.1
    periods: tuple[float, ...] = (1.0, 10.0, 100.0)
    position_scale: float = 1000.0
    max_seq_len: int = 8192  # tokens on either side of the model
    attention: str = "spatiotemporal"

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))
        dims = dict(n_features=self.n_features, d_model=self.d_model, d_ff=self.d_ff, enc_layers=self.enc_layers,
                    dec_layers=self.dec_layers, n_heads=self.n_heads, start_token_len=self.start_token_len,
                    max_seq_len=self.max_seq_len)
        bad = [k for k, v in dims.items() if int(v) != v or v < 1]
        if bad:
            raise ConfigError(f"dimensions must be positive integers: {bad}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.periods or any(p <= 0 for p in self.periods):
            raise ConfigError("positional periods must be positive")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}")

    @property
    def n_position_features(self) -> int:
        return 1 + 2 * len(self.periods)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["periods"] = list(self.periods)
        return d

    @classmethod
    def from_dict(cls, d) -> "SttfConfig":
        return cls(**dict(d))


def cycle_position_features(n, periods=(1.0, 10.0, 100.0), scale: float = 1000.0) -> np.ndarray:
    """``[n/scale, sin(2 pi n/P), cos(2 pi n/P) for each P]``; last axis added.

    The phase is reduced modulo each period first so large cycle numbers
    keep full precision.
    """
    n = np.asarray(n, dtype=float)
    if np.any(n < 0):
        raise ConfigError("cycle index must be nonnegative")
    cols = [n / scale]
    for p in periods:
        ph = 2.0 * np.pi * np.mod(n, p) / p
        cols += [np.sin(ph), np.cos(ph)]
    return np.stack(cols, axis=-1)


def _position_features_t(cycles: torch.Tensor, periods, scale: float) -> torch.Tensor:
    cols = [cycles / scale]
    for p in periods:
        ph = 2.0 * math.pi * torch.remainder(cycles, p) / p
        cols += [torch.sin(ph), torch.cos(ph)]
    return torch.stack(cols, dim=-1)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.k = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.v = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.o = nn.Linear(d_model, d_model, dtype=DTYPE)

    def forward(self, xq, xkv, mask=None):
        return multi_head_attention(xq, xkv, xkv, mask, self)


def attention_probabilities(q: torch.Tensor, k: torch.Tensor, mask=None) -> torch.Tensor:
    """Softmax of scaled dot products; rows with no allowed key are all zero.

    ``q`` is ``(..., Lq, dh)``, ``k`` is ``(..., Lk, dh)`` and ``mask``
    broadcasts to ``(..., Lq, Lk)`` with ``True`` meaning attend.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is None:
        return torch.softmax(scores, dim=-1)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    empty = ~mask.any(dim=-1, keepdim=True)
    scores = scores.masked_fill(~mask, -math.inf).masked_fill(empty, 0.0)
    return torch.softmax(scores, dim=-1).masked_fill(empty, 0.0)


def multi_head_attention(queries, keys, values, mask, weights: Attention) -> torch.Tensor:
    """Multi-head scaled dot-product attention over ``(B, L, d)`` tokens.

    Query rows whose mask allows no key produce a zero output row.
    """
    if queries.shape[-1] != weights.q.in_features or keys.shape[-1] != weights.k.in_features:
        raise ShapeMismatch("token width does not match the attention projections")
    if keys.shape[:-1] != values.shape[:-1]:
        raise ShapeMismatch("keys and values must have the same length")
    squeeze = queries.dim() == 2
    if squeeze:
        queries, keys, values = queries[None], keys[None], values[None]
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool)[None]
    b, lq, d = queries.shape
    lk = keys.shape[1]
    h = weights.n_heads
    dh = d // h

    def split(x, n):
        return x.view(b, n, h, dh).transpose(1, 2)

    q = split(weights.q(queries), lq)
    k = split(weights.k(keys), lk)
    v = split(weights.v(values), lk)
    m = None
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.bool)
        if m.shape[-2:] != (lq, lk):
            raise ShapeMismatch(f"mask shape {tuple(m.shape)} does not match ({lq}, {lk})")
        dead = ~m.any(dim=-1)  # broadcasts to (B, Lq)
        # one additive bias shared by all heads; dead rows get a uniform
        # softmax here and are zeroed on the output below
        bias = torch.zeros(m.shape, dtype=q.dtype).masked_fill_(~m, -math.inf)
        bias.masked_fill_(dead.unsqueeze(-1), 0.0)
        p = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh) + bias.unsqueeze(-3), dim=-1)
    else:
        p = attention_probabilities(q, k)
    out = weights.o((p @ v).transpose(1, 2).reshape(b, lq, d))
    if m is not None:
        out = out.masked_fill(dead.unsqueeze(-1), 0.0)
    return out[0] if squeeze else out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff, dtype=DTYPE)
        self.fc2 = nn.Linear(d_ff, d_model, dtype=DTYPE)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: SttfConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        y = self.norm1(x)
        x = x + self.drop(self.attn(y, y, mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: SttfConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm3 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_mask, cross_mask):
        y = self.norm1(x)
        x = x + self.drop(self.self_attn(y, y, self_mask))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, cross_mask))
        return x + self.drop(self.ff(self.norm3(x)))


class Sttf(nn.Module):
    def __init__(self, cfg: SttfConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.value_proj = nn.Linear(1, d, dtype=DTYPE)
        self.placeholder = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.var_embed = nn.Parameter(torch.zeros(cfg.n_features, d, dtype=DTYPE))
        self.pos_proj = nn.Linear(cfg.n_position_features, d, dtype=DTYPE)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.head = nn.Linear(d, 1, dtype=DTYPE)

    def reset_parameters(self, seed: int) -> None:
        """Deterministic initialisation from ``seed``."""
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.dim() == 1:  # layer norm gains, placeholder
                    if "norm" in name:
                        p.fill_(1.0)
                    else:
                        p.normal_(0.0, 0.02, generator=g)
                elif name == "var_embed":
                    p.normal_(0.0, 0.02, generator=g)
                else:
                    bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                    p.uniform_(-bound, bound, generator=g)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.state_dict().items()}


def build_model(cfg: SttfConfig, seed: int = 0) -> Sttf:
    model = Sttf(cfg)
    model.reset_parameters(seed)
    return model


def _as_t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def embed_tokens(block, cycles, is_target: bool, model: Sttf, valid=None) -> torch.Tensor:
    """Tokens for a ``(K, M)`` (or batched ``(B, K, M)``) value block.

    Token ``(k, m)`` sits at flat index ``k*M + m``.  Target blocks, and
    entries flagged invalid, use the learned placeholder instead of the
    value projection.
    """
    cfg = model.cfg
    x = _as_t(block)
    c = _as_t(cycles)
    squeeze = x.dim() == 2
    if squeeze:
        x, c = x[None], c[None]
        if valid is not None:
            valid = torch.as_tensor(np.asarray(valid), dtype=torch.bool)[None]
    if x.dim() != 3 or x.shape[-1] != cfg.n_features or c.shape != x.shape[:2]:
        raise ShapeMismatch(f"block {tuple(x.shape)} / cycles {tuple(c.shape)} do not match M={cfg.n_features}")
    b, k, m = x.shape
    if is_target:
        val = model.placeholder.expand(b, k, m, cfg.d_model)
    else:
        ok = torch.isfinite(x)
        if valid is not None:
            ok = ok & torch.as_tensor(valid, dtype=torch.bool)
        proj = model.value_proj(torch.where(ok, x, 0.0).unsqueeze(-1))
        val = torch.where(ok.unsqueeze(-1), proj, model.placeholder)
    pos = model.pos_proj(_position_features_t(c, cfg.periods, cfg.position_scale))
    tok = val + model.var_embed + pos.unsqueeze(2)
    tok = tok.reshape(b, k * m, cfg.d_model)
    return tok[0] if squeeze else tok


def _variable_mask(lq: int, lk: int, m: int) -> torch.Tensor:
    vq = torch.arange(lq) % m
    vk = torch.arange(lk) % m
    return vq[:, None] == vk[None, :]


def forward(model: Sttf, context, context_cycles, target_cycles, target_rows=None, context_valid=None) -> torch.Tensor:
    """Normalized prediction ``(B, T, M)`` (or ``(T, M)`` for unbatched input).

    ``target_rows`` flags real (non-padding) target cycles; padding tokens
    are hidden from every other decoder token.
    """
    cfg = model.cfg
    ctx = _as_t(context)
    ccyc = _as_t(context_cycles)
    tcyc = _as_t(target_cycles)
    squeeze = ctx.dim() == 2
    if squeeze:
        ctx, ccyc, tcyc = ctx[None], ccyc[None], tcyc[None]
        if target_rows is not None:
            target_rows = np.asarray(target_rows)[None]
        if context_valid is not None:
            context_valid = np.asarray(context_valid)[None]
    if ctx.dim() != 3 or tcyc.dim() != 2 or tcyc.shape[0] != ctx.shape[0]:
        raise ShapeMismatch("context must be (B, C, M) and target cycles (B, T)")
    b, c, m = ctx.shape
    t = tcyc.shape[1]
    s = min(cfg.start_token_len, c)
    if max(c, s + t) * m > cfg.max_seq_len:
        raise SequenceTooLong(f"{max(c, s + t) * m} tokens exceed max_seq_len {cfg.max_seq_len}")
    if context_valid is not None:
        context_valid = torch.as_tensor(np.asarray(context_valid), dtype=torch.bool)
    enc = embed_tokens(ctx, ccyc, False, model, context_valid)
    enc_mask = None
    if cfg.attention == "temporal":
        enc_mask = _variable_mask(c * m, c * m, m)
    for layer in model.encoder:
        enc = layer(enc, enc_mask)
    enc = model.enc_norm(enc)

    start = embed_tokens(ctx[:, c - s :], ccyc[:, c - s :], False, model,
                         None if context_valid is None else context_valid[:, c - s :])
    dummy = torch.zeros(b, t, m, dtype=DTYPE)
    tgt = embed_tokens(dummy, tcyc, True, model)
    dec = torch.cat([start, tgt], dim=1)
    n_dec = (s + t) * m
    keys = torch.ones(b, n_dec, dtype=torch.bool)
    if target_rows is not None:
        rows = torch.as_tensor(np.asarray(target_rows), dtype=torch.bool)
        keys[:, s * m :] = rows.repeat_interleave(m, dim=1)
    self_mask = keys[:, None, :].expand(b, n_dec, n_dec)
    cross_mask = None
    if cfg.attention == "temporal":
        self_mask = self_mask & _variable_mask(n_dec, n_dec, m)
        cross_mask = _variable_mask(n_dec, c * m, m)
    for layer in model.decoder:
        dec = layer(dec, enc, self_mask, cross_mask)
    dec = model.dec_norm(dec)
    out = model.head(dec[:, s * m :]).reshape(b, t, m)
    return out[0] if squeeze else out


def masked_mse(prediction, target, mask) -> torch.Tensor:
    """Mean squared error over mask-true entries."""
    p = _as_t(prediction)
    y = _as_t(target)
    mk = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask, dtype=torch.bool)
    if p.shape != y.shape or p.shape != mk.shape:
        raise ShapeMismatch(f"prediction {tuple(p.shape)}, target {tuple(y.shape)}, mask {tuple(mk.shape)}")
    n = int(mk.sum())
    if n == 0:
        raise EmptyMask("masked_mse needs at least one valid entry")
    e = torch.where(mk, p - torch.where(mk, y, 0.0), 0.0)
    return (e * e).sum() / n


def masked_mae(prediction, target, mask) -> torch.Tensor:
    p, y = _as_t(prediction), _as_t(target)
    mk = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask, dtype=torch.bool)
    n = int(mk.sum())
    if n == 0:
        raise EmptyMask("masked_mae needs at least one valid entry")
    return torch.where(mk, (p - torch.where(mk, y, 0.0)).abs(), 0.0).sum() / n
