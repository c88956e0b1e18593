import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sopah.cleanse import Segment
from sopah.dataset import Scaler, fit_scaler, make_samples, stack_samples
from sopah.errors import (
    ConfigError,
    DataError,
    EmptyMask,
    HorizonZero,
    SequenceTooLong,
    ShapeMismatch,
)
from sopah.sttf import (
    EarlyStopping,
    OptimConfig,
    SttfConfig,
    TrainedModel,
    attention_probabilities,
    build_model,
    cycle_position_features,
    embed_tokens,
    fit,
    forward,
    load_model,
    masked_mae,
    masked_mse,
    model_bytes,
    predict_trajectory,
    save_model,
    target_schedule,
)
from sopah.sttf.io import MAGIC

SMALL = dict(d_model=8, d_ff=16, enc_layers=1, dec_layers=1, n_heads=2, dropout=0.0)


def _small(m=3, seed=0, **kw):
    return build_model(SttfConfig(n_features=m, **{**SMALL, **kw}), seed)


class TestPositions:
    def test_values(self):
        f = cycle_position_features([0, 25])
        np.testing.assert_allclose(f[0], [0, 0, 1, 0, 1, 0, 1], atol=1e-15)
        np.testing.assert_allclose(f[1], [0.025, 0, 1, 0, -1, 1, 0], atol=1e-12)

    def test_large_cycle_precision(self):
        f = cycle_position_features([10**12 + 25])[0]
        np.testing.assert_allclose(f[1:], cycle_position_features([25])[0][1:], atol=1e-12)

    def test_negative(self):
        with pytest.raises(ConfigError):
            cycle_position_features([-1])


class TestEmbedding:
    def _plain(self, m=3):
        model = _small(m)
        with torch.no_grad():
            model.pos_proj.weight.zero_()
            model.pos_proj.bias.zero_()
            model.value_proj.weight.fill_(1.0)
            model.value_proj.bias.zero_()
            model.var_embed.copy_(torch.arange(m, dtype=torch.float64)[:, None] * 100.0)
        return model

    def test_cycle_major_order(self):
        model = self._plain()
        block = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        tok = embed_tokens(block, [0, 1], False, model)
        assert tok.shape == (6, 8)
        # token k*M + m carries value x[k, m] plus the embedding of variable m
        np.testing.assert_allclose(tok[:, 0].detach().numpy(), [1, 102, 203, 4, 105, 206])

    def test_target_uses_placeholder(self):
        model = self._plain()
        with torch.no_grad():
            model.placeholder.fill_(7.0)
        tok = embed_tokens(np.full((1, 3), 123.0), [0], True, model)
        np.testing.assert_allclose(tok[:, 0].detach().numpy(), [7, 107, 207])

    def test_invalid_context_uses_placeholder(self):
        model = self._plain()
        with torch.no_grad():
            model.placeholder.fill_(-1.0)
        tok = embed_tokens(np.array([[1.0, np.nan, 3.0]]), [0], False, model)
        np.testing.assert_allclose(tok[:, 0].detach().numpy(), [1, 99, 203])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            embed_tokens(np.zeros((2, 4)), [0, 1], False, _small(3))


class TestAttention:
    def test_uniform_on_equal_keys(self):
        q = torch.ones(2, 4, dtype=torch.float64)
        k = torch.ones(3, 4, dtype=torch.float64)
        np.testing.assert_allclose(attention_probabilities(q, k).numpy(), 1 / 3)

    def test_known_softmax(self):
        q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        k = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        p = attention_probabilities(q, k)[0].numpy()
        e = math.exp(1 / math.sqrt(2))
        np.testing.assert_allclose(p, [e / (e + 1), 1 / (e + 1)])

    @given(st.integers(0, 1000))
    def test_rows_sum_to_one_or_zero(self, seed):
        g = torch.Generator().manual_seed(seed)
        q = torch.randn(5, 4, generator=g, dtype=torch.float64)
        k = torch.randn(6, 4, generator=g, dtype=torch.float64)
        mask = torch.rand(5, 6, generator=g) > 0.5
        mask[0] = False
        p = attention_probabilities(q, k, mask)
        sums = p.sum(-1).numpy()
        alive = mask.any(-1).numpy()
        np.testing.assert_allclose(sums[alive], 1.0, atol=1e-12)
        np.testing.assert_array_equal(sums[~alive], 0.0)
        assert torch.all(p[~mask] == 0)


def _batch(rng, b=2, c=2, t=3, m=3):
    ctx = rng.normal(size=(b, c, m))
    ccyc = np.tile(np.arange(c, dtype=float), (b, 1)) + 5
    tcyc = ccyc[:, -1:] + 1 + 2 * np.arange(t)
    return ctx, ccyc, tcyc


class TestForward:
    def test_shapes(self, rng):
        model = _small()
        ctx, ccyc, tcyc = _batch(rng)
        assert forward(model, ctx, ccyc, tcyc).shape == (2, 3, 3)
        assert forward(model, ctx[0], ccyc[0], tcyc[0]).shape == (3, 3)

    def test_zero_weights_predict_zero(self, rng):
        model = _small()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        ctx, ccyc, tcyc = _batch(rng)
        assert torch.all(forward(model, ctx, ccyc, tcyc) == 0)

    def test_padding_invariance(self, rng):
        model = _small()
        ctx, ccyc, tcyc = _batch(rng, b=1)
        base = forward(model, ctx, ccyc, tcyc).detach()
        extra = np.concatenate([tcyc, tcyc[:, -1:] + np.array([[3.0, 50.0]])], axis=1)
        rows = np.array([[True] * 3 + [False] * 2])
        padded = forward(model, ctx, ccyc, extra, target_rows=rows).detach()
        torch.testing.assert_close(padded[:, :3], base, rtol=0, atol=1e-12)

    @settings(max_examples=15)
    @given(st.permutations([0, 1, 2, 3]))
    def test_variable_permutation_equivariance(self, perm):
        perm = list(perm)
        model = _small(m=4)
        rng = np.random.default_rng(1)
        ctx, ccyc, tcyc = _batch(rng, m=4)
        base = forward(model, ctx, ccyc, tcyc).detach()
        with torch.no_grad():
            model.var_embed.copy_(model.var_embed[perm].clone())
        out = forward(model, ctx[..., perm], ccyc, tcyc).detach()
        torch.testing.assert_close(out, base[..., perm], rtol=0, atol=1e-10)

    def test_temporal_mode_isolates_variables(self, rng):
        model = _small(attention="temporal")
        ctx, ccyc, tcyc = _batch(rng, b=1)
        base = forward(model, ctx, ccyc, tcyc).detach()
        ctx2 = ctx.copy()
        ctx2[..., 1] += 5.0
        out = forward(model, ctx2, ccyc, tcyc).detach()
        torch.testing.assert_close(out[..., [0, 2]], base[..., [0, 2]], rtol=0, atol=1e-12)
        assert not torch.allclose(out[..., 1], base[..., 1])
        full = _small()
        assert not torch.allclose(forward(full, ctx2, ccyc, tcyc)[..., 0], forward(full, ctx, ccyc, tcyc)[..., 0])

    def test_too_long(self, rng):
        model = _small(max_seq_len=10)
        ctx, ccyc, tcyc = _batch(rng)
        with pytest.raises(SequenceTooLong):
            forward(model, ctx, ccyc, tcyc)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SttfConfig(n_features=3, d_model=10, n_heads=4)
        with pytest.raises(ConfigError):
            SttfConfig(n_features=0)
        with pytest.raises(ConfigError):
            SttfConfig(n_features=3, attention="bogus")


class TestLoss:
    def test_masked_mse(self):
        p = np.array([1.0, 2.0, 3.0])
        y = np.array([1.0, 0.0, np.nan])
        mk = np.array([True, True, False])
        assert float(masked_mse(p, y, mk)) == pytest.approx(2.0)
        assert float(masked_mae(p, y, mk)) == pytest.approx(1.0)

    def test_nan_target_masked_gradient_finite(self):
        p = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        masked_mse(p, torch.tensor([0.0, math.nan], dtype=torch.float64), np.array([True, False])).backward()
        np.testing.assert_array_equal(p.grad.numpy(), [2.0, 0.0])

    def test_errors(self):
        with pytest.raises(EmptyMask):
            masked_mse(np.ones(2), np.ones(2), np.zeros(2, bool))
        with pytest.raises(ShapeMismatch):
            masked_mse(np.ones(2), np.ones(3), np.ones(2, bool))


class TestEarlyStopping:
    def test_flat_after_first(self):
        es = EarlyStopping(patience=5, min_delta=1e-5)
        stops = [es.update(e, loss) for e, loss in enumerate([0.5, 0.5, 0.5 - 1e-6, 0.6, 0.7, 0.5], start=1)]
        assert stops == [False] * 5 + [True]
        assert es.best_epoch == 1

    def test_improvement_resets(self):
        es = EarlyStopping(patience=2, min_delta=0.0)
        assert not es.update(1, 1.0)
        assert not es.update(2, 1.0)
        assert not es.update(3, 0.9)
        assert not es.update(4, 0.95)
        assert es.update(5, 0.95)
        assert es.best_epoch == 3


def _segment(n=80, m=3):
    x = np.arange(n)[:, None]
    vals = np.hstack([1 - 1e-3 * x, 0.05 + 1e-4 * x, 99 - 1e-3 * x])[:, :m]
    return Segment("c", 0, n - 1, vals, vals.copy(), 1.0, np.arange(n))


class TestFit:
    def _data(self):
        s = make_samples(_segment(), max_target_points=4, skip_target=5, stride=4)
        return stack_samples(s[:12]), stack_samples(s[12:]), fit_scaler(s[:12])

    def test_deterministic(self):
        tr, va, sc = self._data()
        opt = OptimConfig(max_epochs=3, seed=4)
        a, ha = fit(_small(seed=1), tr, va, opt, sc)
        b, hb = fit(_small(seed=1), tr, va, opt, sc)
        assert ha == hb
        for k, v in a.state_dict().items():
            assert torch.equal(v, b.state_dict()[k])

    def test_returns_best_state(self):
        tr, va, sc = self._data()
        model, hist = fit(_small(), tr, va, OptimConfig(max_epochs=4, lr=5e-3), sc)
        from sopah.sttf import evaluate

        assert evaluate(model, va, sc)[0] == pytest.approx(min(h["val_mse"] for h in hist), rel=1e-12)

    def test_divergence(self):
        from sopah.errors import DivergenceDetected

        tr, va, sc = self._data()
        model = _small()
        with torch.no_grad():
            model.head.bias.fill_(math.inf)
        with pytest.raises(DivergenceDetected):
            fit(model, tr, va, OptimConfig(max_epochs=1), sc)


def _trained(m=3, **kw):
    model = _small(m, **kw)
    sc = Scaler(np.zeros(m), np.ones(m), np.zeros(m, bool))
    return TrainedModel(model, sc, tuple(f"f{j}" for j in range(m)), skip_target=10, max_target_points=64)


class TestPredict:
    def test_schedule(self):
        np.testing.assert_array_equal(target_schedule(5, 25, 10), [6, 16, 26])
        with pytest.raises(HorizonZero):
            target_schedule(5, 0, 10)

    @pytest.mark.parametrize("horizon,points,chunks", [(1, 1, 1), (640, 64, 1), (1300, 130, 3)])
    def test_chunks(self, horizon, points, chunks):
        tm = _trained()
        fc = predict_trajectory(tm, np.ones((1, 3)), [0], horizon)
        assert len(fc.target_cycles) == points
        assert fc.values.shape == (points, 3)
        assert fc.chunks == chunks

    def test_chunk_matches_direct_call(self):
        tm = _trained()
        fc = predict_trajectory(tm, np.ones((1, 3)), [0], 1300)
        direct = forward(tm.model, np.ones((1, 3)), [0.0], fc.target_cycles[64:128].astype(float)).detach().numpy()
        np.testing.assert_allclose(fc.values[64:128], direct, atol=1e-12)

    def test_scaler_applied(self):
        tm = _trained()
        tm.scaler = Scaler(np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 2.0]), np.zeros(3, bool))
        fc = predict_trajectory(tm, np.ones((1, 3)), [0], 5)
        z = forward(tm.model, (np.ones((1, 3)) - tm.scaler.mean) / 2.0, [0.0], [1.0]).detach().numpy()
        np.testing.assert_allclose(fc.values, z * 2.0 + tm.scaler.mean, atol=1e-12)


class TestIo:
    def test_round_trip(self, tmp_path):
        tm = _trained(seed=3)
        tm.history = [{"epoch": 1, "train_mse": 0.5, "val_mse": 0.25, "val_mae": 0.4}]
        save_model(tm, tmp_path / "m.bin")
        raw = (tmp_path / "m.bin").read_bytes()
        assert raw.startswith(MAGIC)
        back = load_model(tmp_path / "m.bin")
        assert model_bytes(back) == raw
        assert back.history == tm.history and back.feature_names == tm.feature_names
        a = predict_trajectory(tm, np.ones((1, 3)), [0], 50).values
        b = predict_trajectory(back, np.ones((1, 3)), [0], 50).values
        np.testing.assert_array_equal(a, b)

    def test_shape_validation(self, tmp_path):
        import json
        import struct

        raw = model_bytes(_trained())
        off = len(MAGIC)
        (n,) = struct.unpack("<Q", raw[off : off + 8])
        header = json.loads(raw[off + 8 : off + 8 + n])
        header["config"]["d_ff"] = 32
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        (tmp_path / "bad.bin").write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + raw[off + 8 + n :])
        with pytest.raises(DataError, match="shape"):
            load_model(tmp_path / "bad.bin")

    def test_not_a_model(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"hello")
        with pytest.raises(DataError):
            load_model(tmp_path / "x.bin")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(model_bytes(_trained())[:-8])
        with pytest.raises(DataError):
            load_model(tmp_path / "t.bin")
