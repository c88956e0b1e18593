import math

import cvxpy as cp
import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from sopah.ecm import (
    EcmConfig,
    _shifted_legendre,
    _shifted_legendre_deriv,
    cycle_soc,
    fit_ecm,
    fit_ecm_arrays,
    nnls,
    sample_ecm,
    solve_lsi,
)
from sopah.errors import NoCharge, NoDischarge, NoValidTransition, SolverFailure, Underdetermined
from sopah.features import (
    CAMP,
    FAST_CHARGE,
    FeatureSeries,
    build_feature_series,
    cycle_basic_features,
    cycle_efficiencies,
    feature_class,
    ohmic_resistance,
)
from sopah.ingest import CellHistory, CycleRecord, Step, SyntheticSpec, synthesize_cell


def _step(kind, t, i, v):
    return Step(kind, np.asarray(t, float), np.asarray(i, float), np.asarray(v, float))


def _horner(coeffs, x):
    out = np.zeros_like(np.asarray(x, dtype=float))
    for c in reversed(coeffs):
        out = out * x + c
    return out


class TestSolvers:
    @given(st.integers(0, 10_000))
    def test_nnls_matches_scipy(self, seed):
        r = np.random.default_rng(seed)
        A = r.normal(size=(12, 5))
        b = r.normal(size=12)
        u, _ = nnls(A, b)
        ref, _ = scipy.optimize.nnls(A, b)
        assert np.all(u >= 0)
        assert np.linalg.norm(A @ u - b) == pytest.approx(np.linalg.norm(A @ ref - b), rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_lsi_matches_cvxpy(self, seed):
        r = np.random.default_rng(seed)
        A = r.normal(size=(30, 6))
        b = r.normal(size=30)
        G = r.normal(size=(8, 6))
        h = r.normal(size=8) - 1.0
        res = solve_lsi(A, b, G, h)
        x = cp.Variable(6)
        prob = cp.Problem(cp.Minimize(cp.sum_squares(A @ x - b)), [G @ x >= h])
        prob.solve(solver=cp.CLARABEL)
        assert np.all(G @ res.x >= h - 1e-9)
        ours = np.sum((A @ res.x - b) ** 2)
        assert ours == pytest.approx(prob.value, rel=1e-7)
        np.testing.assert_allclose(res.x, x.value, atol=1e-5)

    def test_lsi_unconstrained_is_lstsq(self):
        r = np.random.default_rng(1)
        A = r.normal(size=(20, 4))
        b = r.normal(size=20)
        res = solve_lsi(A, b, np.eye(4), np.full(4, -1e6))
        np.testing.assert_allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-10)
        assert res.active == ()

    def test_lsi_infeasible(self):
        A = np.eye(2)
        with pytest.raises(SolverFailure):
            solve_lsi(A, np.zeros(2), np.array([[1.0, 0], [-1.0, 0]]), np.array([1.0, 0.0]))


def _ecm_data(seed, n=400, noise=1e-3, bump=0.0):
    r = np.random.default_rng(seed)
    s = r.uniform(0, 1, n)
    i = r.choice([-1.0, -0.5, 0.5, 1.0], n)
    ocv = 3.0 + 0.8 * s - 0.3 * s**2 + bump * np.sin(9 * s)
    res = 0.05 + 0.02 * (s - 0.5) ** 2
    return s, i, ocv + i * res + noise * r.normal(size=n)


class TestEcm:
    @pytest.mark.parametrize("bump", [0.0, 0.08])
    def test_matches_cvxpy_oracle(self, bump):
        s, i, v = _ecm_data(3, bump=bump)
        cfg = EcmConfig()
        fit = fit_ecm_arrays(s, i, v, cfg)
        A = np.hstack([_shifted_legendre(s, cfg.d_ocv), i[:, None] * _shifted_legendre(s, cfg.d_r)])
        # a fine grid stands in for the continuous constraint
        grid = np.linspace(0, 1, 4001)
        x = cp.Variable(A.shape[1])
        cons = [_shifted_legendre_deriv(grid, cfg.d_ocv) @ x[: cfg.d_ocv + 1] >= 0,
                _shifted_legendre(grid, cfg.d_r) @ x[cfg.d_ocv + 1 :] >= 0]
        prob = cp.Problem(cp.Minimize(cp.sum_squares(A @ x - v)), cons)
        prob.solve(solver=cp.CLARABEL)
        pred = fit.ocv(s) + i * fit.resistance(s)
        ours = float(np.sum((v - pred) ** 2))
        assert ours == pytest.approx(prob.value, rel=1e-5)
        assert fit.residual_rms == pytest.approx(math.sqrt(ours / len(s)), rel=1e-9)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000), st.floats(0.0, 0.2))
    def test_dense_monotone_and_nonnegative(self, seed, bump):
        s, i, v = _ecm_data(seed, n=200, noise=5e-3, bump=bump)
        fit = fit_ecm_arrays(s, i, v)
        fine = np.linspace(0, 1, 20001)
        slope = np.polynomial.polynomial.polyval(fine, np.polynomial.polynomial.polyder(fit.ocv_coeffs))
        assert slope.min() >= -1e-8
        assert fit.resistance(fine).min() >= -1e-8

    def test_monomial_coefficients_evaluate_by_horner(self):
        s, i, v = _ecm_data(5)
        fit = fit_ecm_arrays(s, i, v)
        assert len(fit.ocv_coeffs) == 7 and len(fit.r_coeffs) == 5
        grid = np.linspace(0, 1, 11)
        np.testing.assert_allclose(fit.ocv(grid), _horner(fit.ocv_coeffs, grid), atol=1e-12)
        np.testing.assert_allclose(fit.resistance(grid), _horner(fit.r_coeffs, grid), atol=1e-12)

    def test_recovers_clean_model(self):
        s, i, v = _ecm_data(7, noise=0.0)
        fit = fit_ecm_arrays(s, i, v)
        ocv, r = sample_ecm(fit)
        q = np.arange(1, 10) / 10
        np.testing.assert_allclose(ocv, 3.0 + 0.8 * q - 0.3 * q**2, atol=1e-8)
        np.testing.assert_allclose(r, 0.05 + 0.02 * (q - 0.5) ** 2, atol=1e-8)

    def test_single_current_level_is_underdetermined(self):
        s = np.linspace(0, 1, 100)
        with pytest.raises(Underdetermined):
            fit_ecm_arrays(s, -np.ones(100), 3 + s)

    def test_too_few_samples(self):
        with pytest.raises(Underdetermined):
            fit_ecm_arrays([0.1, 0.2], [1, -1], [3, 3])

    def test_synthetic_cycle_fit(self):
        spec = SyntheticSpec(n_cycles=1, ocv_coeffs=(3.2, 1.2, -0.9, 0.5), r0=0.04)
        cell, truth = synthesize_cell(spec)
        fit = fit_ecm(cell.cycles[0])
        q = np.arange(1, 10) / 10
        np.testing.assert_allclose(fit.ocv(q), truth.ocv(q), atol=2e-3)
        soc, cur, volt = cycle_soc(cell.cycles[0], cycle_basic_features(cell.cycles[0]).q_d)
        assert soc.min() == 0.0 and soc.max() == pytest.approx(1.0, abs=1e-9)


def _cycle(with_rest=True, with_charge=True, q_scale=1.0):
    steps = []
    t = 0.0
    if with_rest:
        steps.append(_step("rest", [0, 10], [0, 0], [3.3, 3.3]))
        t = 11.0
    if with_charge:
        steps.append(_step("charge_cc", [t, t + 3600], [1, 1], [3.5, 3.7]))
        t += 3601
        if with_rest:
            steps.append(_step("rest", [t, t + 10], [0, 0], [3.6, 3.6]))
            t += 11
    steps.append(_step("discharge_cc", [t, t + 3600 * q_scale], [-1, -1], [3.5, 3.3]))
    t += 3600 * q_scale + 1
    if with_rest:
        steps.append(_step("rest", [t, t + 10], [0, 0], [3.4, 3.4]))
    return CycleRecord(0, tuple(steps))


class TestBasicFeatures:
    def test_mirror_cycle_is_100_percent(self):
        b = cycle_basic_features(_cycle())
        assert b.q_d == pytest.approx(1.0)
        assert b.q_eff == pytest.approx(100.0)
        assert b.e_d == pytest.approx(3.4)
        assert b.v_avg == pytest.approx(3.4)
        assert b.e_eff == pytest.approx(100 * 3.4 / 3.6)

    def test_no_charge(self):
        c = _cycle(with_charge=False)
        assert math.isnan(cycle_basic_features(c).q_eff)
        with pytest.raises(NoCharge):
            cycle_efficiencies(c)

    def test_no_discharge(self):
        c = CycleRecord(0, (_step("charge_cc", [0, 10], [1, 1], [3.5, 3.6]),))
        with pytest.raises(NoDischarge):
            cycle_basic_features(c)

    def test_ohmic_min_of_transitions(self):
        # rest->charge dV 0.2/1, charge->rest 0.1/1, rest->discharge 0.1/1, discharge->rest 0.1/1
        assert ohmic_resistance(_cycle(), 0.05) == pytest.approx(0.1)

    def test_ohmic_needs_rest(self):
        with pytest.raises(NoValidTransition):
            ohmic_resistance(_cycle(with_rest=False), 0.05)

    def test_classes(self):
        assert feature_class("Q_eff") == "efficiency"
        assert feature_class("R_50") == "resistance"
        assert feature_class("R_ohmic") == "resistance"
        assert feature_class("OCV_50") == "capacity_energy"
        assert feature_class("V_avg") == "capacity_energy"


class TestSeries:
    def test_camp_shape(self):
        cell, _ = synthesize_cell(SyntheticSpec(n_cycles=10, fade_rate=1e-3, r0=0.05, samples_per_step=12))
        fs = build_feature_series(cell, "camp")
        assert fs.values.shape == (10, 5)
        assert fs.valid.all()
        assert fs.schema.feature_names == ("Q_d", "E_d", "Q_eff", "E_eff", "R_ohmic")
        np.testing.assert_allclose(fs.column("Q_d"), 1 - 1e-3 * np.arange(10), atol=1e-12)
        np.testing.assert_allclose(fs.column("Q_eff"), 100.0, atol=1e-9)

    def test_fast_charge_columns(self):
        names = FAST_CHARGE.feature_names
        assert len(names) == 23
        assert names[:5] == ("Q_d", "E_d", "V_avg", "Q_eff", "E_eff")
        assert names[5:14] == tuple(f"OCV_{k}" for k in range(10, 100, 10))
        assert names[14:] == tuple(f"R_{k}" for k in range(10, 100, 10))
        cell, _ = synthesize_cell(SyntheticSpec(n_cycles=2, ocv_coeffs=(3.2, 1.2, -0.9, 0.5), r0=0.04,
                                                samples_per_step=16))
        fs = build_feature_series(cell, FAST_CHARGE)
        assert fs.values.shape == (2, 23) and fs.valid.all()

    def test_missing_rests_mask_ohmic(self):
        cell = CellHistory("c", "x", 1.0, tuple(
            CycleRecord(k, _cycle(with_rest=False).steps) for k in range(3)))
        fs = build_feature_series(cell, CAMP)
        assert np.isnan(fs.column("R_ohmic")).all()
        assert not fs.valid[:, CAMP.index("R_ohmic")].any()
        assert fs.valid[:, CAMP.index("Q_d")].all()
        assert fs.failures["ohmic"] == 3

    def test_out_of_range_masked(self):
        cell = CellHistory("c", "x", 1.0, (CycleRecord(0, _cycle(q_scale=2.0).steps),))
        fs = build_feature_series(cell, CAMP)
        # 200 % coulombic efficiency is implausible
        assert np.isnan(fs.column("Q_eff")[0])
        assert fs.failures["out_of_range"] >= 1

    def test_csv_round_trip(self, tmp_path):
        cell, _ = synthesize_cell(SyntheticSpec(n_cycles=4, r0=0.05, samples_per_step=12))
        fs = build_feature_series(cell, CAMP)
        fs.to_csv(tmp_path / "c.csv")
        back = FeatureSeries.from_csv(tmp_path / "c.csv")
        np.testing.assert_array_equal(back.values, fs.values)
        np.testing.assert_array_equal(back.cycle_indices, fs.cycle_indices)
        assert back.schema == fs.schema
