"""Equivalent-circuit fit ``V = OCV(s) + I*R(s)`` with a monotone OCV.

The fit is a linear least-squares problem in the polynomial coefficients
with linear inequality constraints (OCV' >= 0 and R >= 0 on a uniform SOC
grid), solved exactly through the least-distance / NNLS reduction of
Lawson and Hanson.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as L
from numpy.polynomial import polynomial as P
from scipy.linalg import solve_triangular

from .errors import SolverFailure, Underdetermined
from .ingest import CycleRecord

SAMPLE_SOCS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class EcmConfig:
    d_ocv: int = 6
    d_r: int = 4
    n_grid: int = 101
    delta_i_floor: float = 0.05
    kkt_tol: float = 1e-10
    max_iter: int = 500
    dense_tol: float = 1e-12
    max_refine: int = 10


@dataclass(frozen=True)
class EcmFit:
    ocv_coeffs: tuple[float, ...]  # ascending powers of SOC, volts
    r_coeffs: tuple[float, ...]  # ascending powers of SOC, ohms
    residual_rms: float
    iterations: int = 0
    kkt_residual: float = 0.0

    def ocv(self, soc):
        return P.polyval(np.asarray(soc, dtype=float), self.ocv_coeffs)

    def resistance(self, soc):
        return P.polyval(np.asarray(soc, dtype=float), self.r_coeffs)


@dataclass(frozen=True)
class LsiResult:
    x: np.ndarray
    iterations: int
    kkt_residual: float
    active: tuple[int, ...]


def nnls(A, b, *, max_iter: int = 500) -> tuple[np.ndarray, int]:
    """Lawson-Hanson non-negative least squares: min ||A u - b||, u >= 0."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    u = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    tol = 10 * np.finfo(float).eps * np.linalg.norm(A, 1) * max(m, n)
    w = A.T @ b
    it = 0
    while np.any(~passive & (w > tol)):
        it += 1
        if it > max_iter:
            raise SolverFailure("NNLS iteration limit reached", max_iter)
        j = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[j] = True
        while True:
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if np.all(z[passive] > 0):
                break
            neg = passive & (z <= 0)
            alpha = np.min(u[neg] / (u[neg] - z[neg]))
            u = u + alpha * (z - u)
            passive &= u > tol
            u[~passive] = 0.0
        u = z
        w = A.T @ (b - A @ u)
    return u, it


def solve_lsi(A, b, G, h, *, tol: float = 1e-10, max_iter: int = 500) -> LsiResult:
    """Minimise ``||A x - b||^2`` subject to ``G x >= h``.

    ``A`` must have full column rank.  With ``A = QR`` and ``y = R x`` the
    problem becomes a least-distance program in ``z = y - Q^T b``, whose
    dual is a non-negative least-squares problem.  Raises
    :class:`SolverFailure` when the constraints are infeasible or the
    iteration budget runs out.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    Q, R = np.linalg.qr(A)
    d = Q.T @ b
    Gy = solve_triangular(R, G.T, trans="T").T
    gnorm = np.linalg.norm(Gy, axis=1)
    gnorm[gnorm == 0] = 1.0
    Gy = Gy / gnorm[:, None]
    h = h / gnorm
    f = h - Gy @ d
    n = len(d)
    E = np.vstack([Gy.T, f[None, :]])
    e = np.zeros(n + 1)
    e[-1] = 1.0
    u, it = nnls(E, e, max_iter=max_iter)
    r = E @ u - e
    if abs(r[-1]) <= np.finfo(float).eps * 1e3:
        raise SolverFailure("inequality constraints are infeasible", it)
    z = -r[:n] / r[-1]
    active = np.flatnonzero(u > 0)
    if len(active):
        lam = np.linalg.lstsq(Gy[active].T, z, rcond=None)[0]
    else:
        lam = np.zeros(0)
    y = d + z
    kkt = _kkt(z, Gy, f, active, lam, scale=1.0 + np.linalg.norm(d))
    if kkt > tol:
        raise SolverFailure(f"KKT residual {kkt:.2e} above tolerance", it)
    return LsiResult(solve_triangular(R, y), it, kkt, tuple(int(i) for i in active))


def _kkt(z, Gy, f, active, lam, scale) -> float:
    stat = np.linalg.norm(z - Gy[active].T @ lam) if len(active) else np.linalg.norm(z)
    primal = max(0.0, float(-(Gy @ z - f).min())) if len(f) else 0.0
    dual = max(0.0, float(-lam.min())) if len(lam) else 0.0
    comp = float(np.max(np.abs(lam * (Gy[active] @ z - f[active])))) if len(active) else 0.0
    return max(stat, primal, dual, comp) / scale


# ---------------------------------------------------------------------------


def _shifted_legendre(s, degree):
    """Vandermonde of shifted Legendre polynomials on [0, 1]."""
    return L.legvander(2.0 * np.asarray(s, dtype=float) - 1.0, degree)


def _shifted_legendre_deriv(s, degree):
    x = 2.0 * np.asarray(s, dtype=float) - 1.0
    out = np.empty((len(x), degree + 1))
    for k in range(degree + 1):
        c = np.zeros(degree + 1)
        c[k] = 1.0
        out[:, k] = 2.0 * L.legval(x, L.legder(c)) if k else 0.0
    return out


def _legendre_to_monomial(c) -> np.ndarray:
    """Ascending monomial coefficients in s of sum c_k P_k(2s - 1)."""
    # coefficients in x = 2s - 1, then substitute
    in_x = L.leg2poly(c)
    out = np.zeros(len(in_x))
    lin = np.array([-1.0, 2.0])
    term = np.array([1.0])
    for k, a in enumerate(in_x):
        if k:
            term = P.polymul(term, lin)
        out[: len(term)] += a * term
    return out


def cycle_soc(cycle: CycleRecord, q_d_ah: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SOC trajectory of every sample in ``cycle`` plus its current and voltage.

    Charge accumulates by the trapezoid rule inside each step and across
    boundaries between loaded steps of the same direction; across rest or
    sign changes no charge is credited.  SOC is the cumulative charge above
    the fully discharged (minimum-charge) point divided by ``q_d_ah``.
    """
    qs, cur, volt = [], [], []
    q = 0.0
    prev = None
    for step in cycle.steps:
        t, i = step.time, step.current
        if prev is not None and not prev.is_rest and not step.is_rest and prev.is_charge == step.is_charge:
            q += 0.5 * (prev.current[-1] + i[0]) * (t[0] - prev.time[-1])
        inc = np.concatenate([[0.0], np.cumsum(0.5 * (i[1:] + i[:-1]) * np.diff(t))])
        qs.append(q + inc)
        q = q + inc[-1]
        cur.append(i)
        volt.append(step.voltage)
        prev = step
    qs = np.concatenate(qs)
    soc = np.clip((qs - qs.min()) / (q_d_ah * 3600.0), 0.0, 1.0)
    return soc, np.concatenate(cur), np.concatenate(volt)


def _current_spread(current, floor) -> float:
    loaded = current[np.abs(current) > floor]
    return float(np.ptp(loaded)) if len(loaded) else 0.0


def _interior_minima(c) -> np.ndarray:
    """Locations in [0, 1] of the minima candidates of a shifted-Legendre series."""
    cands = [0.0, 1.0]
    dc = L.legder(c)
    if len(dc) > 1 and np.any(dc != 0):
        roots = L.legroots(dc)
        roots = roots[np.abs(roots.imag) < 1e-12].real if np.iscomplexobj(roots) else roots
        cands.extend((roots[(roots > -1) & (roots < 1)] + 1.0) / 2.0)
    return np.array(cands)


def _violations(x, config: EcmConfig) -> list[tuple[str, float]]:
    out = []
    c_ocv = x[: config.d_ocv + 1]
    c_r = x[config.d_ocv + 1 :]
    slope = 2.0 * L.legder(c_ocv) if config.d_ocv else np.zeros(1)
    scale_o = 1.0 + np.abs(slope).sum()
    for sv_ in _interior_minima(slope):
        if L.legval(2 * sv_ - 1, slope) < -config.dense_tol * scale_o:
            out.append(("ocv", float(sv_)))
    scale_r = 1.0 + np.abs(c_r).sum()
    for sv_ in _interior_minima(c_r):
        if L.legval(2 * sv_ - 1, c_r) < -config.dense_tol * scale_r:
            out.append(("r", float(sv_)))
    return out


def fit_ecm_arrays(soc, current, voltage, config: EcmConfig = EcmConfig()) -> EcmFit:
    """Constrained ECM fit on explicit (SOC, current, voltage) samples."""
    soc = np.asarray(soc, dtype=float)
    current = np.asarray(current, dtype=float)
    voltage = np.asarray(voltage, dtype=float)
    n_coef = config.d_ocv + config.d_r + 2
    if len(soc) < n_coef:
        raise Underdetermined(f"{len(soc)} samples for {n_coef} coefficients")
    # OCV and R separate only if the loaded current takes at least two distinct values
    if _current_spread(current, config.delta_i_floor) <= config.delta_i_floor:
        raise Underdetermined("a single current level cannot separate OCV from R")
    A = np.hstack([
        _shifted_legendre(soc, config.d_ocv),
        current[:, None] * _shifted_legendre(soc, config.d_r),
    ])
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise Underdetermined("design matrix is rank deficient")

    grid = np.linspace(0.0, 1.0, config.n_grid)
    d_ocv = _shifted_legendre_deriv(grid, config.d_ocv)
    r_val = _shifted_legendre(grid, config.d_r)
    G = np.zeros((2 * config.n_grid, n_coef))
    G[: config.n_grid, : config.d_ocv + 1] = d_ocv
    G[config.n_grid :, config.d_ocv + 1 :] = r_val
    h = np.zeros(2 * config.n_grid)

    res = solve_lsi(A, voltage, G, h, tol=config.kkt_tol, max_iter=config.max_iter)
    # exchange step: the grid only constrains sampled points, so add any
    # interior minimum that dips below zero and solve again
    for _ in range(config.max_refine):
        extra = _violations(res.x, config)
        if not extra:
            break
        rows = np.zeros((len(extra), n_coef))
        for k, (block, sv_) in enumerate(extra):
            if block == "ocv":
                rows[k, : config.d_ocv + 1] = _shifted_legendre_deriv([sv_], config.d_ocv)[0]
            else:
                rows[k, config.d_ocv + 1 :] = _shifted_legendre([sv_], config.d_r)[0]
        G = np.vstack([G, rows])
        h = np.zeros(len(G))
        res = solve_lsi(A, voltage, G, h, tol=config.kkt_tol, max_iter=config.max_iter)
    x = res.x
    resid = voltage - A @ x
    return EcmFit(
        ocv_coeffs=tuple(float(c) for c in _legendre_to_monomial(x[: config.d_ocv + 1])),
        r_coeffs=tuple(float(c) for c in _legendre_to_monomial(x[config.d_ocv + 1 :])),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        iterations=res.iterations,
        kkt_residual=res.kkt_residual,
    )


def fit_ecm(cycle: CycleRecord, config: EcmConfig = EcmConfig(), q_d_ah: float | None = None) -> EcmFit:
    """Fit the ECM to every sample of ``cycle``.

    SOC is anchored to the cycle's own discharge capacity unless ``q_d_ah``
    is supplied.
    """
    if q_d_ah is None:
        from .features import cycle_basic_features

        q_d_ah = cycle_basic_features(cycle).q_d
    soc, current, voltage = cycle_soc(cycle, q_d_ah)
    return fit_ecm_arrays(soc, current, voltage, config)


def sample_ecm(fit: EcmFit) -> tuple[np.ndarray, np.ndarray]:
    """OCV and R at 10 %, 20 %, ..., 90 % SOC."""
    s = np.array(SAMPLE_SOCS)
    return fit.ocv(s), fit.resistance(s)
