"""Constant versus linear trend: closed-form Bayes factor under a g-prior.

Both models share a flat prior on the intercept and ``p(sigma^2) ~
1/sigma^2``.  The slope of the linear model gets Zellner's prior
``b | sigma^2 ~ N(0, g sigma^2 / Sxx)`` with ``g = n``.  The shared improper
constant cancels in the ratio; the reported log marginal likelihoods use the
normalisation ``Gamma((n-1)/2) / (pi^((n-1)/2) sqrt(n))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

from ..errors import DegenerateX, TooFewPoints


@dataclass(frozen=True)
class BayesComparison:
    bf_const_over_linear: float
    log_ml_const: float
    log_ml_linear: float
    n: int
    g: float


def _prep(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise TooFewPoints("x and y must be 1-d and of equal length")
    n = len(x)
    if n < 3:
        raise TooFewPoints(f"need at least 3 points, got {n}")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-300 * max(1.0, float(x @ x)) or np.all(x == x[0]):
        raise DegenerateX("x values are all equal")
    yc = y - y.mean()
    sst = float(yc @ yc)
    return n, xc, yc, sxx, sst


def bayes_factor_const_vs_linear(x, y, g: float | None = None) -> BayesComparison:
    n, xc, yc, sxx, sst = _prep(x, y)
    g = float(n) if g is None else float(g)
    base = gammaln((n - 1) / 2) - (n - 1) / 2 * math.log(math.pi) - 0.5 * math.log(n)
    if sst == 0.0:
        # a perfectly flat series: both likelihoods diverge, the ratio does not
        r2 = 0.0
        log_sst = 0.0
    else:
        r2 = float((xc @ yc) ** 2 / (sxx * sst))
        log_sst = math.log(sst)
    log0 = base - (n - 1) / 2 * log_sst
    log1 = log0 + (n - 2) / 2 * math.log1p(g) - (n - 1) / 2 * math.log1p(g * (1.0 - r2))
    return BayesComparison(math.exp(log0 - log1), log0, log1, n, g)


def linear_posterior_band(x, y, grid, level: float = 0.95, g: float | None = None):
    """Posterior mean and central credible band of the linear model's line
    at ``grid`` (Student-t with ``n - 1`` degrees of freedom)."""
    n, xc, yc, sxx, sst = _prep(x, y)
    g = float(n) if g is None else float(g)
    s = g / (1.0 + g)
    x = np.asarray(x, dtype=float)
    b_ols = float(xc @ yc) / sxx
    ssr = s * b_ols**2 * sxx
    resid = max(sst - ssr, 0.0)
    grid = np.asarray(grid, dtype=float)
    mean = float(np.mean(y)) + s * b_ols * (grid - x.mean())
    scale = np.sqrt(resid / (n - 1) * (1.0 / n + s * (grid - x.mean()) ** 2 / sxx))
    q = stats.t.ppf(0.5 + level / 2, n - 1)
    return mean, mean - q * scale, mean + q * scale
