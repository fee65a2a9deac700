"""Evaluation statistics: z-scores, random-intercept LMM (REML), BH-FDR,
rank correlation, balanced accuracy, MAE and the Friedman test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy import stats as sps

from .records import VALENCES

REFERENCE_LEVEL = "neutral"
CONTRASTS = ("negative", "positive")
COEF_NAMES = ("intercept", "negative_vs_neutral", "positive_vs_neutral")
THETA_XTOL = 1e-8
MAX_ITER = 200


class DegenerateInputError(ValueError):
    pass


class SingularDesignError(ValueError):
    pass


def zstandardize(values) -> np.ndarray:
    """(x - mean) / sd with the sample (n-1) standard deviation."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise DegenerateInputError("need at least two values to standardize")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DegenerateInputError("standard deviation is zero")
    return (x - x.mean()) / sd


# -- random-intercept linear mixed model -------------------------------------------

@dataclass(frozen=True)
class LmmFit:
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    sigma_u2: float
    sigma_e2: float
    theta: float
    converged: bool
    reml_loglik: float
    n_obs: int
    n_groups: int
    iterations: int = 0
    names: tuple = COEF_NAMES

    @property
    def icc_p(self) -> float:
        return self.sigma_u2 / (self.sigma_u2 + self.sigma_e2)

    def coef(self, name):
        i = self.names.index(name)
        return self.beta[i], self.se[i], self.t[i], self.p[i]


class RandomInterceptREML:
    """Profiled REML criterion for ``y = X b + u_group + e``.

    With ``theta = sigma_u2 / sigma_e2`` the marginal covariance is
    ``sigma_e2 * (I + theta Z Z')``. Its inverse is block-diagonal with
    closed-form blocks, so every quantity below reduces to per-group sums
    and one evaluation costs O(groups).
    """

    def __init__(self, y, X, group):
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        _, codes = np.unique(np.asarray(group), return_inverse=True)
        self.n_obs, self.p = X.shape
        self.n_i = np.bincount(codes).astype(np.float64)
        self.n_groups = self.n_i.size
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.Sx = np.zeros((self.n_groups, self.p))
        np.add.at(self.Sx, codes, X)
        self.Sy = np.bincount(codes, weights=y, minlength=self.n_groups)
        if np.linalg.matrix_rank(self.XtX) < self.p:
            raise SingularDesignError("fixed-effect design matrix is rank deficient")
        if self.n_obs <= self.p:
            raise SingularDesignError("not enough observations for the fixed effects")

    def _parts(self, theta):
        w = theta / (1.0 + theta * self.n_i)
        XHX = self.XtX - (self.Sx * w[:, None]).T @ self.Sx
        XHy = self.Xty - self.Sx.T @ (w * self.Sy)
        yHy = self.yty - float(w @ (self.Sy * self.Sy))
        beta = np.linalg.solve(XHX, XHy)
        rss = max(yHy - float(beta @ XHy), 1e-300)
        return XHX, beta, rss

    def loglik(self, theta: float) -> float:
        """Profiled restricted log-likelihood at variance ratio ``theta``."""
        XHX, _, rss = self._parts(theta)
        dof = self.n_obs - self.p
        sigma2 = rss / dof
        _, logdet_xhx = np.linalg.slogdet(XHX)
        logdet_h = float(np.sum(np.log1p(theta * self.n_i)))
        return -0.5 * (dof * np.log(2 * np.pi * sigma2) + dof + logdet_h + logdet_xhx)

    def gradient(self, theta: float) -> float:
        """Analytic d(loglik)/d(theta)."""
        XHX, beta, rss = self._parts(theta)
        dw = 1.0 / (1.0 + theta * self.n_i) ** 2
        dXHX = -(self.Sx * dw[:, None]).T @ self.Sx
        dXHy = -self.Sx.T @ (dw * self.Sy)
        dyHy = -float(dw @ (self.Sy * self.Sy))
        drss = dyHy - 2.0 * float(beta @ dXHy) + float(beta @ dXHX @ beta)
        dof = self.n_obs - self.p
        trace = float(np.trace(np.linalg.solve(XHX, dXHX)))
        return -0.5 * (dof * drss / rss + float(np.sum(self.n_i / (1.0 + theta * self.n_i))) + trace)

    def fit_at(self, theta: float):
        XHX, beta, rss = self._parts(theta)
        sigma_e2 = rss / (self.n_obs - self.p)
        cov = sigma_e2 * np.linalg.inv(XHX)
        return beta, np.sqrt(np.diag(cov)), sigma_e2

    def optimize(self, xtol=THETA_XTOL, maxiter=MAX_ITER):
        """Bounded scalar search for the REML-optimal theta.

        Returns ``(theta, converged, iterations)``. The upper bracket is
        widened tenfold while the optimum sits on it.
        """
        hi = 10.0
        used = 0
        converged = False
        theta = 0.0
        while True:
            res = optimize.minimize_scalar(
                lambda th: -self.loglik(th), bounds=(0.0, hi), method="bounded",
                options={"xatol": xtol, "maxiter": maxiter - used},
            )
            used += int(res.nfev)
            theta, converged = float(res.x), bool(res.success)
            if theta < hi * 0.999 or hi >= 1e6 or used >= maxiter:
                break
            hi *= 10.0
        # the bounded search never lands exactly on the lower bound
        if self.loglik(0.0) >= self.loglik(theta):
            return 0.0, converged, used
        return self._polish(theta), converged, used

    def _polish(self, theta):
        # bounded Brent stops at ~sqrt(eps) relative accuracy; finish on the
        # gradient root when it can be bracketed next to the Brent estimate
        step = max(1e-6, 1e-4 * theta)
        lo, hi = max(theta - step, 0.0), theta + step
        g_lo, g_hi = self.gradient(lo), self.gradient(hi)
        if lo > 0 and g_lo > 0 > g_hi:
            return float(optimize.brentq(self.gradient, lo, hi, xtol=1e-14, rtol=1e-15))
        return theta


def condition_design(condition, reference=REFERENCE_LEVEL, contrasts=CONTRASTS) -> np.ndarray:
    cond = np.asarray(condition)
    unknown = set(np.unique(cond)) - set(VALENCES)
    if unknown:
        raise ValueError(f"unknown condition level(s) {sorted(unknown)}")
    cols = [np.ones(cond.size)] + [(cond == c).astype(np.float64) for c in contrasts]
    return np.column_stack(cols)


def fit_random_intercept(y, condition, group, theta: float | None = None) -> LmmFit:
    """REML fit of ``y ~ condition + (1 | group)`` with neutral as reference.

    Coefficients are (intercept, negative - neutral, positive - neutral).
    Pass ``theta`` to skip the search and evaluate at a fixed variance
    ratio (``theta=0`` reproduces ordinary least squares).
    """
    y = np.asarray(y, dtype=np.float64)
    group = np.asarray(group)
    if np.unique(group).size < 2:
        raise DegenerateInputError("need at least two groups")
    model = RandomInterceptREML(y, condition_design(condition), group)
    if theta is None:
        theta, converged, iters = model.optimize()
    else:
        converged, iters = True, 0
    beta, se, sigma_e2 = model.fit_at(theta)
    t = beta / se
    p = 2.0 * sps.norm.sf(np.abs(t))
    return LmmFit(
        beta=beta, se=se, t=t, p=p, sigma_u2=theta * sigma_e2, sigma_e2=sigma_e2, theta=theta,
        converged=converged, reml_loglik=model.loglik(theta),
        n_obs=model.n_obs, n_groups=model.n_groups, iterations=iters,
    )


# -- multiple testing ---------------------------------------------------------------

@dataclass(frozen=True)
class PValueSet:
    labels: tuple
    raw: np.ndarray
    adjusted: np.ndarray


def bh_adjust(pvalues) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ranks = np.arange(1, m + 1, dtype=np.float64)
    # m / rank is exactly 1 at the top rank, so adjusted >= raw survives rounding
    stepped = p[order] * (m / ranks)
    stepped = np.minimum.accumulate(stepped[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(stepped, 1.0)
    return out


def bh_set(labels, pvalues=None) -> PValueSet:
    """Label and adjust a family of p-values.

    Passing an existing ``PValueSet`` re-adjusts it from its raw values, so
    ``bh_set(bh_set(...))`` is a fixed point. Feeding adjusted values back
    into ``bh_adjust`` is not: BH is not idempotent on its own output.
    """
    if isinstance(labels, PValueSet):
        labels, pvalues = labels.labels, labels.raw
    raw = np.asarray(pvalues, dtype=np.float64)
    if raw.shape != (len(labels),):
        raise ValueError("need one label per p-value")
    return PValueSet(tuple(labels), raw, bh_adjust(raw))


# -- prediction metrics -----------------------------------------------------------------

def spearman_rho(a, b) -> float:
    ra = sps.rankdata(a)
    rb = sps.rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(float(ra @ ra)) * np.sqrt(float(rb @ rb))
    if denom == 0:
        return float("nan")
    return float(np.clip(float(ra @ rb) / denom, -1.0, 1.0))


def balanced_accuracy(truth, pred) -> float:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    recalls = [np.mean(pred[truth == c] == c) for c in np.unique(truth)]
    return float(np.mean(recalls))


def mae(truth, pred) -> float:
    return float(np.mean(np.abs(np.asarray(truth, dtype=np.float64) - np.asarray(pred, dtype=np.float64))))


# -- Friedman -------------------------------------------------------------------------------

def friedman_test(matrix) -> tuple[float, float]:
    """Tie-corrected Friedman chi-square over ``n`` blocks (rows) and ``k`` treatments."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise DegenerateInputError("need at least 2 blocks and 2 treatments")
    n, k = x.shape
    ranks = sps.rankdata(x, axis=1)
    rsum = ranks.sum(axis=0)
    ties = 0.0
    for row in x:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * k * (k * k - 1))
    if correction <= 0:
        return 0.0, 1.0
    stat = ((12.0 * float(rsum @ rsum)) / (n * k * (k + 1)) - 3.0 * n * (k + 1)) / correction
    stat = max(stat, 0.0)
    return stat, float(sps.chi2.sf(stat, k - 1))
