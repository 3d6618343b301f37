"""Fluctuation statistics of i.i.d. mean-field copies and their deviation bounds.

Lambda measures how far the leave-one-out empirical force is from the true
field; Gamma measures the largest discrepancy between the empirical and true
mass of closed windows centred at each sample point. Tail checks pair an
exceedance frequency over replicas with the corresponding exponential bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .kernel import KernelSpec, rank_counts
from .metrics import discrete_inf_norm
from .output import csv_text

# ---------------------------------------------------------------------------
# tail curves


@dataclass
class TailCurve:
    thresholds: np.ndarray
    empirical: np.ndarray
    bound: np.ndarray
    replicas: int
    name: str = ""

    def __post_init__(self):
        self.thresholds = np.atleast_1d(np.asarray(self.thresholds, dtype=float))
        self.empirical = np.atleast_1d(np.asarray(self.empirical, dtype=float))
        self.bound = np.atleast_1d(np.asarray(self.bound, dtype=float))
        if not (self.thresholds.shape == self.empirical.shape == self.bound.shape):
            raise ValueError("thresholds, empirical and bound must have equal length")
        if self.replicas < 1:
            raise ValueError("replica count must be positive")

    @property
    def vacuous(self) -> np.ndarray:
        return self.bound > 1.0

    @property
    def slack(self) -> np.ndarray:
        b = np.clip(self.bound, 0.0, 1.0)
        return 3.0 * np.sqrt(b * (1.0 - b) / self.replicas)

    def holds(self) -> np.ndarray:
        """Pointwise ``empirical <= bound + 3 SE``; vacuous points always hold."""
        return self.vacuous | (self.empirical <= self.bound + self.slack)

    def all_hold(self) -> bool:
        return bool(np.all(self.holds()))

    def rows(self) -> list[tuple]:
        return [(float(a), float(e), float(b), bool(v))
                for a, e, b, v in zip(self.thresholds, self.empirical, self.bound, self.vacuous)]

    def to_csv(self) -> str:
        return csv_text(["threshold", "empirical", "bound", "vacuous"], self.rows())


def exceedance(values: np.ndarray, thresholds) -> np.ndarray:
    """Fraction of ``values`` that are ``>= threshold``, for each threshold."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    th = np.atleast_1d(np.asarray(thresholds, dtype=float))
    return (v.size - np.searchsorted(v, th, side="left")) / v.size


# ---------------------------------------------------------------------------
# Lambda: empirical force fluctuation


def lambda_terms(positions, field: Callable[[np.ndarray], np.ndarray],
                 spec: KernelSpec = KernelSpec()) -> np.ndarray:
    """Per-particle ``|(1/(N-1)) sum_{j != i} K(Y_i - Y_j) - F(Y_i)|``.

    Works along the last axis. The self-term vanishes since K(0) = 0, so the
    full rank sum is rescaled by N - 1.
    """
    y = np.asarray(positions, dtype=float)
    n = y.shape[-1]
    if n < 2:
        raise ValueError("need at least two samples")
    if spec.eta > 0:
        raise ValueError("fluctuation terms use the exact kernel")
    below, above = rank_counts(y)
    emp = spec.sign * (below - above) / (2.0 * (n - 1))
    return np.abs(emp - field(y))


def lambda_fluctuation(positions, field, spec: KernelSpec = KernelSpec()):
    """Mean over particles of ``lambda_terms`` (one value per ensemble)."""
    out = lambda_terms(positions, field, spec).mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def lambda_deviation_bound(n: int, alpha) -> np.ndarray:
    """``2 N exp(-2 alpha^2 (N - 1))``."""
    alpha = np.asarray(alpha, dtype=float)
    return 2.0 * n * np.exp(-2.0 * alpha**2 * (n - 1))


def lambda_deviation_check(samples, field, alphas, spec: KernelSpec = KernelSpec()) -> TailCurve:
    """Exceedance of ``Lambda >= alpha`` over replicas (rows of ``samples``)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    vals = lambda_fluctuation(samples, field, spec)
    n = samples.shape[-1]
    return TailCurve(alphas, exceedance(vals, alphas), lambda_deviation_bound(n, alphas),
                     samples.shape[0], "lambda_deviation")


# ---------------------------------------------------------------------------
# Gamma: window-mass fluctuation


def gamma_terms(positions, cdf: Callable, cdf_left: Callable | None = None) -> np.ndarray:
    """Per-sample ``sup_{u >= 0} |rho_hat^i([Y_i - u, Y_i + u]) - rho([Y_i - u, Y_i + u])|``.

    ``rho_hat^i`` is the empirical measure of the other N - 1 points. ``cdf``
    is the right-continuous distribution function of rho; pass ``cdf_left``
    (``P(Y < x)``) when rho has atoms. Both functions must be vectorised.

    The empirical window mass is a step function of u with jumps at the
    distances to the other points, and the true mass is non-decreasing, so
    the sup is attained at a jump, either at the jump or just before it.
    """
    y = np.asarray(positions, dtype=float).ravel()
    n = y.size
    if n < 2:
        raise ValueError("need at least two samples")
    cdf_left = cdf if cdf_left is None else cdf_left
    d = np.abs(y[:, None] - y[None, :])
    d = d[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    d.sort(axis=1)
    m = n - 1
    k = np.arange(m)[None, :]
    yc = y[:, None]

    # tie blocks in each sorted row
    first = np.ones_like(d, dtype=bool)
    first[:, 1:] = d[:, 1:] != d[:, :-1]
    last = np.ones_like(d, dtype=bool)
    last[:, :-1] = first[:, 1:]

    g_closed = cdf(yc + d) - cdf_left(yc - d)
    at_jump = np.abs((k + 1) / m - g_closed)
    best = np.max(np.where(last, at_jump, 0.0), axis=1)

    g_open = cdf_left(yc + d) - cdf(yc - d)
    before = np.abs(k / m - g_open)
    before_ok = first & (d > 0)
    best = np.maximum(best, np.max(np.where(before_ok, before, 0.0), axis=1))
    return best


def gamma_fluctuation(positions, cdf, cdf_left=None) -> float:
    """``(2/N) sum_i`` of ``gamma_terms``."""
    g = gamma_terms(positions, cdf, cdf_left)
    return float(2.0 * g.mean())


# ---------------------------------------------------------------------------
# binomial deviation


def _binomial_exceeds(x, n: int, p: float, alpha: float):
    # |X - np| >= n alpha, with a relative guard against 200 * 0.3 != 60 style rounding
    return np.abs(x - n * p) >= n * alpha * (1.0 - 1e-12)


def binomial_tail_bound(n: int, alpha: float) -> float:
    return float(2.0 * np.exp(-2.0 * alpha * alpha * n))


def binomial_tail_exact(n: int, p: float, alpha: float) -> float:
    """Exact ``P(|X - np| >= n alpha)`` for X ~ Binomial(n, p)."""
    k = np.arange(n + 1)
    return float(stats.binom.pmf(k, n, p)[_binomial_exceeds(k, n, p, alpha)].sum())


def binomial_tail_check(n: int, p: float, alpha: float, replicas: int,
                        rng: np.random.Generator) -> TailCurve:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x = rng.binomial(n, p, size=replicas)
    emp = float(np.mean(_binomial_exceeds(x, n, p, alpha)))
    return TailCurve([alpha], [emp], [binomial_tail_bound(n, alpha)], replicas, "binomial")


# ---------------------------------------------------------------------------
# discrete infinity norm of the copies, sup over time


def infnorm_deviation_bound(n: int, t: float, epsilon: float, gamma, kappa: float, lam: float,
                            c_lambda: float, moment_xv: float) -> np.ndarray:
    """``C (1 + t (2 kappa + gamma)/lam (c_lam + sqrt(N) eps gamma)) N^{3/2} exp(-2N (eps gamma)^2)``

    with ``C = 10 + kappa^2/lam + exp(lam (1/2 + lam) t) E exp(lam(|Y0| + |W0|))``.
    """
    gamma = np.asarray(gamma, dtype=float)
    c = 10.0 + kappa**2 / lam + np.exp(lam * (0.5 + lam) * t) * moment_xv
    eg = epsilon * gamma
    return c * (1.0 + t * (2.0 * kappa + gamma) / lam * (c_lambda + np.sqrt(n) * eg)) \
        * n**1.5 * np.exp(-2.0 * n * eg**2)


def sup_infnorm_statistic(snapshots, epsilon: float) -> float:
    """``max`` over stored snapshots (rows) of the discrete infinity norm."""
    snaps = np.atleast_2d(np.asarray(snapshots, dtype=float))
    if snaps.shape[0] == 0:
        raise ValueError("no stored snapshots")
    return max(discrete_inf_norm(row, epsilon) for row in snaps)


def sup_infnorm_deviation(paths, epsilon: float, gammas, kappa: float, lam: float, t: float,
                          c_lambda: float, moment_xv: float) -> TailCurve:
    """Exceedance of ``sup_s ||rho^N_s||_{inf,eps} >= kappa + gamma`` over replicas.

    ``paths`` has shape (replicas, snapshots, N).
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim != 3 or paths.shape[1] == 0:
        raise ValueError("paths must have shape (replicas, snapshots, N) with snapshots >= 1")
    stat = np.array([sup_infnorm_statistic(p, epsilon) for p in paths])
    gammas = np.atleast_1d(np.asarray(gammas, dtype=float))
    n = paths.shape[2]
    bound = infnorm_deviation_bound(n, t, epsilon, gammas, kappa, lam, c_lambda, moment_xv)
    return TailCurve(gammas, exceedance(stat, kappa + gammas), bound, paths.shape[0],
                     "sup_infnorm")


# ---------------------------------------------------------------------------
# position increments


def c_lambda(lam: float, log_exp_moment_w0: float) -> float:
    """``5/2 + (1/lam) ln E exp(lam |W0|)`` from the log of the moment."""
    return 2.5 + log_exp_moment_w0 / lam


def increment_bound(beta, lam: float) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    return np.exp(-0.5 * beta * np.minimum(beta, lam))


def increment_deviation_check(paths, times, s: float, t: float, lam: float, betas,
                              c_lam: float) -> TailCurve:
    """Exceedance of ``sup_{s<=u<=t} |Y_u - Y_s| >= (t - s)(c_lam + beta)``.

    ``paths`` has shape (replicas, len(times)); the window must satisfy
    ``t - s <= min(1/16, lam^-2)``.
    """
    if not 0 <= s < t:
        raise ValueError("need 0 <= s < t")
    if t - s > min(1.0 / 16.0, lam**-2) * (1 + 1e-12):
        raise ValueError("increment window longer than min(1/16, lambda^-2)")
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    times = np.asarray(times, dtype=float)
    tol = 1e-9 * max(1.0, t)
    idx = np.flatnonzero((times >= s - tol) & (times <= t + tol))
    if idx.size == 0 or abs(times[idx[0]] - s) > tol:
        raise ValueError("time s is not a stored time")
    window = paths[:, idx]
    stat = np.max(np.abs(window - window[:, :1]), axis=1)
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    thr = (t - s) * (c_lam + betas)
    return TailCurve(thr, exceedance(stat, thr), increment_bound(betas, lam), paths.shape[0],
                     "increment")
