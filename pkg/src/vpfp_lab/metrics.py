"""Distances and norms between empirical measures and grid densities."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .meanfield import Density1D

ASSIGNMENT_CAP = 2048


def _as_sample(a) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite sample values")
    return a


def _as_cloud(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError("2D samples must have shape (n, 2)")
    if a.shape[0] == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite sample values")
    return a


class _Cdf:
    """Right-limit and left-limit evaluation of a 1D distribution function."""

    def __init__(self, obj):
        if isinstance(obj, Density1D):
            if obj.values.size == 0 or obj.mass() <= 0:
                raise ValueError("empty density")
            self.breaks = obj.edges
            self.right = self.left = obj.cdf
        else:
            s = np.sort(_as_sample(obj))
            n = s.size
            self.breaks = s
            self.right = lambda x: np.searchsorted(s, x, side="right") / n
            self.left = lambda x: np.searchsorted(s, x, side="left") / n


def _abs_linear_integral(d0: np.ndarray, d1: np.ndarray, length: np.ndarray) -> np.ndarray:
    """Integral of |d| over an interval where d goes linearly from d0 to d1."""
    a0, a1 = np.abs(d0), np.abs(d1)
    same = d0 * d1 >= 0
    denom = np.where(same, 1.0, a0 + a1)
    crossing = (d0 * d0 + d1 * d1) / (2.0 * denom)
    return length * np.where(same, 0.5 * (a0 + a1), crossing)


def w1_1d(a, b) -> float:
    """Exact W1 between 1D samples and/or piecewise-constant densities.

    Integrates ``|F_a - F_b|`` over the merged breakpoints; on every
    open interval between breakpoints the difference is linear.
    """
    fa, fb = _Cdf(a), _Cdf(b)
    pts = np.unique(np.concatenate([fa.breaks, fb.breaks]))
    if pts.size < 2:
        return 0.0
    lo, hi = pts[:-1], pts[1:]
    d0 = fa.right(lo) - fb.right(lo)
    d1 = fa.left(hi) - fb.left(hi)
    return float(np.sum(_abs_linear_integral(d0, d1, hi - lo)))


def w1_2d_exact(a, b) -> float:
    """W1 between equal-size clouds in the (x, v) plane with cost ``|dx| + |dv|``."""
    a, b = _as_cloud(a), _as_cloud(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError("exact matching needs equal-size clouds")
    if a.shape[0] > ASSIGNMENT_CAP:
        raise ValueError(f"cloud size {a.shape[0]} exceeds the assignment cap {ASSIGNMENT_CAP}")
    cost = cdist(a, b, metric="cityblock")
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum() / a.shape[0])


def w1_2d_sliced(a, b, n_projections: int, rng: np.random.Generator | None = None,
                 directions: np.ndarray | None = None) -> float:
    """Mean over unit directions of the 1D W1 of projected clouds.

    Each projection is 1-Lipschitz for the ``|dx| + |dv|`` cost, so every
    term (and the mean) is at most the exact value.
    """
    a, b = _as_cloud(a), _as_cloud(b)
    if directions is None:
        if n_projections < 1:
            raise ValueError("need at least one projection")
        rng = rng if rng is not None else np.random.default_rng()
        theta = rng.uniform(0.0, np.pi, n_projections)
        directions = np.column_stack([np.cos(theta), np.sin(theta)])
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    pa, pb = a @ directions.T, b @ directions.T
    return float(np.mean([w1_1d(pa[:, k], pb[:, k]) for k in range(directions.shape[0])]))


def discrete_inf_norm(sample, epsilon: float) -> float:
    """``sup_x #{i: |x_i - x| <= eps} / (2 N eps)`` computed exactly.

    An optimal closed window can be slid right until its left edge hits a
    point, so only windows ``[x_i, x_i + 2 eps]`` need counting.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    y = np.sort(_as_sample(sample))
    counts = np.searchsorted(y, y + 2.0 * epsilon, side="right") - np.searchsorted(y, y, side="left")
    return float(counts.max() / (2.0 * y.size * epsilon))


def coupling_discrepancy(stats) -> float:
    """``(1/N) sum_i (sup_dx_i + sup_dv_i)``."""
    return float(np.mean(np.asarray(stats.sup_dx) + np.asarray(stats.sup_dv)))


def exp_moment(sample, lam: float, log: bool = False) -> float:
    """Empirical ``E exp(lam |value|)``; ``log=True`` returns its logarithm stably."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    z = lam * np.abs(_as_sample(sample))
    out = logsumexp(z) - np.log(z.size)
    return float(out if log else np.exp(out))
