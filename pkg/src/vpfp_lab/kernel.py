"""Sign interaction kernel K(x) = +-1/2 sgn(x), its mollification, and mean forces.

The mollifier is the quartic bump ``chi(y) = 15/16 (1 - y^2)^2`` on [-1, 1].
Its CDF is a polynomial, so ``K * chi_eta`` has a closed form and no
quadrature is needed at runtime.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Interaction(str, enum.Enum):
    REPULSIVE = "repulsive"
    ATTRACTIVE = "attractive"
    # control runs only: no interaction at all
    FREE = "free"

    @property
    def sign(self) -> int:
        return {"repulsive": 1, "attractive": -1, "free": 0}[self.value]


@dataclass(frozen=True)
class KernelSpec:
    interaction: Interaction = Interaction.REPULSIVE
    eta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "interaction", Interaction(self.interaction))
        if not np.isfinite(self.eta) or self.eta < 0:
            raise ValueError(f"eta must be finite and >= 0, got {self.eta}")

    @property
    def sign(self) -> int:
        return self.interaction.sign


def bump(y):
    """Quartic mollifier density on [-1, 1] (unit mass)."""
    y = np.asarray(y, dtype=float)
    return np.where(np.abs(y) <= 1.0, 15.0 / 16.0 * (1.0 - y * y) ** 2, 0.0)


def _bump_half_mass(y):
    # odd part P(Y <= y) - 1/2, saturated exactly at +-1/2 outside (-1, 1)
    y = np.asarray(y, dtype=float)
    c = np.clip(y, -1.0, 1.0)
    poly = 15.0 / 16.0 * (c - 2.0 * c**3 / 3.0 + c**5 / 5.0)
    return np.where(np.abs(y) >= 1.0, 0.5 * np.sign(y), np.clip(poly, -0.5, 0.5))


def bump_cdf(y):
    return 0.5 + _bump_half_mass(y)


def sample_bump(rng: np.random.Generator, size) -> np.ndarray:
    # (1 - y^2)^2 on [-1, 1] is the Beta(3, 3) law mapped from [0, 1]
    return 2.0 * rng.beta(3.0, 3.0, size=size) - 1.0


def k_eval(spec: KernelSpec, x):
    """Exact kernel ``sign * sgn(x) / 2`` with ``sgn(0) = 0``."""
    return 0.5 * spec.sign * np.sign(np.asarray(x, dtype=float))


def k_eta_eval(spec: KernelSpec, x):
    """Mollified kernel ``(K * chi_eta)(x)``; agrees with K for ``|x| > eta``."""
    if spec.eta <= 0:
        raise ValueError("k_eta_eval needs eta > 0; use k_eval for the exact kernel")
    u = np.asarray(x, dtype=float) / spec.eta
    # K * chi_eta = sign/2 * (P(Y < x) - P(Y > x)) for Y ~ chi_eta
    return spec.sign * _bump_half_mass(u)


def kernel_eval(spec: KernelSpec, x):
    return k_eta_eval(spec, x) if spec.eta > 0 else k_eval(spec, x)


def rank_counts(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Strict counts ``below_i = #{j: x_j < x_i}`` and ``above_i = #{j: x_j > x_i}``.

    Works along the last axis so a batch of ensembles can be handled at once.
    Tied values share the counts of their block.
    """
    x = np.asarray(positions, dtype=float)
    n = x.shape[-1]
    order = np.argsort(x, axis=-1, kind="stable")
    xs = np.take_along_axis(x, order, axis=-1)
    idx = np.broadcast_to(np.arange(n), xs.shape)

    new_block = np.ones(xs.shape, dtype=bool)
    new_block[..., 1:] = xs[..., 1:] != xs[..., :-1]
    first = np.maximum.accumulate(np.where(new_block, idx, 0), axis=-1)

    end_block = np.ones(xs.shape, dtype=bool)
    end_block[..., :-1] = new_block[..., 1:]
    # last index of each block, propagated right-to-left
    last = np.where(end_block, idx, n)
    last = np.minimum.accumulate(last[..., ::-1], axis=-1)[..., ::-1]

    below = np.empty(x.shape, dtype=np.int64)
    above = np.empty(x.shape, dtype=np.int64)
    np.put_along_axis(below, order, first, axis=-1)
    np.put_along_axis(above, order, n - 1 - last, axis=-1)
    return below, above


def mean_force_ranks(spec: KernelSpec, positions, out: np.ndarray | None = None) -> np.ndarray:
    """``(1/N) sum_j K(x_i - x_j)`` for the exact kernel in O(N log N)."""
    x = np.asarray(positions, dtype=float)
    if x.shape[-1] == 0:
        raise ValueError("empty position array")
    if spec.eta > 0:
        raise ValueError("rank shortcut only applies to the exact kernel (eta = 0)")
    n = x.shape[-1]
    below, above = rank_counts(x)
    if out is None:
        out = np.empty(x.shape, dtype=float)
    np.divide(spec.sign * (below - above), 2.0 * n, out=out)
    return out


def mean_force_brute(spec: KernelSpec, positions, out: np.ndarray | None = None) -> np.ndarray:
    """O(N^2) double sum; works for both the exact and the mollified kernel."""
    x = np.asarray(positions, dtype=float)
    if x.ndim != 1:
        raise ValueError("mean_force_brute expects a 1D array")
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty position array")
    diff = x[:, None] - x[None, :]
    if out is None:
        out = np.empty(n, dtype=float)
    if spec.eta > 0:
        np.divide(k_eta_eval(spec, diff).sum(axis=1), n, out=out)
    else:
        # integer-valued sum of signs, then the same division as the rank path
        counts = np.sign(diff).sum(axis=1).astype(np.int64)
        np.divide(spec.sign * counts, 2.0 * n, out=out)
    return out


def mean_force(spec: KernelSpec, positions, out: np.ndarray | None = None) -> np.ndarray:
    if spec.eta > 0:
        return mean_force_brute(spec, positions, out=out)
    return mean_force_ranks(spec, positions, out=out)


def rope_majorant_holds(x, xbar, y, ybar) -> bool | np.ndarray:
    """Check ``|K(x-xbar) - K(y-ybar)| <= 1{|y-ybar| <= 2|x-y|} + 1{|y-ybar| <= 2|xbar-ybar|}``.

    Vectorised over array inputs; uses the repulsive exact kernel (the
    inequality is sign-symmetric).
    """
    spec = KernelSpec(Interaction.REPULSIVE)
    x, xbar, y, ybar = (np.asarray(a, dtype=float) for a in (x, xbar, y, ybar))
    lhs = np.abs(k_eval(spec, x - xbar) - k_eval(spec, y - ybar))
    d = np.abs(y - ybar)
    rhs = (d <= 2.0 * np.abs(x - y)).astype(float) + (d <= 2.0 * np.abs(xbar - ybar)).astype(float)
    ok = lhs <= rhs
    return bool(ok) if ok.ndim == 0 else ok
