"""Grid solver for the Vlasov-Poisson-Fokker-Planck equation in 1D x 1D.

    d_t f + v d_x f + (K * rho) d_v f = d_v (d_v f + v f)

Strang splitting: half x-transport, exact velocity step (Ornstein-Uhlenbeck
with the frozen mean field as drift), half x-transport. Transport uses
semi-Lagrangian back-tracing with cubic B-spline interpolation; the velocity
diffusion is a discrete Gaussian stencil. Negative undershoots are clipped
and the mass renormalised after every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import integrate, ndimage, special

from .kernel import KernelSpec, bump_cdf

log = logging.getLogger(__name__)


class DomainTooSmallError(RuntimeError):
    """Mass reached the outer cells of the truncated phase-space domain."""


# ---------------------------------------------------------------------------
# containers


@dataclass
class GridDensity:
    x_min: float
    x_max: float
    v_min: float
    v_max: float
    values: np.ndarray  # shape (nx, nv), point values at cell centres

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("values must be a 2D (nx, nv) array")
        if not (self.x_max > self.x_min and self.v_max > self.v_min):
            raise ValueError("empty domain")

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def nv(self) -> int:
        return self.values.shape[1]

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / self.nv

    @property
    def x(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def v(self) -> np.ndarray:
        return self.v_min + (np.arange(self.nv) + 0.5) * self.dv

    def mass(self) -> float:
        return float(self.values.sum() * self.dx * self.dv)

    def with_values(self, values: np.ndarray) -> "GridDensity":
        return replace(self, values=values)

    @classmethod
    def from_function(cls, fn: Callable, x_min=-8.0, x_max=8.0, v_min=-8.0, v_max=8.0,
                      nx=256, nv=256, normalize=True) -> "GridDensity":
        g = cls(x_min, x_max, v_min, v_max, np.zeros((nx, nv)))
        vals = np.asarray(fn(g.x[:, None], g.v[None, :]), dtype=float) * np.ones((nx, nv))
        if np.any(vals < 0):
            raise ValueError("density function returned negative values")
        g = g.with_values(vals)
        if normalize:
            g.values /= g.mass()
        return g

    def boundary_mass(self, width: int = 2) -> float:
        f = self.values
        inner = f[width:-width, width:-width].sum() if min(f.shape) > 2 * width else 0.0
        return float((f.sum() - inner) * self.dx * self.dv)

    def interpolate(self, x, v) -> np.ndarray:
        """Bilinear interpolation at arbitrary points; zero outside the grid."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        cx = (x - self.x_min) / self.dx - 0.5
        cv = (v - self.v_min) / self.dv - 0.5
        return ndimage.map_coordinates(self.values, [cx.ravel(), cv.ravel()], order=1,
                                       mode="constant", cval=0.0).reshape(np.broadcast(x, v).shape)


@dataclass
class Density1D:
    """Piecewise-constant density on uniform cells starting at ``x_min``."""

    x_min: float
    dx: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    @property
    def edges(self) -> np.ndarray:
        return self.x_min + np.arange(self.values.size + 1) * self.dx

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.values.size) + 0.5) * self.dx

    def mass(self) -> float:
        return float(self.values.sum() * self.dx)

    def sup(self) -> float:
        return float(self.values.max())

    def cdf(self, x) -> np.ndarray:
        """Exact CDF of the piecewise-constant density (normalised to mass 1)."""
        cum = np.concatenate([[0.0], np.cumsum(self.values) * self.dx])
        cum /= cum[-1]
        return np.interp(x, self.edges, cum)


@dataclass
class FieldTable:
    """Mean-field force sampled on uniform nodes ``x0 + j dx``.

    Linear interpolation between nodes, clamped to the end values outside.
    """

    x0: float
    dx: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size == 0:
            raise ValueError("empty field table")

    @classmethod
    def constant(cls, value: float) -> "FieldTable":
        return cls(0.0, 1.0, np.array([float(value)]))

    @property
    def nodes(self) -> np.ndarray:
        return self.x0 + np.arange(self.values.size) * self.dx

    def __call__(self, x) -> np.ndarray:
        return _interp_uniform(self.values, self.x0, self.dx, np.asarray(x, dtype=float))

    def lipschitz(self) -> float:
        if self.values.size < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self.values))) / self.dx)


def _interp_uniform(values: np.ndarray, x0: float, dx: float, x: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    if n == 1:
        return np.full(x.shape, values[..., 0], dtype=float)
    c = np.clip((x - x0) / dx, 0.0, n - 1.0)
    i = np.minimum(c.astype(np.int64), n - 2)
    w = c - i
    return values[i] * (1.0 - w) + values[i + 1] * w


@dataclass
class FieldHistory:
    """Field tables at increasing times, linearly interpolated in time."""

    times: np.ndarray
    x0: float
    dx: float
    values: np.ndarray  # (n_times, n_nodes)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.times.size == 0 or self.values.shape[0] != self.times.size:
            raise ValueError("field history needs one table per stored time")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("field history times must be increasing")

    @classmethod
    def constant(cls, table: FieldTable, t_end: float) -> "FieldHistory":
        return cls(np.array([0.0, float(t_end)]), table.x0, table.dx,
                   np.vstack([table.values, table.values]))

    @classmethod
    def from_tables(cls, times, tables: list[FieldTable]) -> "FieldHistory":
        t0 = tables[0]
        return cls(np.asarray(times), t0.x0, t0.dx, np.vstack([t.values for t in tables]))

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def covers(self, t: float) -> bool:
        tol = 1e-9 * max(1.0, abs(self.t_end))
        return self.times[0] - tol <= t <= self.t_end + tol

    def at(self, t: float) -> FieldTable:
        if not self.covers(t):
            raise ValueError(f"time {t} outside field history [{self.times[0]}, {self.t_end}]")
        if self.times.size == 1:
            vals = self.values[0]
        else:
            k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
            w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
            w = min(max(w, 0.0), 1.0)
            vals = self.values[k] * (1.0 - w) + self.values[k + 1] * w
        return FieldTable(self.x0, self.dx, vals)


# ---------------------------------------------------------------------------
# marginals, fields, norms


def rho_from_f(f: GridDensity) -> Density1D:
    return Density1D(f.x_min, f.dx, f.values.sum(axis=1) * f.dv)


def bump_weights(eta: float, h: float) -> np.ndarray:
    """Cell-integrated weights of ``chi_eta`` on a grid of spacing h (sum to 1)."""
    m = int(np.ceil(eta / h + 0.5))
    k = np.arange(-m, m + 1)
    w = bump_cdf((k + 0.5) * h / eta) - bump_cdf((k - 0.5) * h / eta)
    return w / w.sum()


def field_from_rho(rho: Density1D, spec: KernelSpec) -> FieldTable:
    """``F = K * rho`` on the cell edges.

    The CDF of a piecewise-constant density is exact at the edges and linear
    in between, so the interpolated table is exact everywhere, and it
    saturates at -+1/2 outside the support.
    """
    vals = rho.values
    if np.any(vals < 0):
        raise ValueError("density has negative cells")
    if spec.eta > 0:
        vals = ndimage.convolve1d(vals, bump_weights(spec.eta, rho.dx), mode="constant", cval=0.0)
    total = vals.sum()
    if total <= 0:
        raise ValueError("density has no mass")
    cdf = np.concatenate([[0.0], np.cumsum(vals) / total])
    cdf[-1] = 1.0
    return FieldTable(rho.x_min, rho.dx, spec.sign * (cdf - 0.5))


def weighted_norm_e(f: GridDensity, lam: float) -> float:
    """``sup f(x, v) exp(lam |v|)`` over cell centres."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return float(np.max(f.values * np.exp(lam * np.abs(f.v))[None, :]))


def weighted_norm_p(f: GridDensity, gamma: float) -> float:
    """``sup f(x, v) <v>^-gamma`` with ``<v> = sqrt(1 + v^2)``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return float(np.max(f.values * (1.0 + f.v**2)[None, :] ** (-gamma / 2.0)))


def mollify_grid(f: GridDensity, eta: float) -> GridDensity:
    """``f * (chi_eta x chi_eta)`` on the grid; identity for eta = 0."""
    if eta <= 0:
        return f.with_values(f.values.copy())
    out = ndimage.convolve1d(f.values, bump_weights(eta, f.dx), axis=0, mode="constant", cval=0.0)
    out = ndimage.convolve1d(out, bump_weights(eta, f.dv), axis=1, mode="constant", cval=0.0)
    return f.with_values(out)


# ---------------------------------------------------------------------------
# splitting substeps


def _cubic_resample(values: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Evaluate the cubic B-spline interpolant of ``values`` along ``axis``.

    ``coords`` holds fractional indices (same shape as ``values``); points
    outside ``[0, n-1]`` evaluate to zero.
    """
    c = ndimage.spline_filter1d(values, order=3, axis=axis, mode="mirror")
    c = np.moveaxis(c, axis, -1)
    q = np.moveaxis(coords, axis, -1)
    n = c.shape[-1]
    i0 = np.floor(q).astype(np.int64)
    t = q - i0
    t2, t3 = t * t, t * t * t
    weights = ((1 - t) ** 3 / 6.0,
               (3 * t3 - 6 * t2 + 4) / 6.0,
               (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0,
               t3 / 6.0)
    out = np.zeros_like(q)
    for m, w in zip(range(-1, 3), weights):
        idx = i0 + m
        valid = (idx >= 0) & (idx < n)
        out += w * np.where(valid, np.take_along_axis(c, np.clip(idx, 0, n - 1), axis=-1), 0.0)
    out[(q < 0) | (q > n - 1)] = 0.0
    return np.moveaxis(out, -1, axis)


def _x_transport(f: GridDensity, tau: float) -> np.ndarray:
    cx = np.arange(f.nx)[:, None] - (f.v[None, :] * tau) / f.dx
    return _cubic_resample(f.values, np.broadcast_to(cx, f.values.shape), axis=0)


def discrete_gaussian_stencil(sigma_cells: float, cutoff: float = 8.0) -> np.ndarray:
    """Discrete Gaussian ``exp(-s) I_n(s)`` with variance ``s = sigma_cells^2``.

    Truncated at ``cutoff`` standard deviations plus a few cells (never
    fewer than 8), then renormalised. Exact mass and variance for any width,
    unlike a sampled Gaussian narrower than a cell; the extra cells keep the
    truncated tail negligible when the stencil is only a cell or two wide.
    """
    s = sigma_cells * sigma_cells
    m = max(8, int(np.ceil(cutoff * sigma_cells)) + 4)
    w = special.ive(np.arange(-m, m + 1), s)
    return w / w.sum()


def _velocity_step(values: np.ndarray, f: GridDensity, force: np.ndarray, dt: float) -> np.ndarray:
    # exact OU transition V' = F + (V - F) e^-dt + sqrt(1 - e^-2dt) xi at frozen x
    b = np.exp(-dt)
    a = force * (1.0 - b)
    vprime = f.v[None, :]
    vback = (vprime - a[:, None]) / b
    cv = (vback - f.v_min) / f.dv - 0.5
    g = _cubic_resample(values, cv, axis=1) / b
    sigma = np.sqrt(-np.expm1(-2.0 * dt))
    stencil = discrete_gaussian_stencil(sigma / f.dv)
    return ndimage.convolve1d(g, stencil, axis=1, mode="constant", cval=0.0)


def vpfp_step(f: GridDensity, spec: KernelSpec, dt: float, boundary_tol: float | None = 1e-6,
              diagnostics: dict | None = None) -> GridDensity:
    """One Strang step of the VPFP equation; returns a new GridDensity."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt > 0.1:
        raise ValueError("dt > 0.1 is too coarse for the splitting scheme")
    half = f.with_values(_x_transport(f, 0.5 * dt))
    np.maximum(half.values, 0.0, out=half.values)
    force = field_from_rho(rho_from_f(half), spec)(half.x)
    vals = _velocity_step(half.values, half, force, dt)
    vals = _x_transport(half.with_values(vals), 0.5 * dt)
    np.maximum(vals, 0.0, out=vals)
    out = f.with_values(vals)
    raw = out.mass()
    out.values /= raw
    bmass = out.boundary_mass()
    if diagnostics is not None:
        diagnostics["raw_mass"] = raw
        diagnostics["boundary_mass"] = bmass
    if boundary_tol is not None and bmass > boundary_tol:
        raise DomainTooSmallError(
            f"boundary mass {bmass:.3e} exceeds {boundary_tol:.1e}; enlarge the domain")
    return out


# ---------------------------------------------------------------------------
# full solve


@dataclass
class PDESolution:
    times: np.ndarray
    fields: FieldHistory
    rho_sup: np.ndarray
    raw_mass: np.ndarray
    boundary_mass: np.ndarray
    norm_e: np.ndarray
    lam: float
    snapshots: list[tuple[float, GridDensity]] = field(default_factory=list)

    @property
    def kappa(self) -> float:
        """``sup_s ||rho_s||_inf`` over the solved horizon."""
        return float(self.rho_sup.max())

    def rho_sup_integral(self, t: float | None = None) -> float:
        """Trapezoidal ``int_0^t ||rho_s||_inf ds``."""
        t = self.times[-1] if t is None else t
        mask = self.times <= t + 1e-12
        return float(integrate.trapezoid(self.rho_sup[mask], self.times[mask]))

    def final(self) -> GridDensity:
        return self.snapshots[-1][1]


def solve_vpfp(f0: GridDensity, spec: KernelSpec, dt: float, t_end: float,
               snapshot_stride: int = 0, boundary_tol: float | None = 1e-6,
               lam: float = 1.0) -> PDESolution:
    """Advance ``f0`` to ``t_end``; the last step is shortened to land on it.

    Records the field, ``||rho||_inf``, mass and boundary diagnostics after
    every step, and full snapshots every ``snapshot_stride`` steps (plus the
    initial and final states).
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    n_steps = int(np.ceil(t_end / dt - 1e-9))
    f = f0
    rho = rho_from_f(f)
    times = [0.0]
    tables = [field_from_rho(rho, spec)]
    rho_sup = [rho.sup()]
    raw = [f.mass()]
    bmass = [f.boundary_mass()]
    norm_e = [weighted_norm_e(f, lam)]
    snaps = [(0.0, f)]
    t = 0.0
    for k in range(1, n_steps + 1):
        h = min(dt, t_end - t)
        diag: dict = {}
        f = vpfp_step(f, spec, h, boundary_tol=boundary_tol, diagnostics=diag)
        t = t_end if k == n_steps else t + h
        rho = rho_from_f(f)
        times.append(t)
        tables.append(field_from_rho(rho, spec))
        rho_sup.append(rho.sup())
        raw.append(diag["raw_mass"])
        bmass.append(diag["boundary_mass"])
        norm_e.append(weighted_norm_e(f, lam))
        if k == n_steps or (snapshot_stride and k % snapshot_stride == 0):
            snaps.append((t, f))
    return PDESolution(
        times=np.array(times),
        fields=FieldHistory.from_tables(times, tables),
        rho_sup=np.array(rho_sup),
        raw_mass=np.array(raw),
        boundary_mass=np.array(bmass),
        norm_e=np.array(norm_e),
        lam=lam,
        snapshots=snaps,
    )


# ---------------------------------------------------------------------------
# Feynman-Kac representation


def fk_density_estimate(f0, fields: FieldHistory, t: float, x: float, v: float,
                        m_samples: int, rng: np.random.Generator, eta: float = 0.0,
                        dt: float = 1e-2) -> tuple[float, float]:
    """Monte Carlo value of the density at ``(t, x, v)`` from backward paths.

    ``f0`` is a GridDensity or a callable ``f0(x, v)``. Paths follow
    ``dY = -W ds``, ``dW = (W - F(t - s, Y)) ds + sqrt(2) dB`` from ``(x, v)``
    and the estimate is ``e^t E[(f0 * chi_eta)(Y_t, W_t)]``. Returns
    ``(mean, standard_error)``.
    """
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    if t < 0:
        raise ValueError("t must be non-negative")
    if isinstance(f0, GridDensity):
        g = mollify_grid(f0, eta)
        evaluate = g.interpolate
    else:
        if eta > 0:
            raise ValueError("mollification of a callable f0 is not supported; pass a grid")
        evaluate = f0
    if t == 0:
        return float(evaluate(np.array(x), np.array(v))), 0.0
    if not fields.covers(t):
        raise ValueError("field history shorter than the requested time")

    n_steps = max(1, int(np.ceil(t / dt - 1e-9)))
    h = t / n_steps
    y = np.full(m_samples, float(x))
    w = np.full(m_samples, float(v))
    grow = np.exp(h)
    noise_sd = np.sqrt(np.expm1(2.0 * h))
    for k in range(n_steps):
        s_mid = (k + 0.5) * h
        y -= 0.5 * h * w
        w -= h * fields.at(t - s_mid)(y)
        w = w * grow + noise_sd * rng.standard_normal(m_samples)
        y -= 0.5 * h * w
    vals = np.exp(t) * evaluate(y, w)
    se = float(vals.std(ddof=1) / np.sqrt(m_samples)) if m_samples > 1 else float("inf")
    return float(vals.mean()), se
