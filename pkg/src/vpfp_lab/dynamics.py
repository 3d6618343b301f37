"""Time stepping for the N-particle system and its mean-field copies.

Particles:   dX = V dt,  dV = ((1/N) sum_j K(X_i - X_j) - V) dt + sqrt(2) dB_i
Copies:      dY = W dt,  dW = (F(t, Y) - W) dt + sqrt(2) dB_i

with F a precomputed field history. Both systems consume the same Gaussian
increment per particle per step (synchronous coupling), so the pathwise
discrepancy only reflects the interaction error.

Default scheme is Strang splitting: half drift in x, kick with the force at
the midpoint time, exact Ornstein-Uhlenbeck step in v, half drift in x.
Euler-Maruyama is kept as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernel import KernelSpec, mean_force
from .meanfield import FieldHistory, FieldTable
from .noise import GaussianIncrements, NoiseStreamSpec

SPLITTING = "splitting_exact_ou"
EULER = "euler_maruyama"
SCHEMES = (SPLITTING, EULER)


@dataclass
class ParticleState:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float)
        self.v = np.array(self.v, dtype=float)
        if self.x.shape != self.v.shape or self.x.ndim != 1:
            raise ValueError("x and v must be 1D arrays of equal length")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise ValueError("non-finite particle state")

    @property
    def n(self) -> int:
        return self.x.size

    def copy(self) -> "ParticleState":
        return ParticleState(self.x, self.v, self.t)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    scheme: str = SPLITTING

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive")
        if not (np.isfinite(self.t_end) and self.t_end >= self.dt):
            raise ValueError("t_end must be at least one step dt")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")

    def step_sizes(self) -> np.ndarray:
        """Step lengths covering [0, t_end]; the last one is shortened if needed."""
        n = int(np.ceil(self.t_end / self.dt - 1e-9))
        h = np.full(n, self.dt)
        if n:
            h[-1] = self.t_end - self.dt * (n - 1)
        return h


def ou_velocity_step(v: np.ndarray, dt: float, xi: np.ndarray) -> np.ndarray:
    """Exact ``dV = -V dt + sqrt(2) dB`` over ``dt`` driven by standard normals ``xi``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return v * np.exp(-dt) + np.sqrt(-np.expm1(-2.0 * dt)) * xi


def _step(state: ParticleState, force: Callable[[np.ndarray], np.ndarray], dt: float,
          xi: np.ndarray, scheme: str) -> None:
    if xi.shape != state.x.shape:
        raise ValueError("need one Gaussian draw per particle")
    if scheme == SPLITTING:
        state.x += 0.5 * dt * state.v
        state.v += dt * force(state.x)
        state.v = ou_velocity_step(state.v, dt, xi)
        state.x += 0.5 * dt * state.v
    else:
        f = force(state.x)
        state.x += dt * state.v
        state.v += dt * (f - state.v) + np.sqrt(2.0 * dt) * xi
    state.t += dt


def step_particle_system(state: ParticleState, spec: KernelSpec, dt: float, xi: np.ndarray,
                         scheme: str = SPLITTING) -> ParticleState:
    """Advance the interacting system in place by one step (and return it)."""
    _step(state, lambda x: mean_force(spec, x), dt, xi, scheme)
    return state


def step_linear_sde(state: ParticleState, field: FieldTable, dt: float, xi: np.ndarray,
                    scheme: str = SPLITTING) -> ParticleState:
    """Advance independent copies in an external field by one step, in place.

    With splitting the table should be the field at the step midpoint, with
    Euler-Maruyama the field at the start of the step (see ``field_time``).
    """
    _step(state, field, dt, xi, scheme)
    return state


def field_time(t: float, dt: float, scheme: str) -> float:
    return t + 0.5 * dt if scheme == SPLITTING else t


@dataclass
class CoupledTrajectoryStats:
    """Per-particle ``sup_t |X_i - Y_i|`` and ``sup_t |V_i - W_i|`` on the step grid."""

    sup_dx: np.ndarray
    sup_dv: np.ndarray
    particles: ParticleState
    copies: ParticleState | None
    n_steps: int
    trajectory: list[tuple] = field(default_factory=list)
    series_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    series_discrepancy: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def discrepancy(self) -> float:
        return float(np.mean(self.sup_dx + self.sup_dv))


Observer = Callable[[int, float, ParticleState, ParticleState | None], None]


def simulate_coupled(x0, v0, spec: KernelSpec, fields: FieldHistory | None, cfg: IntegratorConfig,
                     noise: NoiseStreamSpec, y0=None, w0=None, record_every: int = 0,
                     record_particles: int | None = None,
                     observer: Observer | None = None) -> CoupledTrajectoryStats:
    """Run particles and (if ``fields`` is given) their synchronously coupled copies.

    The copies start from ``(y0, w0)``, defaulting to the particle initial
    condition. ``record_every > 0`` stores ``(step, t, i, x, v, y, w)`` rows
    for the first ``record_particles`` indices every that many steps.
    ``observer`` is called after every step (and once at t = 0).
    """
    parts = ParticleState(x0, v0)
    n = parts.n
    copies = None
    if fields is not None:
        copies = ParticleState(parts.x if y0 is None else y0, parts.v if w0 is None else w0)
        if copies.n != n:
            raise ValueError("copies and particles must have the same size")
        if not fields.covers(cfg.t_end):
            raise ValueError("field history does not cover the integration horizon")
    steps = cfg.step_sizes()
    incr = GaussianIncrements(noise, n)
    sup_dx = np.zeros(n)
    sup_dv = np.zeros(n)
    if copies is not None:
        sup_dx = np.abs(parts.x - copies.x)
        sup_dv = np.abs(parts.v - copies.v)
    rows: list[tuple] = []
    n_rec = n if record_particles is None else min(n, record_particles)

    series_t: list[float] = []
    series_d: list[float] = []

    def record(k, t):
        if copies is not None and (k % max(record_every, 1) == 0 or k == steps.size):
            series_t.append(t)
            series_d.append(float(np.mean(np.abs(parts.x - copies.x) + np.abs(parts.v - copies.v))))
        if record_every and (k % record_every == 0 or k == steps.size):
            for i in range(n_rec):
                y = copies.x[i] if copies is not None else float("nan")
                w = copies.v[i] if copies is not None else float("nan")
                rows.append((k, t, i, parts.x[i], parts.v[i], y, w))

    t = 0.0
    record(0, t)
    if observer is not None:
        observer(0, t, parts, copies)
    for k, h in enumerate(steps, start=1):
        xi = incr.next()
        step_particle_system(parts, spec, h, xi, cfg.scheme)
        if copies is not None:
            step_linear_sde(copies, fields.at(field_time(t, h, cfg.scheme)), h, xi, cfg.scheme)
            np.maximum(sup_dx, np.abs(parts.x - copies.x), out=sup_dx)
            np.maximum(sup_dv, np.abs(parts.v - copies.v), out=sup_dv)
        t = cfg.t_end if k == steps.size else t + h
        record(k, t)
        if observer is not None:
            observer(k, t, parts, copies)
    return CoupledTrajectoryStats(sup_dx, sup_dv, parts, copies, steps.size, rows,
                                  np.array(series_t), np.array(series_d))


def simulate_linear(y0, w0, fields: FieldHistory, cfg: IntegratorConfig,
                    noise: NoiseStreamSpec, observer: Observer | None = None) -> ParticleState:
    """Independent copies only; returns the state at ``cfg.t_end``."""
    state = ParticleState(y0, w0)
    if not fields.covers(cfg.t_end):
        raise ValueError("field history does not cover the integration horizon")
    incr = GaussianIncrements(noise, state.n)
    t = 0.0
    if observer is not None:
        observer(0, t, state, None)
    steps = cfg.step_sizes()
    for k, h in enumerate(steps, start=1):
        step_linear_sde(state, fields.at(field_time(t, h, cfg.scheme)), h, incr.next(), cfg.scheme)
        t = cfg.t_end if k == steps.size else t + h
        if observer is not None:
            observer(k, t, state, None)
    return state
