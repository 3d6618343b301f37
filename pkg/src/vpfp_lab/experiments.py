"""End-to-end studies built on the particle, PDE and statistics layers.

Every study is a deterministic function of its configuration and master seed:
replica r always uses the noise streams of ``NoiseStreamSpec(seed, r)``, and
replica results are reduced in index order whatever the worker schedule.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import concentration as conc
from .dynamics import IntegratorConfig, ParticleState, field_time, simulate_coupled, step_linear_sde
from .kernel import Interaction, KernelSpec, sample_bump
from .meanfield import (FieldHistory, FieldTable, GridDensity, PDESolution, mollify_grid, rho_from_f,
                        solve_vpfp, weighted_norm_e, weighted_norm_p)
from .metrics import coupling_discrepancy, w1_2d_exact
from .noise import GaussianIncrements, NoiseStreamSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# initial law


def _gauss_exp_abs_moment(lam: float, mu: float, sigma: float) -> float:
    """``E exp(lam |Z|)`` for ``Z ~ N(mu, sigma^2)``."""
    if sigma == 0:
        return math.exp(lam * abs(mu))
    s2 = sigma * sigma
    a = math.exp(lam * mu + 0.5 * lam * lam * s2) * stats.norm.cdf((mu + lam * s2) / sigma)
    b = math.exp(-lam * mu + 0.5 * lam * lam * s2) * stats.norm.cdf((-mu + lam * s2) / sigma)
    return float(a + b)


def _gauss_mean_abs(mu: float, sigma: float) -> float:
    if sigma == 0:
        return abs(mu)
    return float(sigma * math.sqrt(2.0 / math.pi) * math.exp(-mu * mu / (2 * sigma * sigma))
                 + mu * (1.0 - 2.0 * stats.norm.cdf(-mu / sigma)))


@dataclass(frozen=True)
class F0Spec:
    """Product Gaussian initial law ``N(x_mean, x_std^2) x N(v_mean, v_std^2)``.

    ``v_std = 0`` (deterministic velocities) is allowed for sampling and
    moments but has no grid density.
    """

    family: str = "gaussian"
    x_mean: float = 0.0
    x_std: float = 1.0
    v_mean: float = 0.0
    v_std: float = 1.0

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError(f"unknown initial family {self.family!r}")
        if not (self.x_std > 0 and self.v_std >= 0):
            raise ValueError("x_std must be positive and v_std non-negative")

    @property
    def has_density(self) -> bool:
        return self.v_std > 0

    def density(self, x, v):
        if not self.has_density:
            raise ValueError("degenerate velocity law has no density")
        return (stats.norm.pdf(x, self.x_mean, self.x_std)
                * stats.norm.pdf(v, self.v_mean, self.v_std))

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        x = rng.normal(self.x_mean, self.x_std, n)
        v = rng.normal(self.v_mean, self.v_std, n) if self.v_std > 0 else np.full(n, self.v_mean)
        return x, v

    def rho_cdf(self, x):
        return stats.norm.cdf(x, self.x_mean, self.x_std)

    def field(self, spec: KernelSpec) -> Callable[[np.ndarray], np.ndarray]:
        """Exact ``K * rho_0`` for the exact kernel."""
        return lambda x: spec.sign * (self.rho_cdf(x) - 0.5)

    def exp_moment_w(self, lam: float) -> float:
        return _gauss_exp_abs_moment(lam, self.v_mean, self.v_std)

    def exp_moment_y(self, lam: float) -> float:
        return _gauss_exp_abs_moment(lam, self.x_mean, self.x_std)

    def moment_xv(self, lam: float) -> float:
        """``E exp(lam (|Y0| + |W0|))`` (independent coordinates)."""
        return self.exp_moment_y(lam) * self.exp_moment_w(lam)

    def mean_abs_w(self) -> float:
        return _gauss_mean_abs(self.v_mean, self.v_std)

    def norm_e(self, mu: float) -> float:
        """Closed-form ``sup f0(x, v) exp(mu |v|)``."""
        if not self.has_density:
            return math.inf
        s2 = self.v_std**2
        cands = [-(self.v_mean**2) / (2 * s2)]
        if self.v_mean + mu * s2 > 0:
            cands.append(mu * self.v_mean + 0.5 * mu * mu * s2)
        if self.v_mean - mu * s2 < 0:
            cands.append(-mu * self.v_mean + 0.5 * mu * mu * s2)
        return math.exp(max(cands)) / (2 * math.pi * self.x_std * self.v_std)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PDEConfig:
    x_min: float = -8.0
    x_max: float = 8.0
    v_min: float = -8.0
    v_max: float = 8.0
    nx: int = 256
    nv: int = 256
    dt: float = 0.01
    snapshot_stride: int = 10
    boundary_tol: float = 1e-6

    def __post_init__(self):
        if self.nx < 4 or self.nv < 4:
            raise ValueError("grid needs at least 4 cells per direction")
        if not (0 < self.dt <= 0.1):
            raise ValueError("PDE dt must lie in (0, 0.1]")
        if self.snapshot_stride < 0:
            raise ValueError("snapshot_stride must be >= 0")

    def initial_grid(self, f0: F0Spec) -> GridDensity:
        return GridDensity.from_function(f0.density, self.x_min, self.x_max, self.v_min,
                                         self.v_max, self.nx, self.nv)


@dataclass(frozen=True)
class ExperimentConfig:
    f0: F0Spec = F0Spec()
    interaction: str = "repulsive"
    n_list: tuple[int, ...] = (128, 256, 512, 1024, 2048)
    replicas: int = 32
    t_end: float = 1.0
    dt: float = 1e-3
    scheme: str = "splitting_exact_ou"
    lam: float = 1.0
    seed: int = 0
    threads: int = 1
    pde: PDEConfig = PDEConfig()
    # concentration study
    concentration_n: int = 256
    concentration_replicas: int = 200
    epsilons: tuple[float, ...] = ()
    n_epsilons: int = 6
    eps_range: str = "strict"
    gammas: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4)
    infnorm_eps: float = 0.05
    # mollification study
    eta: float = 0.2
    eta_prime: float = 0.1
    cauchy_t: float = 0.5
    cauchy_n: int = 256
    cauchy_replicas: int = 64
    # moment study
    moment_samples: int = 20000

    def __post_init__(self):
        if any(n < 2 for n in self.n_list) or not self.n_list:
            raise ValueError("every N must be >= 2")
        if self.replicas < 1 or self.concentration_replicas < 1 or self.cauchy_replicas < 1:
            raise ValueError("replica counts must be >= 1")
        if not (self.t_end > 0 and self.dt > 0):
            raise ValueError("t_end and dt must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.eps_range not in ("strict", "wide", "none"):
            raise ValueError("eps_range must be 'strict', 'wide' or 'none'")
        Interaction(self.interaction)
        IntegratorConfig(self.dt, self.t_end, self.scheme)

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(Interaction(self.interaction), 0.0)

    def integrator(self, t_end: float | None = None) -> IntegratorConfig:
        return IntegratorConfig(self.dt, self.t_end if t_end is None else t_end, self.scheme)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# workers


def resolve_threads(threads: int) -> int:
    return max(1, os.cpu_count() or 1) if threads <= 0 else threads


def map_replicas(fn: Callable, tasks: Sequence, threads: int = 1) -> list:
    """Ordered map over replica tasks, in-process or on a process pool."""
    threads = resolve_threads(threads)
    if threads == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# reference PDE


def reference_solution(cfg: ExperimentConfig, t_end: float | None = None, eta: float = 0.0,
                       interaction: str | None = None) -> PDESolution:
    """Grid solution for ``f0 * (chi_eta x chi_eta)`` with kernel ``K_eta``."""
    spec = KernelSpec(Interaction(interaction or cfg.interaction), eta)
    f0 = mollify_grid(cfg.pde.initial_grid(cfg.f0), eta)
    t_end = cfg.t_end if t_end is None else t_end
    return solve_vpfp(f0, spec, cfg.pde.dt, t_end, cfg.pde.snapshot_stride,
                      cfg.pde.boundary_tol, cfg.lam)


def zero_field(t_end: float) -> FieldHistory:
    return FieldHistory.constant(FieldTable.constant(0.0), t_end)


# ---------------------------------------------------------------------------
# constants ledger


@dataclass
class ConstantsLedger:
    lam: float
    t: float
    kappa_t: float
    log_exp_moment_w0: float
    exp_moment_xv: float
    c_lambda: float
    C_t: float
    D_t: float
    B_t: float
    A_t: float
    A_t_prime: float
    A_t_second: float
    a_second_le_a: bool


def compute_constants(lam: float, t: float, kappa_t: float, log_exp_moment_w0: float,
                      exp_moment_xv: float) -> ConstantsLedger:
    """Explicit constants of the concentration estimates for given moments of f0."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not kappa_t > 0:
        raise ValueError("kappa_t must be positive")
    if not (math.isfinite(log_exp_moment_w0) and math.isfinite(exp_moment_xv)):
        raise ValueError("non-finite exponential moments")
    k = kappa_t
    lnw = log_exp_moment_w0
    growth = math.exp(lam * (0.5 + lam) * t) * exp_moment_xv
    c_lam = 2.5 + lnw / lam
    C_t = 36.0 + 80.0 * k + (1.0 + 3.0 * k) * 8.0 / lam * lnw
    D_t = 10.0 + k * k / lam + growth
    B_t = 37.0 + 2.0 / lam + 80.0 * k + (1.0 + 3.0 * k) * 8.0 / lam * lnw
    A_t = (12.0 + k * k / lam + 2.0 * growth) * (1.0 + (2.0 * k + 1.0) * c_lam) / lam
    A_tp = (10.0 + k * k / lam + growth) * (2.0 * k + 1.0) / lam
    A_ts = (D_t * (1.0 + (2.0 * k + 1.0) * c_lam) + 5.0 + 4.0 * k + growth) / lam
    return ConstantsLedger(lam, t, k, lnw, exp_moment_xv, c_lam, C_t, D_t, B_t, A_t, A_tp,
                           A_ts, A_ts <= A_t)


def constants_for(cfg: ExperimentConfig, kappa_t: float, t: float | None = None) -> ConstantsLedger:
    lam = cfg.lam
    return compute_constants(lam, cfg.t_end if t is None else t, kappa_t,
                             math.log(cfg.f0.exp_moment_w(lam)), cfg.f0.moment_xv(lam))


# ---------------------------------------------------------------------------
# bound checks


@dataclass
class BoundCheck:
    name: str
    empirical: float
    bound: float
    se: float = 0.0
    vacuous: bool = False

    @property
    def margin(self) -> float:
        return self.bound + 3.0 * self.se - self.empirical

    @property
    def passed(self) -> bool:
        return self.vacuous or self.margin >= 0

    def row(self) -> dict:
        return {"name": self.name, "empirical": self.empirical, "bound": self.bound,
                "se": self.se, "margin": self.margin, "vacuous": self.vacuous,
                "passed": self.passed}


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


# ---------------------------------------------------------------------------
# chaos-rate sweep


def chaos_bound(n: int, t: float, rho_integral: float) -> float:
    """``(9 / sqrt(N)) exp(t + 8 int_0^t ||rho_s||_inf ds)``."""
    return 9.0 / math.sqrt(n) * math.exp(t + 8.0 * rho_integral)


@dataclass(frozen=True)
class _CoupledTask:
    f0: F0Spec
    spec: KernelSpec
    fields: FieldHistory
    integ: IntegratorConfig
    seed: int
    replica: int
    n: int


def _coupled_replica(task: _CoupledTask) -> float:
    noise = NoiseStreamSpec(task.seed, task.replica)
    x0, v0 = task.f0.sample(noise.initial_generator(), task.n)
    st = simulate_coupled(x0, v0, task.spec, task.fields, task.integ, noise)
    return coupling_discrepancy(st)


def coupled_discrepancies(cfg: ExperimentConfig, n: int, replicas: int, fields: FieldHistory,
                          spec: KernelSpec | None = None) -> np.ndarray:
    spec = cfg.kernel if spec is None else spec
    tasks = [_CoupledTask(cfg.f0, spec, fields, cfg.integrator(), cfg.seed, r, n)
             for r in range(replicas)]
    return np.array(map_replicas(_coupled_replica, tasks, cfg.threads))


def fit_loglog_slope(ns, means, ses) -> tuple[float, float]:
    """Weighted least-squares slope of log(mean) against log(N) and its SE.

    Weights are ``(mean / se)^2``, the inverse variance of log(mean) to first
    order; unweighted if any SE is zero. Returns (nan, nan) when undefined.
    """
    ns, means, ses = (np.asarray(a, dtype=float) for a in (ns, means, ses))
    if ns.size < 2 or np.any(means <= 0):
        return math.nan, math.nan
    x, y = np.log(ns), np.log(means)
    w = (means / ses) ** 2 if np.all(ses > 0) else np.ones_like(x)
    xm = np.sum(w * x) / w.sum()
    ym = np.sum(w * y) / w.sum()
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    if np.all(ses > 0):
        se = float(math.sqrt(1.0 / sxx))
    else:
        resid = y - (ym + slope * (x - xm))
        dof = max(ns.size - 2, 1)
        se = float(math.sqrt(np.sum(resid**2) / dof / sxx))
    return slope, se


@dataclass
class ChaosResult:
    t: float
    rho_integral: float
    kappa_t: float
    rows: list[dict]
    slope: float
    slope_se: float
    discrepancies: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def bounds_hold(self) -> bool:
        return all(r["mean"] <= r["bound"] for r in self.rows)


def chaos_rate_sweep(cfg: ExperimentConfig, solution: PDESolution | None = None,
                     control: bool = False) -> ChaosResult:
    """Mean coupling discrepancy against N with the companion bound.

    ``control=True`` zeroes both the particle interaction and the field.
    """
    if control:
        spec = KernelSpec(Interaction.FREE)
        fields = zero_field(cfg.t_end)
        integral, kappa = 0.0, 0.0
    else:
        spec = cfg.kernel
        solution = solution if solution is not None else reference_solution(cfg)
        fields = solution.fields
        integral = solution.rho_sup_integral(cfg.t_end)
        kappa = solution.kappa
    rows, disc = [], {}
    for n in cfg.n_list:
        t0 = time.perf_counter()
        d = coupled_discrepancies(cfg, n, cfg.replicas, fields, spec)
        m, se = _mean_se(d)
        disc[n] = d
        rows.append({"N": n, "mean": m, "se": se, "bound": chaos_bound(n, cfg.t_end, integral),
                     "replicas": cfg.replicas, "seconds": time.perf_counter() - t0})
        log.info("chaos N=%d mean=%.4g se=%.2g", n, m, se)
    slope, slope_se = fit_loglog_slope([r["N"] for r in rows], [r["mean"] for r in rows],
                                       [r["se"] for r in rows])
    return ChaosResult(cfg.t_end, integral, kappa, rows, slope, slope_se, disc)


# ---------------------------------------------------------------------------
# concentration of the coupling discrepancy


def epsilon_range(cfg: ExperimentConfig, n: int, kappa: float) -> tuple[float, float]:
    """Admissible thresholds: "strict" also caps by lam/2 and min(5 kappa, 1), "wide" does not."""
    lam = cfg.lam
    lo = lam / math.sqrt(n)
    if cfg.eps_range == "strict":
        hi = min(5 * kappa, 1.0) * min(1 / 16, lam / 2, lam**-2)
    elif cfg.eps_range == "wide":
        hi = 5 * kappa * min(1 / 16, lam**-2)
    else:
        hi = math.inf
    return lo, hi


def concentration_epsilons(cfg: ExperimentConfig, n: int, kappa: float) -> np.ndarray:
    lo, hi = epsilon_range(cfg, n, kappa)
    if cfg.epsilons:
        eps = np.array([e for e in cfg.epsilons if lo <= e <= hi])
    elif hi >= lo and math.isfinite(hi):
        eps = np.linspace(lo, hi, cfg.n_epsilons)
    else:
        eps = np.array([])
    return eps


def coupling_tail_bound(eps, n: int, t: float, led: ConstantsLedger) -> np.ndarray:
    """``(t + eps)(A_t + A_t' sqrt(N) eps) N^{3/2} exp(-2 N eps^2)``."""
    eps = np.asarray(eps, dtype=float)
    return (t + eps) * (led.A_t + led.A_t_prime * math.sqrt(n) * eps) * n**1.5 \
        * np.exp(-2.0 * n * eps**2)


@dataclass
class ConcentrationResult:
    n: int
    constants: ConstantsLedger
    curve: conc.TailCurve
    discrepancies: np.ndarray
    range_empty: bool


def concentration_sweep(cfg: ExperimentConfig, solution: PDESolution | None = None) -> ConcentrationResult:
    solution = solution if solution is not None else reference_solution(cfg)
    n = cfg.concentration_n
    led = constants_for(cfg, solution.kappa)
    eps = concentration_epsilons(cfg, n, solution.kappa)
    d = coupled_discrepancies(cfg, n, cfg.concentration_replicas, solution.fields)
    thr = led.B_t * eps
    curve = conc.TailCurve(thr, conc.exceedance(d, thr) if eps.size else np.zeros(0),
                           coupling_tail_bound(eps, n, cfg.t_end, led),
                           cfg.concentration_replicas, "coupling_concentration")
    if eps.size == 0:
        log.warning("admissible epsilon range is empty for N=%d", n)
    return ConcentrationResult(n, led, curve, d, eps.size == 0)


# ---------------------------------------------------------------------------
# fluctuation statistics of i.i.d. samples


def fluctuation_checks(cfg: ExperimentConfig, n_lambda: int = 100, r_lambda: int = 2000,
                       n_gamma: int = 400, r_gamma: int = 200, alpha: float = 0.25,
                       ) -> tuple[list[BoundCheck], conc.TailCurve]:
    """Mean Lambda and Gamma terms of i.i.d. samples from rho_0, and the Lambda tail."""
    spec = KernelSpec(Interaction.REPULSIVE)
    f0 = cfg.f0
    rng = NoiseStreamSpec(cfg.seed).aux_generator(10)
    ys = rng.normal(f0.x_mean, f0.x_std, size=(r_lambda, n_lambda))
    lam_vals = conc.lambda_fluctuation(ys, f0.field(spec), spec)
    m, se = _mean_se(lam_vals)
    checks = [BoundCheck(f"mean_lambda_N{n_lambda}", m, 1.0 / math.sqrt(2 * n_lambda), se)]
    tail = conc.lambda_deviation_check(ys, f0.field(spec), [alpha], spec)

    rng = NoiseStreamSpec(cfg.seed).aux_generator(11)
    g = np.concatenate([conc.gamma_terms(rng.normal(f0.x_mean, f0.x_std, n_gamma), f0.rho_cdf)
                        for _ in range(r_gamma)])
    m, se = _mean_se(g)
    checks.append(BoundCheck(f"mean_gamma_term_N{n_gamma}", m, 3.0 / math.sqrt(n_gamma), se))
    return checks, tail


# ---------------------------------------------------------------------------
# moment propagation


def _linear_paths(f0: F0Spec, fields: FieldHistory, integ: IntegratorConfig, noise: NoiseStreamSpec,
                  m: int, window: tuple[float, float]):
    """Run m copies; return final state and ``sup_{u in window} |Y_u - Y_s|``."""
    x0, v0 = f0.sample(noise.initial_generator(), m)
    st = ParticleState(x0, v0)
    incr = GaussianIncrements(noise, m)
    s, t_w = window
    anchor = None
    sup_inc = np.zeros(m)
    mean_inc = None
    tt = 0.0
    tol = 1e-9
    steps = integ.step_sizes()
    if s <= tol:
        anchor = st.x.copy()
    for k, h in enumerate(steps, start=1):
        step_linear_sde(st, fields.at(field_time(tt, h, integ.scheme)), h, incr.next(), integ.scheme)
        tt = integ.t_end if k == steps.size else tt + h
        if anchor is None and abs(tt - s) <= tol:
            anchor = st.x.copy()
        elif anchor is not None and tt <= t_w + tol:
            np.maximum(sup_inc, np.abs(st.x - anchor), out=sup_inc)
            if abs(tt - t_w) <= tol:
                mean_inc = np.abs(st.x - anchor)
    if anchor is None or mean_inc is None:
        raise ValueError("increment window does not fall on the step grid")
    return st, sup_inc, mean_inc


def moment_propagation_check(cfg: ExperimentConfig, fields: FieldHistory | None = None,
                             m_samples: int | None = None, t: float | None = None) -> list[BoundCheck]:
    """Empirical moments of the mean-field copies against their explicit bounds.

    ``fields=None`` runs force-free copies.
    """
    t = cfg.t_end if t is None else t
    m = cfg.moment_samples if m_samples is None else m_samples
    lam = cfg.lam
    fields = zero_field(t) if fields is None else fields
    integ = cfg.integrator(t)
    win = min(1 / 16, lam**-2, 0.25)
    # align the increment window with the step grid
    n_win = max(1, int(math.floor(win / cfg.dt + 1e-9)))
    s = max(0.0, t - n_win * cfg.dt)
    noise = NoiseStreamSpec(cfg.seed, 0).replica(1_000_000)
    st, sup_inc, inc = _linear_paths(cfg.f0, fields, integ, noise, m, (s, t))
    f0 = cfg.f0
    out = []
    ew = np.exp(lam * np.abs(st.v))
    mm, se = _mean_se(ew)
    out.append(BoundCheck("exp_moment_w", mm, math.exp(lam / 2 * (3 + lam))
                          * f0.exp_moment_w(lam * math.exp(-t)), se))
    ey = np.exp(lam * np.abs(st.x))
    mm, se = _mean_se(ey)
    out.append(BoundCheck("exp_moment_y", mm, 2 * math.exp(lam * t * (0.5 + lam)) * f0.moment_xv(lam), se))
    ei = np.exp(lam / (t - s) * sup_inc)
    mm, se = _mean_se(ei)
    out.append(BoundCheck("exp_moment_increment", mm, math.exp(lam / 2 * (5 + lam)) * f0.exp_moment_w(lam), se))
    mm, se = _mean_se(np.abs(st.v))
    out.append(BoundCheck("mean_abs_w", mm, math.exp(-t) * f0.mean_abs_w() + 2.0, se))
    mm, se = _mean_se(inc)
    out.append(BoundCheck("mean_abs_increment", mm, (t - s) * (f0.mean_abs_w() + 3.0), se))
    return out


def increment_tail_check(cfg: ExperimentConfig, fields: FieldHistory | None = None,
                         m_samples: int = 10000, betas=(0.5, 1.0, 2.0, 4.0)) -> conc.TailCurve:
    """Deviation of ``sup |Y_u - Y_s|`` over a window ending at t_end."""
    lam = cfg.lam
    t = cfg.t_end
    fields = zero_field(t) if fields is None else fields
    n_win = max(1, int(math.floor(min(1 / 16, lam**-2) / cfg.dt + 1e-9)))
    s = max(0.0, t - n_win * cfg.dt)
    noise = NoiseStreamSpec(cfg.seed, 0).replica(1_000_001)
    _, sup_inc, _ = _linear_paths(cfg.f0, fields, cfg.integrator(t), noise, m_samples, (s, t))
    c = conc.c_lambda(lam, math.log(cfg.f0.exp_moment_w(lam)))
    betas = np.asarray(betas, dtype=float)
    thr = (t - s) * (c + betas)
    return conc.TailCurve(thr, conc.exceedance(sup_inc, thr), conc.increment_bound(betas, lam),
                          m_samples, "increment")


# ---------------------------------------------------------------------------
# sup-in-time discrete infinity norm of the copies


@dataclass(frozen=True)
class _SnapshotTask:
    f0: F0Spec
    fields: FieldHistory
    integ: IntegratorConfig
    seed: int
    replica: int
    n: int
    stride: int


def _snapshot_replica(task: _SnapshotTask) -> np.ndarray:
    noise = NoiseStreamSpec(task.seed, task.replica)
    x0, v0 = task.f0.sample(noise.initial_generator(), task.n)
    snaps = [x0.copy()]
    st = ParticleState(x0, v0)
    incr = GaussianIncrements(noise, task.n)
    steps = task.integ.step_sizes()
    t = 0.0
    for k, h in enumerate(steps, start=1):
        step_linear_sde(st, task.fields.at(field_time(t, h, task.integ.scheme)), h, incr.next(),
                        task.integ.scheme)
        t = task.integ.t_end if k == steps.size else t + h
        if k % task.stride == 0 or k == steps.size:
            snaps.append(st.x.copy())
    return np.array(snaps)


def infnorm_deviation_study(cfg: ExperimentConfig, solution: PDESolution, n: int, replicas: int,
                            stride: int = 10) -> conc.TailCurve:
    tasks = [_SnapshotTask(cfg.f0, solution.fields, cfg.integrator(), cfg.seed, r, n, stride)
             for r in range(replicas)]
    paths = np.array(map_replicas(_snapshot_replica, tasks, cfg.threads))
    lam = cfg.lam
    c = conc.c_lambda(lam, math.log(cfg.f0.exp_moment_w(lam)))
    return conc.sup_infnorm_deviation(paths, cfg.infnorm_eps, cfg.gammas, solution.kappa, lam,
                                      cfg.t_end, c, cfg.f0.moment_xv(lam))


# ---------------------------------------------------------------------------
# mollification Cauchy estimate


def cauchy_bound(t: float, eta: float, eta_prime: float, lam: float, f0_norm: float) -> float:
    """``(3/2)(eta + eta') exp((1 + 8K) t)`` with the exponential-tail density bound K."""
    e = eta + eta_prime
    k = 4.0 / lam * math.exp(t + lam / 2 + lam**2 / 2) * math.exp(lam * e) * f0_norm
    return 1.5 * e * math.exp((1.0 + 8.0 * k) * t)


@dataclass(frozen=True)
class _PairTask:
    f0: F0Spec
    fields_a: FieldHistory
    fields_b: FieldHistory
    eta_a: float
    eta_b: float
    integ: IntegratorConfig
    seed: int
    replica: int
    n: int


def _pair_replica(task: _PairTask) -> float:
    noise = NoiseStreamSpec(task.seed, task.replica)
    g = noise.initial_generator()
    y0, w0 = task.f0.sample(g, task.n)
    u = sample_bump(g, task.n)
    v = sample_bump(g, task.n)
    a = ParticleState(y0 + task.eta_a * u, w0 + task.eta_a * v)
    b = ParticleState(y0 + task.eta_b * u, w0 + task.eta_b * v)
    sup = np.abs(a.x - b.x) + np.abs(a.v - b.v)
    incr = GaussianIncrements(noise, task.n)
    steps = task.integ.step_sizes()
    t = 0.0
    for k, h in enumerate(steps, start=1):
        xi = incr.next()
        tf = field_time(t, h, task.integ.scheme)
        step_linear_sde(a, task.fields_a.at(tf), h, xi, task.integ.scheme)
        step_linear_sde(b, task.fields_b.at(tf), h, xi, task.integ.scheme)
        np.maximum(sup, np.abs(a.x - b.x) + np.abs(a.v - b.v), out=sup)
        t = task.integ.t_end if k == steps.size else t + h
    return float(sup.mean())


@dataclass
class CauchyResult:
    eta: float
    eta_prime: float
    t: float
    mean: float
    se: float
    bound: float
    per_replica: np.ndarray

    @property
    def check(self) -> BoundCheck:
        return BoundCheck(f"cauchy_eta{self.eta:g}_{self.eta_prime:g}", self.mean, self.bound, self.se)


def cauchy_eta_check(cfg: ExperimentConfig, eta: float | None = None, eta_prime: float | None = None,
                     t: float | None = None, n: int | None = None,
                     replicas: int | None = None) -> CauchyResult:
    eta = cfg.eta if eta is None else eta
    eta_prime = cfg.eta_prime if eta_prime is None else eta_prime
    if not (eta > 0 and eta_prime > 0):
        raise ValueError("eta and eta_prime must be positive")
    t = cfg.cauchy_t if t is None else t
    n = cfg.cauchy_n if n is None else n
    replicas = cfg.cauchy_replicas if replicas is None else replicas
    sol_a = reference_solution(cfg, t, eta)
    sol_b = sol_a if eta_prime == eta else reference_solution(cfg, t, eta_prime)
    tasks = [_PairTask(cfg.f0, sol_a.fields, sol_b.fields, eta, eta_prime, cfg.integrator(t),
                       cfg.seed, r, n) for r in range(replicas)]
    vals = np.array(map_replicas(_pair_replica, tasks, cfg.threads))
    m, se = _mean_se(vals)
    bound = cauchy_bound(t, eta, eta_prime, cfg.lam, cfg.f0.norm_e(cfg.lam * math.exp(-t)))
    return CauchyResult(eta, eta_prime, t, m, se, bound, vals)


# ---------------------------------------------------------------------------
# W1 profile against the grid solution


def sample_from_grid(f: GridDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    """Systematic sample of n points proportional to cell mass, jittered inside cells."""
    p = f.values.ravel() * f.dx * f.dv
    cum = np.cumsum(p)
    cum /= cum[-1]
    u = (np.arange(n) + rng.uniform()) / n
    idx = np.minimum(np.searchsorted(cum, u, side="right"), p.size - 1)
    ix, iv = np.unravel_index(idx, f.values.shape)
    x = f.x_min + (ix + rng.uniform(size=n)) * f.dx
    v = f.v_min + (iv + rng.uniform(size=n)) * f.dv
    return np.column_stack([x, v])


# exact assignment is cubic; larger clouds are skipped in the W1 profile
ASSIGNMENT_CAP = 1024


def w1_profile_check(cfg: ExperimentConfig, solution: PDESolution, n_list: Sequence[int],
                     replicas: int = 4) -> list[dict]:
    """W1 between particle clouds and grid samples at the final time, per N."""
    final = solution.final()
    rows = []
    for n in n_list:
        vals = []
        for r in range(replicas):
            noise = NoiseStreamSpec(cfg.seed, r)
            x0, v0 = cfg.f0.sample(noise.initial_generator(), n)
            st = simulate_coupled(x0, v0, cfg.kernel, None, cfg.integrator(solution.times[-1]), noise)
            cloud = np.column_stack([st.particles.x, st.particles.v])
            grid_pts = sample_from_grid(final, n, noise.aux_generator(3))
            vals.append(w1_2d_exact(cloud, grid_pts))
        m, se = _mean_se(vals)
        scale = math.log(1 + n) / math.sqrt(n)
        rows.append({"N": n, "w1": m, "se": se, "ratio": m / scale})
    return rows


# ---------------------------------------------------------------------------
# PDE diagnostics


def fk_norm_bound(t: float, lam: float, f0_norm_shrunk: float) -> float:
    """``2 exp(t + lam + lam^2/2) ||f0||_{e, lam e^-t}``."""
    return 2.0 * math.exp(t + lam + lam**2 / 2) * f0_norm_shrunk


def rho_sup_bound(t: float, lam: float, f0_norm_shrunk: float, eta: float = 0.0) -> float:
    """``(4/lam) exp(t + lam/2 + lam^2/2 + lam eta) ||f0||_{e, lam e^-t}``."""
    return 4.0 / lam * math.exp(t + lam / 2 + lam**2 / 2 + lam * eta) * f0_norm_shrunk


def gaussian_abs_moment(gamma: float) -> float:
    """``E |Z|^gamma`` for a standard normal Z."""
    return 2.0 ** (gamma / 2) * math.gamma((gamma + 1) / 2) / math.sqrt(math.pi)


def c_gamma(gamma: float) -> float:
    """``2^{3 gamma/2} (1 + 2^gamma m_gamma)`` of the polynomial-tail estimate."""
    return 2.0 ** (1.5 * gamma) * (1.0 + 2.0**gamma * gaussian_abs_moment(gamma))


def fk_poly_bound(t: float, gamma: float, f0_norm_p: float, eta: float = 0.0) -> float:
    """``||f0||_{p,gamma} <eta>^gamma C_gamma exp((1 + gamma) t)``."""
    return f0_norm_p * (1 + eta * eta) ** (gamma / 2) * c_gamma(gamma) * math.exp((1 + gamma) * t)


def rho_sup_poly_bound(t: float, gamma: float, f0_norm_p: float, eta: float = 0.0) -> float:
    """``2 gamma/(gamma - 1) C_gamma exp((1 + gamma) t) <eta>^gamma ||f0||_{p,gamma}``."""
    if gamma <= 1:
        raise ValueError("the density bound needs gamma > 1")
    return 2 * gamma / (gamma - 1) * fk_poly_bound(t, gamma, f0_norm_p, eta)


def pde_checks(sol: PDESolution, f0_grid: GridDensity, mass_tol: float = 1e-4,
               boundary_tol: float = 1e-6, gamma: float = 2.0) -> list[BoundCheck]:
    lam = sol.lam
    drift = float(np.max(np.abs(sol.raw_mass - 1.0)))
    checks = [BoundCheck("pde_mass_drift", drift, mass_tol),
              BoundCheck("pde_boundary_mass", float(sol.boundary_mass.max()), boundary_tol)]
    worst_fk = -math.inf
    worst_rho = -math.inf
    fk_emp = fk_b = rho_emp = rho_b = 0.0
    for k, t in enumerate(sol.times):
        shrunk = weighted_norm_e(f0_grid, lam * math.exp(-t))
        b = fk_norm_bound(t, lam, shrunk)
        if sol.norm_e[k] / b > worst_fk:
            worst_fk, fk_emp, fk_b = sol.norm_e[k] / b, sol.norm_e[k], b
        b = rho_sup_bound(t, lam, shrunk)
        if sol.rho_sup[k] / b > worst_rho:
            worst_rho, rho_emp, rho_b = sol.rho_sup[k] / b, sol.rho_sup[k], b
    checks.append(BoundCheck("fk_weighted_norm", float(fk_emp), float(fk_b)))
    checks.append(BoundCheck("rho_sup", float(rho_emp), float(rho_b)))

    # polynomial-tail branch: norms need full snapshots, the density sup is per step
    p0 = weighted_norm_p(f0_grid, gamma)
    worst = max(((weighted_norm_p(f, gamma), fk_poly_bound(t, gamma, p0)) for t, f in sol.snapshots),
                key=lambda pair: pair[0] / pair[1])
    checks.append(BoundCheck("poly_weighted_norm", float(worst[0]), float(worst[1])))
    bounds = np.array([rho_sup_poly_bound(float(t), gamma, p0) for t in sol.times])
    k = int(np.argmax(sol.rho_sup / bounds))
    checks.append(BoundCheck("rho_sup_poly", float(sol.rho_sup[k]), float(bounds[k])))
    return checks


def pde_self_convergence(f0: F0Spec, spec: KernelSpec, t: float,
                         levels: Sequence[tuple[int, float]] = ((64, 0.04), (128, 0.02), (256, 0.01)),
                         bounds=(-8.0, 8.0, -8.0, 8.0)) -> tuple[np.ndarray, np.ndarray]:
    """Successive differences of rho_t under joint grid and step refinement.

    Each density is averaged onto the coarsest x cells before comparison.
    Returns (differences, observed orders).
    """
    coarse = levels[0][0]
    rhos = []
    for n, dt in levels:
        g = GridDensity.from_function(f0.density, *bounds, nx=n, nv=n)
        sol = solve_vpfp(g, spec, dt, t, boundary_tol=None)
        r = rho_from_f(sol.final()).values
        rhos.append(r.reshape(coarse, -1).mean(axis=1))
    diffs = np.array([np.max(np.abs(a - b)) for a, b in zip(rhos[:-1], rhos[1:])])
    ratios = np.array([lv[1] for lv in levels])
    orders = np.log(diffs[:-1] / diffs[1:]) / np.log(ratios[:-2] / ratios[1:-1])
    return diffs, orders
