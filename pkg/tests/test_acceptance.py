"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Tolerances are pinned here; the heavy runs use the full-size settings.
"""

import filecmp
import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats

from vpfp_lab import concentration as conc
from vpfp_lab import experiments as ex
from vpfp_lab.cli import main
from vpfp_lab.dynamics import IntegratorConfig, simulate_linear
from vpfp_lab.experiments import ExperimentConfig, F0Spec
from vpfp_lab.kernel import KernelSpec, mean_force_brute, mean_force_ranks, rope_majorant_holds
from vpfp_lab.meanfield import FieldHistory, FieldTable
from vpfp_lab.metrics import discrete_inf_norm, w1_1d, w1_2d_exact
from vpfp_lab.noise import NoiseStreamSpec

pytestmark = pytest.mark.acceptance

SEED = 20240601
SLOPE_RANGE = (-0.65, -0.35)
EXACT_TOL = 1e-12
MASS_TOL = 1e-4
BOUNDARY_TOL = 1e-6
MIN_ORDER = 1.5
KS_TOL = 0.01
SMOKE_SECONDS = 60.0


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def reference():
    cfg = ExperimentConfig(seed=SEED)
    return cfg, ex.reference_solution(cfg)


def test_01_chaos_rate(report, reference):
    cfg, sol = reference
    res = ex.chaos_rate_sweep(cfg, sol)
    means = ", ".join(f"N={r['N']}:{r['mean']:.4g}<={r['bound']:.3g}" for r in res.rows)
    ok = SLOPE_RANGE[0] <= res.slope <= SLOPE_RANGE[1] and res.bounds_hold()
    report(1, "chaos rate", ok, f"slope={res.slope:.3f}+-{res.slope_se:.3f} in {SLOPE_RANGE}; {means}")


def test_02_fluctuation_means(report):
    checks, _ = ex.fluctuation_checks(ExperimentConfig(seed=SEED), n_lambda=100, r_lambda=2000,
                                      n_gamma=400, r_gamma=200)
    detail = "; ".join(f"{c.name}={c.empirical:.4g}+-{c.se:.2g}<={c.bound:.4g}" for c in checks)
    report(2, "Lambda/Gamma mean bounds", all(c.passed for c in checks), detail)


def test_03_binomial(report):
    n, p, alpha, r = 200, 0.3, 0.1, 100_000
    curve = conc.binomial_tail_check(n, p, alpha, r, NoiseStreamSpec(SEED).aux_generator(12))
    emp, bound = float(curve.empirical[0]), float(curve.bound[0])
    exact = conc.binomial_tail_exact(n, p, alpha)
    se = math.sqrt(exact * (1 - exact) / r)
    ok = emp <= bound and abs(emp - exact) <= 3 * se and exact <= bound
    report(3, "binomial deviation", ok,
           f"empirical={emp:.5f} exact={exact:.5f} (3se={3 * se:.5f}) bound={bound:.5f}")


def test_04_lambda_deviation(report):
    n, r, alpha = 100, 2000, 0.25
    rng = NoiseStreamSpec(SEED).aux_generator(10)
    f0 = F0Spec()
    spec = KernelSpec()
    curve = conc.lambda_deviation_check(rng.normal(size=(r, n)), f0.field(spec), [alpha], spec)
    emp, bound = float(curve.empirical[0]), float(curve.bound[0])
    ok = emp <= bound + 3 * math.sqrt(bound / r)
    report(4, "Lambda deviation", ok, f"alpha={alpha} empirical={emp:.5f} bound={bound:.3e}")


def _perm_matching(a, b):
    cost = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    return min(sum(cost[i, q[i]] for i in range(len(a))) for q in itertools.permutations(range(len(a)))) / len(a)


def _window_scan(y, eps):
    y = [float(t) for t in y]
    return max(sum(1 for q in y if p <= q <= p + 2 * eps) for p in y) / (2 * len(y) * eps)


def _gamma_scan(y, cdf):
    out = []
    for i in range(y.size):
        others = np.delete(y, i)
        d = np.abs(others - y[i])
        u = np.concatenate([np.linspace(0.0, d.max() + 1.0, 4001), d, np.maximum(d - 1e-13, 0.0)])
        emp = (np.abs(others[None, :] - y[i]) <= u[:, None]).mean(axis=1)
        out.append(np.max(np.abs(emp - (cdf(y[i] + u) - cdf(y[i] - u)))))
    return np.array(out)


def test_05_oracle_equivalences(report):
    rng = np.random.default_rng(SEED)
    spec = KernelSpec()
    force_bad = 0
    for _ in range(1000):
        x = np.round(rng.normal(size=int(rng.integers(1, 60))), int(rng.integers(0, 3)))
        force_bad += int(np.count_nonzero(mean_force_ranks(spec, x) != mean_force_brute(spec, x)))

    line_err = 0.0
    for theta in (0.0, 0.3, 1.1, math.pi / 2, 2.5):
        d = np.array([math.cos(theta), math.sin(theta)])
        s, t = rng.normal(size=50), rng.normal(size=50)
        scale = abs(d[0]) + abs(d[1])
        line_err = max(line_err, abs(w1_2d_exact(s[:, None] * d, t[:, None] * d) - scale * w1_1d(s, t)))

    perm_err = 0.0
    for _ in range(3):
        a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        perm_err = max(perm_err, abs(w1_2d_exact(a, b) - _perm_matching(a, b)))

    inf_bad = 0
    for _ in range(200):
        n = int(rng.integers(1, 51))
        y = np.round(rng.uniform(-1, 1, n), int(rng.integers(1, 4)))
        eps = float(rng.choice([0.05, 0.1, 0.25]))
        inf_bad += discrete_inf_norm(y, eps) != _window_scan(y, eps)

    gamma_err = 0.0
    for _ in range(20):
        y = rng.normal(size=int(rng.integers(2, 51)))
        gamma_err = max(gamma_err, np.max(np.abs(conc.gamma_terms(y, stats.norm.cdf)
                                                 - _gamma_scan(y, stats.norm.cdf))))
    ok = (force_bad == 0 and line_err <= EXACT_TOL and perm_err <= EXACT_TOL and inf_bad == 0
          and gamma_err <= EXACT_TOL)
    report(5, "oracle equivalences", ok,
           f"force mismatches={force_bad} line={line_err:.1e} perm={perm_err:.1e} "
           f"infnorm mismatches={inf_bad} gamma={gamma_err:.1e}")


def test_06_pde_solver(report, reference):
    cfg, sol = reference
    checks = {c.name: c for c in ex.pde_checks(sol, sol.snapshots[0][1], MASS_TOL, BOUNDARY_TOL)}
    f0 = cfg.f0
    diffs, orders = ex.pde_self_convergence(f0, cfg.kernel, 1.0)
    ok = all(c.passed for c in checks.values()) and np.all(orders >= MIN_ORDER)
    report(6, "PDE solver", ok,
           f"mass drift={checks['pde_mass_drift'].empirical:.2e} "
           f"boundary={checks['pde_boundary_mass'].empirical:.2e} "
           f"fk norm={checks['fk_weighted_norm'].empirical:.4f}<={checks['fk_weighted_norm'].bound:.4f} "
           f"order={', '.join(f'{o:.2f}' for o in orders)}")


def test_07_ou_exactness(report):
    n, t, v0 = 100_000, 1.0, 1.5
    free = FieldHistory.constant(FieldTable.constant(0.0), t)
    st = simulate_linear(np.zeros(n), np.full(n, v0), free, IntegratorConfig(0.01, t),
                         NoiseStreamSpec(SEED))
    ks = stats.kstest(st.v, stats.norm(v0 * math.exp(-t), math.sqrt(1 - math.exp(-2 * t))).cdf).statistic

    f0 = F0Spec()
    x, w = f0.sample(NoiseStreamSpec(SEED, 1).initial_generator(), n)
    moved = simulate_linear(x, w, free, IntegratorConfig(0.01, t), NoiseStreamSpec(SEED, 1))
    absw = np.abs(moved.v)
    mean, se = absw.mean(), absw.std(ddof=1) / math.sqrt(n)
    bound = math.exp(-t) * f0.mean_abs_w() + 2.0
    ok = ks < KS_TOL and mean <= bound + 3 * se
    report(7, "OU exactness", ok, f"KS={ks:.4f}<{KS_TOL}; E|W_t|={mean:.4f}<={bound:.4f}")


def test_08_rope(report):
    rng = np.random.default_rng(SEED)
    m = 1_000_000
    q = rng.normal(size=(4, m))
    # force near-ties in a fifth of the samples
    tie = rng.uniform(size=m) < 0.2
    q[2] = np.where(tie, q[0] + rng.normal(scale=1e-9, size=m), q[2])
    q[3] = np.where(rng.uniform(size=m) < 0.1, q[2], q[3])
    violations = int(np.count_nonzero(~rope_majorant_holds(*q)))
    report(8, "rope inequality", violations == 0, f"{violations} violations in {m} quadruples")


def test_09_cauchy(report):
    cfg = ExperimentConfig(seed=SEED)
    res = ex.cauchy_eta_check(cfg, eta=0.2, eta_prime=0.1, t=0.5, replicas=64)
    report(9, "mollification Cauchy bound", res.mean <= res.bound,
           f"mean={res.mean:.4f}+-{res.se:.4f} <= bound={res.bound:.4g} (N={cfg.cauchy_n})")


def test_10_reproducibility(report, tmp_path, capsys):
    elapsed = []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        code = main(["check", "--seed", "42", "--out", str(tmp_path / name)])
        elapsed.append(time.perf_counter() - t0)
        assert code == 0
    sim = ["simulate", "--seed", "42", "--override", "simulate.n=64",
           "--override", "integrator.t_end=0.25", "--override", "pde.nx=64", "--override", "pde.nv=64"]
    for name in ("c", "d"):
        assert main([*sim, "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    names = ["check.csv"]
    sim_names = ["trajectory.csv", "stats.csv", "series.csv"]
    same = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)[0] == names
    same &= filecmp.cmpfiles(tmp_path / "c", tmp_path / "d", sim_names, shallow=False)[0] == sim_names
    ok = same and max(elapsed) < SMOKE_SECONDS
    report(10, "reproducibility", ok,
           f"identical CSVs={same}; check runs took {elapsed[0]:.1f}s and {elapsed[1]:.1f}s")
