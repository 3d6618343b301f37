import math

import numpy as np
import pytest
from scipy import integrate, linalg, stats

from vpfp_lab.experiments import F0Spec
from vpfp_lab.kernel import Interaction, KernelSpec
from vpfp_lab.meanfield import (Density1D, DomainTooSmallError, FieldHistory, FieldTable,
                                GridDensity, bump_weights, discrete_gaussian_stencil,
                                field_from_rho, fk_density_estimate, mollify_grid, rho_from_f,
                                solve_vpfp, vpfp_step, weighted_norm_e, weighted_norm_p)

REP = KernelSpec(Interaction.REPULSIVE)
FREE = KernelSpec(Interaction.FREE)
GAUSS = F0Spec()


def gaussian_grid(n=128, bounds=(-8, 8, -8, 8), f0=GAUSS):
    return GridDensity.from_function(f0.density, *bounds, nx=n, nv=n)


def test_field_examples():
    uni = Density1D(0.0, 0.01, np.ones(100))
    assert field_from_rho(uni, REP)(0.25) == pytest.approx(-0.25, abs=1e-12)
    assert field_from_rho(uni, REP)(5.0) == 0.5
    sym = Density1D(-1.0, 0.1, stats.norm.pdf(np.linspace(-0.95, 0.95, 20)))
    assert field_from_rho(sym, REP)(0.0) == pytest.approx(0.0, abs=1e-14)
    assert field_from_rho(uni, KernelSpec(Interaction.ATTRACTIVE))(0.25) == pytest.approx(0.25)


def test_field_table_bounded_and_lipschitz():
    g = gaussian_grid()
    rho = rho_from_f(g)
    table = field_from_rho(rho, REP)
    assert np.all(np.abs(table.values) <= 0.5)
    assert table.lipschitz() <= rho.sup() * (1 + 1e-3)
    mollified = field_from_rho(rho, KernelSpec(Interaction.REPULSIVE, 0.3))
    np.testing.assert_allclose(mollified(np.array([-6.0, 0.0, 6.0])), table(np.array([-6.0, 0.0, 6.0])),
                               atol=1e-3)


def test_field_history_interpolates_in_time():
    a, b = FieldTable.constant(0.0), FieldTable.constant(0.4)
    h = FieldHistory.from_tables([0.0, 1.0], [a, b])
    assert h.at(0.25)(3.0) == pytest.approx(0.1)
    assert h.covers(1.0) and not h.covers(1.1)
    with pytest.raises(ValueError):
        h.at(2.0)


def test_rho_marginals():
    g = GridDensity.from_function(lambda x, v: np.exp(-np.abs(x)) * stats.norm.pdf(v),
                                  -10, 10, -8, 8, 200, 64)
    rho = rho_from_f(g)
    np.testing.assert_allclose(rho.values, 0.5 * np.exp(-np.abs(rho.centers)), rtol=2e-2, atol=1e-4)
    gauss = rho_from_f(gaussian_grid(256))
    assert np.max(np.abs(gauss.values - stats.norm.pdf(gauss.centers))) < 1e-3
    point = np.zeros((8, 8))
    point[3, 5] = 1.0
    rho = rho_from_f(GridDensity(0, 8, 0, 8, point))
    assert np.flatnonzero(rho.values).tolist() == [3]


def test_weighted_norms():
    z = GridDensity(-1, 1, -1, 1, np.zeros((4, 4)))
    assert weighted_norm_e(z, 1.0) == 0.0 and weighted_norm_p(z, 2.0) == 0.0
    # cell centred at v = 0 with value 3
    one = np.zeros((3, 3))
    one[1, 1] = 3.0
    g = GridDensity(-1.5, 1.5, -1.5, 1.5, one)
    assert weighted_norm_e(g, 1.0) == 3.0 and weighted_norm_p(g, 1.0) == 3.0
    fine = GridDensity.from_function(GAUSS.density, -4, 4, -8, 8, 33, 1601, normalize=False)
    assert weighted_norm_e(fine, 1.0) == pytest.approx(GAUSS.norm_e(1.0), rel=1e-4)


def test_stencils_have_unit_mass_and_exact_variance():
    for sig in (0.05, 0.3, 2.5):
        w = discrete_gaussian_stencil(sig)
        k = np.arange(w.size) - w.size // 2
        assert w.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.sum(k * k * w) == pytest.approx(sig * sig, rel=1e-9)
    b = bump_weights(0.3, 0.05)
    assert b.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(b, b[::-1], atol=1e-16)


def test_mollify_grid_identity_and_mass():
    g = gaussian_grid(64)
    np.testing.assert_array_equal(mollify_grid(g, 0.0).values, g.values)
    assert mollify_grid(g, 0.3).mass() == pytest.approx(1.0, abs=1e-10)


def test_step_keeps_mass_and_positivity():
    g = gaussian_grid(64)
    diag = {}
    out = vpfp_step(g, REP, 0.05, diagnostics=diag)
    assert out.mass() == pytest.approx(1.0, abs=1e-12)
    assert np.all(out.values >= 0)
    assert abs(diag["raw_mass"] - 1.0) < 1e-4
    with pytest.raises(ValueError):
        vpfp_step(g, REP, 0.2)


def test_free_equation_keeps_standard_velocity_marginal():
    f0 = F0Spec(x_std=0.3)
    sol = solve_vpfp(gaussian_grid(128, f0=f0), FREE, 0.02, 0.5)
    f = sol.final()
    marg = f.values.sum(axis=0) * f.dx
    assert np.max(np.abs(marg - stats.norm.pdf(f.v))) < 2e-3


def test_half_steps_agree_to_second_order():
    g = gaussian_grid(128)
    diffs = []
    for dt in (4e-3, 2e-3, 1e-3):
        a = vpfp_step(g, REP, dt)
        b = vpfp_step(vpfp_step(g, REP, dt / 2), REP, dt / 2)
        diffs.append(np.abs(a.values - b.values).max())
    ratios = np.array(diffs[:-1]) / np.array(diffs[1:])
    assert np.all(ratios > 3.0), diffs


def test_small_domain_is_flagged():
    g = gaussian_grid(32, bounds=(-2.5, 2.5, -8, 8))
    with pytest.raises(DomainTooSmallError):
        solve_vpfp(g, REP, 0.05, 0.2)
    sol = solve_vpfp(g, REP, 0.05, 0.2, boundary_tol=None)
    assert sol.boundary_mass.max() > 1e-6


def test_solution_bookkeeping():
    sol = solve_vpfp(gaussian_grid(64), REP, 0.03, 0.1, snapshot_stride=2)
    np.testing.assert_allclose(sol.times, [0, 0.03, 0.06, 0.09, 0.1])
    assert [round(t, 12) for t, _ in sol.snapshots] == [0.0, 0.06, 0.1]
    assert sol.fields.t_end == pytest.approx(0.1)
    assert sol.kappa == sol.rho_sup.max()
    assert 0 < sol.rho_sup_integral() < 0.1 * sol.kappa + 1e-12


def _free_kinetic_gaussian(t, mean0, cov0):
    """Law at time t of dX = V dt, dV = -V dt + sqrt(2) dB from a Gaussian start."""
    a = np.array([[0.0, 1.0], [0.0, -1.0]])
    q = np.array([[0.0, 0.0], [0.0, 2.0]])
    e = linalg.expm(a * t)
    noise, _ = integrate.quad_vec(lambda s: linalg.expm(a * s) @ q @ linalg.expm(a * s).T, 0, t)
    return e @ mean0, e @ cov0 @ e.T + noise


def test_fk_estimate_at_time_zero_is_exact():
    g = gaussian_grid(64)
    hist = FieldHistory.constant(FieldTable.constant(0.0), 1.0)
    val, se = fk_density_estimate(g, hist, 0.0, 0.125, -0.125, 10, np.random.default_rng(0))
    assert se == 0.0
    assert val == pytest.approx(g.interpolate(0.125, -0.125))


def test_fk_estimate_matches_free_ou_law():
    t = 0.5
    hist = FieldHistory.constant(FieldTable.constant(0.0), t)
    mean, cov = _free_kinetic_gaussian(t, np.array([0.3, -0.2]), np.diag([0.5, 1.5]))
    f0 = F0Spec(x_mean=0.3, x_std=math.sqrt(0.5), v_mean=-0.2, v_std=math.sqrt(1.5))
    rng = np.random.default_rng(12)
    for x, v in [(0.0, 0.0), (0.8, -0.6), (-0.5, 1.0)]:
        est, se = fk_density_estimate(f0.density, hist, t, x, v, 40000, rng, dt=2e-3)
        exact = stats.multivariate_normal(mean, cov).pdf([x, v])
        assert abs(est - exact) <= 3 * se + 1e-3 * exact, (x, v, est, exact, se)


def test_fk_estimate_matches_pde_grid():
    t = 0.25
    g = gaussian_grid(128)
    sol = solve_vpfp(g, REP, 0.01, t)
    rng = np.random.default_rng(13)
    for x, v in [(0.0, 0.0), (0.7, 0.4), (-1.0, -0.3)]:
        est, se = fk_density_estimate(g, sol.fields, t, x, v, 40000, rng, dt=5e-3)
        grid_val = sol.final().interpolate(x, v)
        assert abs(est - grid_val) <= 3 * se + 2e-3, (x, v, est, grid_val, se)
