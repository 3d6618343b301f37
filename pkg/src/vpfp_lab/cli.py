"""Command-line entry point: ``vpfp-lab {simulate,chaos-rate,concentration,pde,check}``.

Exit codes: 0 success, 1 failed assertion (``check``), 2 usage or config
error, 3 numerical guard (e.g. mass reaching the edge of the PDE domain).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import concentration as conc
from . import experiments as ex
from .config import ConfigError, LabConfig, config_dict, load_config
from .dynamics import simulate_coupled
from .kernel import (Interaction, KernelSpec, mean_force_brute, mean_force_ranks,
                     rope_majorant_holds, sample_bump)
from .meanfield import DomainTooSmallError, field_from_rho, rho_from_f, weighted_norm_e
from .noise import NoiseStreamSpec
from .output import write_csv, write_json

log = logging.getLogger("vpfp_lab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class _Run:
    """Collects outputs and timings for the manifest of one command."""

    def __init__(self, command: str, cfg: LabConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def csv(self, name: str, header, rows) -> Path:
        p = write_csv(self.out / name, header, rows)
        self.outputs.append(str(p))
        return p

    def timed(self, key: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[key] = time.perf_counter() - t0

    def manifest(self, passed: bool, summary: dict) -> Path:
        m = {
            "tool": "vpfp-lab",
            "version": __version__,
            "command": self.command,
            "seed": self.cfg.experiment.seed,
            "config": config_dict(self.cfg),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "outputs": list(self.outputs),
            "passed": bool(passed),
            "summary": summary,
            "timings_seconds": self.timings,
        }
        return write_json(self.out / "manifest.json", m)


def _tail_checks(curve: conc.TailCurve) -> list[ex.BoundCheck]:
    out = []
    for thr, emp, b, vac in curve.rows():
        bb = min(max(b, 0.0), 1.0)
        out.append(ex.BoundCheck(f"{curve.name}@{thr:.4g}", emp, b,
                                 math.sqrt(bb * (1 - bb) / curve.replicas), vac))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(run: _Run) -> int:
    cfg = run.cfg
    e = cfg.experiment
    sol = run.timed("pde", ex.reference_solution, e, None, cfg.kernel_eta)
    spec = KernelSpec(Interaction(e.interaction), cfg.kernel_eta)
    noise = NoiseStreamSpec(e.seed, 0)
    x0, v0 = e.f0.sample(noise.initial_generator(), cfg.simulate.n)
    if cfg.kernel_eta > 0:
        # with a mollified kernel both systems start from the mollified law
        g = noise.aux_generator(1)
        x0 = x0 + cfg.kernel_eta * sample_bump(g, x0.size)
        v0 = v0 + cfg.kernel_eta * sample_bump(g, x0.size)
    st = run.timed("particles", simulate_coupled, x0, v0, spec, sol.fields, e.integrator(), noise,
                   record_every=cfg.simulate.record_every,
                   record_particles=cfg.simulate.record_particles)
    run.csv("trajectory.csv", ["step", "t", "i", "x", "v", "y", "w"], st.trajectory)
    run.csv("stats.csv", ["i", "sup_dx", "sup_dv"],
            zip(range(st.sup_dx.size), st.sup_dx, st.sup_dv))
    run.csv("series.csv", ["t", "mean_discrepancy"], zip(st.series_t, st.series_discrepancy))
    d = float(np.mean(st.sup_dx + st.sup_dv))
    bound = ex.chaos_bound(cfg.simulate.n, e.t_end, sol.rho_sup_integral(e.t_end))
    summary = {"N": cfg.simulate.n, "discrepancy": d, "chaos_bound": bound, "kappa_t": sol.kappa}
    print(f"N={cfg.simulate.n} discrepancy={d:.6g} bound={bound:.6g}")
    run.manifest(True, summary)
    return EXIT_OK


def cmd_chaos_rate(run: _Run) -> int:
    e = run.cfg.experiment
    sol = run.timed("pde", ex.reference_solution, e)
    res = run.timed("sweep", ex.chaos_rate_sweep, e, sol)
    run.csv("chaos_rate.csv", ["N", "mean", "se", "bound", "replicas"],
            [(r["N"], r["mean"], r["se"], r["bound"], r["replicas"]) for r in res.rows])
    for r in res.rows:
        run.timings[f"N{r['N']}"] = r["seconds"]
        print(f"N={r['N']:6d} mean={r['mean']:.5g} se={r['se']:.2g} bound={r['bound']:.5g}")
    print(f"slope={res.slope:.4f} +- {res.slope_se:.4f}")
    w1 = run.timed("w1_profile", ex.w1_profile_check, e, sol,
                   [n for n in e.n_list if n <= ex.ASSIGNMENT_CAP])
    run.csv("w1_profile.csv", ["N", "w1", "se", "ratio"],
            [(r["N"], r["w1"], r["se"], r["ratio"]) for r in w1])
    summary = {"slope": res.slope, "slope_se": res.slope_se, "rho_integral": res.rho_integral,
               "kappa_t": res.kappa_t, "bounds_hold": res.bounds_hold(),
               "slope_in_range": bool(-0.65 <= res.slope <= -0.35)}
    run.manifest(res.bounds_hold(), summary)
    return EXIT_OK


def cmd_concentration(run: _Run) -> int:
    e = run.cfg.experiment
    sol = run.timed("pde", ex.reference_solution, e)
    res = run.timed("coupling", ex.concentration_sweep, e, sol)
    header = ["threshold", "empirical", "bound", "vacuous"]
    run.csv("coupling_tail.csv", header, res.curve.rows())
    curves = [res.curve]
    inf_curve = run.timed("infnorm", ex.infnorm_deviation_study, e, sol, e.concentration_n,
                          e.concentration_replicas)
    run.csv("infnorm_tail.csv", header, inf_curve.rows())
    inc_curve = run.timed("increment", ex.increment_tail_check, e, sol.fields, e.moment_samples)
    run.csv("increment_tail.csv", header, inc_curve.rows())
    checks, lam_curve = run.timed("fluctuation", ex.fluctuation_checks, e)
    run.csv("lambda_tail.csv", header, lam_curve.rows())
    bin_curve = conc.binomial_tail_check(200, 0.3, 0.1, 100_000,
                                         NoiseStreamSpec(e.seed).aux_generator(12))
    run.csv("binomial_tail.csv", header, bin_curve.rows())
    curves += [inf_curve, inc_curve, lam_curve, bin_curve]
    led = asdict(res.constants)
    run.csv("constants.csv", ["name", "value"], sorted(led.items()))
    run.csv("fluctuation.csv", ["name", "empirical", "bound", "se", "passed"],
            [(c.name, c.empirical, c.bound, c.se, c.passed) for c in checks])
    ok = all(c.all_hold() for c in curves) and all(c.passed for c in checks)
    for c in curves:
        print(f"{c.name:24s} holds={c.all_hold()} vacuous={int(c.vacuous.sum())}/{c.vacuous.size}")
    run.manifest(ok, {"constants": led, "range_empty": res.range_empty,
                      "curves_hold": {c.name: c.all_hold() for c in curves}})
    return EXIT_OK


def cmd_pde(run: _Run) -> int:
    cfg = run.cfg
    e = cfg.experiment
    sol = run.timed("pde", ex.reference_solution, e, None, cfg.kernel_eta)
    spec = KernelSpec(Interaction(e.interaction), cfg.kernel_eta)
    index = []
    for k, (t, f) in enumerate(sol.snapshots):
        name = f"f_{k:04d}.csv"
        xs = np.repeat(f.x, f.nv)
        vs = np.tile(f.v, f.nx)
        run.csv(name, ["x", "v", "f"], zip(xs, vs, f.values.ravel()))
        table = field_from_rho(rho_from_f(f), spec)
        fname = f"field_{k:04d}.csv"
        run.csv(fname, ["x", "F"], zip(table.nodes, table.values))
        index.append((k, t, name, fname))
    run.csv("snapshots.csv", ["index", "t", "density_file", "field_file"], index)
    f0_grid = sol.snapshots[0][1]
    shrunk = [weighted_norm_e(f0_grid, sol.lam * math.exp(-t)) for t in sol.times]
    run.csv("norms.csv", ["t", "raw_mass", "boundary_mass", "rho_sup", "norm_e", "norm_e_bound",
                          "rho_sup_bound"],
            [(t, m, b, r, n, ex.fk_norm_bound(t, sol.lam, s), ex.rho_sup_bound(t, sol.lam, s, cfg.kernel_eta))
             for t, m, b, r, n, s in zip(sol.times, sol.raw_mass, sol.boundary_mass, sol.rho_sup,
                                         sol.norm_e, shrunk)])
    checks = ex.pde_checks(sol, f0_grid, boundary_tol=e.pde.boundary_tol)
    for c in checks:
        print(f"{c.name:20s} {c.empirical:.4g} <= {c.bound:.4g}: {c.passed}")
    run.manifest(all(c.passed for c in checks), {"checks": [c.row() for c in checks],
                                                  "kappa_t": sol.kappa,
                                                  "rho_integral": sol.rho_sup_integral()})
    return EXIT_OK


def smoke_config(cfg: LabConfig) -> ex.ExperimentConfig:
    c = cfg.check
    e = cfg.experiment
    return replace(e, n_list=c.n_list, replicas=c.replicas,
                   pde=replace(e.pde, nx=c.pde_nx, nv=c.pde_nv, dt=c.pde_dt),
                   concentration_n=c.n, concentration_replicas=c.replicas,
                   cauchy_n=c.n, cauchy_replicas=c.replicas, moment_samples=c.moment_samples)


def cmd_check(run: _Run) -> int:
    cfg = run.cfg
    c = cfg.check
    e = smoke_config(cfg)
    checks: list[ex.BoundCheck] = []

    sol = run.timed("pde", ex.reference_solution, e)
    f0_grid = sol.snapshots[0][1]
    checks += ex.pde_checks(sol, f0_grid, boundary_tol=e.pde.boundary_tol)

    chaos = run.timed("chaos", ex.chaos_rate_sweep, e, sol)
    for r in chaos.rows:
        checks.append(ex.BoundCheck(f"chaos_mean_N{r['N']}", r["mean"], r["bound"]))

    led = ex.constants_for(e, sol.kappa)
    n_c = e.concentration_n
    d = chaos.discrepancies.get(n_c)
    if d is None:
        d = ex.coupled_discrepancies(e, n_c, e.concentration_replicas, sol.fields)
    eps = ex.concentration_epsilons(e, n_c, sol.kappa)
    thr = led.B_t * eps
    curve = conc.TailCurve(thr, conc.exceedance(d, thr) if eps.size else np.zeros(0),
                           ex.coupling_tail_bound(eps, n_c, e.t_end, led), d.size,
                           "coupling_tail")
    checks += _tail_checks(curve)

    fl, lam_curve = run.timed("fluctuation", ex.fluctuation_checks, e, 100, c.fluctuation_replicas,
                              100, max(c.fluctuation_replicas // 10, 2))
    checks += fl + _tail_checks(lam_curve)

    rng = NoiseStreamSpec(e.seed).aux_generator(12)
    b = conc.binomial_tail_check(200, 0.3, 0.1, c.binomial_replicas, rng)
    checks += _tail_checks(b)
    exact = conc.binomial_tail_exact(200, 0.3, 0.1)
    checks.append(ex.BoundCheck("binomial_vs_exact", abs(float(b.empirical[0]) - exact), 0.0,
                                math.sqrt(exact * (1 - exact) / c.binomial_replicas)))

    checks += run.timed("moments", ex.moment_propagation_check, e, sol.fields)
    checks += _tail_checks(run.timed("increment", ex.increment_tail_check, e, sol.fields,
                                     c.moment_samples))
    checks.append(run.timed("cauchy", ex.cauchy_eta_check, e).check)

    g = NoiseStreamSpec(e.seed).aux_generator(13)
    quad = g.normal(size=(4, c.rope_samples))
    quad[2] = np.where(g.uniform(size=c.rope_samples) < 0.2, quad[0], quad[2])
    viol = int(np.count_nonzero(~rope_majorant_holds(*quad)))
    checks.append(ex.BoundCheck("rope_violations", viol, 0))
    spec = KernelSpec()
    mismatch = 0
    for _ in range(200):
        x = np.round(g.normal(size=int(g.integers(1, 40))), 1)
        mismatch += int(np.count_nonzero(mean_force_ranks(spec, x) != mean_force_brute(spec, x)))
    checks.append(ex.BoundCheck("rank_force_mismatches", mismatch, 0))

    rows = [(k.name, k.empirical, k.bound, k.margin, k.passed) for k in checks]
    run.csv("check.csv", ["name", "empirical", "bound", "margin", "passed"], rows)
    width = max(len(k.name) for k in checks)
    print(f"{'name':{width}s}  {'empirical':>12s}  {'bound':>12s}  {'margin':>12s}  pass")
    for k in checks:
        flag = "PASS" if k.passed else "FAIL"
        if k.vacuous:
            flag += " (vacuous)"
        print(f"{k.name:{width}s}  {k.empirical:12.5g}  {k.bound:12.5g}  {k.margin:12.5g}  {flag}")
    print(f"chaos slope (informational): {chaos.slope:.3f} +- {chaos.slope_se:.3f}")
    ok = all(k.passed for k in checks)
    run.manifest(ok, {"n_checks": len(checks), "n_failed": sum(not k.passed for k in checks),
                      "chaos_slope": chaos.slope, "constants": asdict(led)})
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "simulate": (cmd_simulate, "one coupled particle / mean-field run"),
    "chaos-rate": (cmd_chaos_rate, "coupling discrepancy against N with fitted slope"),
    "concentration": (cmd_concentration, "tail curves of the deviation bounds"),
    "pde": (cmd_pde, "grid solve with density and field snapshots"),
    "check": (cmd_check, "smoke run of every bound and oracle assertion"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed (random if absent)")
    common.add_argument("--threads", type=int, metavar="N", help="worker processes (0 = auto)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="vpfp-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, helptext) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=helptext)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override)
        seed = args.seed if args.seed is not None else cfg.run_seed
        if seed is None or seed < 0:
            seed = int(np.random.SeedSequence().entropy % 2**63)
            print(f"seed: {seed}")
        threads = args.threads if args.threads is not None else cfg.experiment.threads
        cfg = replace(cfg, run_seed=seed,
                      experiment=replace(cfg.experiment, seed=seed, threads=threads))
    except (ConfigError, ValueError) as exc:
        print(f"vpfp-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn = COMMANDS[args.command][0]
    run = _Run(args.command, cfg, Path(args.out))
    try:
        return fn(run)
    except DomainTooSmallError as exc:
        print(f"vpfp-lab: numerical guard: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"vpfp-lab: numerical guard: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
