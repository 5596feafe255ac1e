"""Command-line entry point: ``hypocert <command> --config run.ini [--set key=value ...]``.

Each command writes CSV files, PNG figures, a config echo and a summary
whose tail is ``KEY: value`` lines.  Exit codes: 0 success, 1 a check
failed, 2 infeasible, 64 usage, 70 internal error.
"""
from __future__ import annotations

import argparse
import itertools
import math
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import certify, hypo, mc, pde, plotting, report
from .config import RunConfig, build_model, load_config, parse_config
from .errors import (CertificationInfeasible, ConfigError, ContractViolation, HypocertError,
                     InapplicableError)
from .model import Equilibrium, FBounds, PerturbedHarmonic, QuadraticPotential, drift_bounds

EXIT_OK, EXIT_FAILED, EXIT_INFEASIBLE, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 64, 70
GIBBS_L1_TOL = 1e-3


# ------------------------------------------------------------------ shared pieces

def make_grid(cfg: RunConfig, model) -> pde.PhaseGrid:
    hx, hv = cfg["grid.halfwidth_x"], cfg["grid.halfwidth_v"]
    default = pde.PhaseGrid.default_for(model, cfg["grid.nx"], cfg["grid.nv"])
    return pde.PhaseGrid.centered(hx if hx is not None else default.x_max,
                                  hv if hv is not None else default.v_max, cfg["grid.nx"], cfg["grid.nv"])


def make_generator(cfg, model, grid=None):
    grid = grid or make_grid(cfg, model)
    return pde.assemble_generator(model, grid, transport=cfg["grid.transport"])


def gaussian_variances(model):
    """Exact ``(Var x, Var v)`` of the Gibbs law for quadratic equilibria, else ``None``."""
    drift = model.drift
    if isinstance(drift, PerturbedHarmonic) and drift.is_equilibrium():
        k, gamma = 1.0, drift.gamma
    elif isinstance(drift, Equilibrium) and isinstance(drift.potential, QuadraticPotential):
        k, gamma = drift.potential.k, drift.gamma
    else:
        return None
    s2 = model.sigma ** 2 / gamma
    return s2 / k, s2


def initial_density(grid, model, shift=1.0, width=0.7) -> np.ndarray:
    """Gaussian bump centred ``shift`` equilibrium standard deviations off the origin, unit grid mass."""
    k, gamma = model.drift.linear_part() or (1.0, 1.0)
    s_v = model.sigma / math.sqrt(gamma)
    s_x = s_v / math.sqrt(k)
    X, V = grid.mesh()
    f = np.exp(-0.5 * (((X - shift * s_x) / (width * s_x)) ** 2 + ((V - shift * s_v) / (width * s_v)) ** 2))
    return f / (f.sum() * grid.cell_area)


def _out(cfg) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.ini").write_text(cfg.echo())
    return out


def _field_rows(grid, *fields):
    X, V = grid.mesh()
    cols = [X.ravel(), V.ravel()] + [np.asarray(f).ravel() for f in fields]
    return zip(*cols)


# ------------------------------------------------------------------ commands

def run_certify(cfg: RunConfig, figures: bool = True) -> tuple[int, dict]:
    model = build_model(cfg)
    out = _out(cfg)
    route = cfg["certify.route"]
    lin = model.drift.linear_part()
    k, gamma = lin
    A, kappa = certify.certify_linear(gamma, model.d, k)
    M = certify.kinetic_drift_matrix(gamma, model.d, k)
    lyap_residual = float(np.max(np.abs(A @ M + M.T @ A + np.eye(2 * model.d))))
    candidates = model.drift.bound_candidates(model.d)
    if route != "auto":
        candidates = [c for c in candidates if c.route in (route, "zero")]
        if not candidates:
            raise ConfigError(f"certify.route = {route} is not offered by this drift")
    try:
        if route == "auto":
            cert = certify.certify_model(model, cfg["certify.target_fraction"])
        else:
            cert = certify.certify_perturbed((A, kappa), candidates[0], cfg["certify.target_fraction"])
    except CertificationInfeasible as exc:
        msg = (f"certification infeasible: {exc}. The perturbation must satisfy "
               "kappa' < kappa/|A| so that eps = kappa - |A|(2 M g / R + kappa') can be made positive.")
        report.write_summary(out / "summary.txt", "certify", [msg],
                             {"status": "infeasible", "kappa": kappa, "A_opnorm": float(np.linalg.eigvalsh(A)[-1])})
        print(msg, file=sys.stderr)
        return EXIT_INFEASIBLE, {"message": msg}
    certify.write_certificate(cert, out / "certificate.txt")
    rep = certify.falsify_condition(cert, model, cfg["certify.n_pairs"], seed=cfg["run.seed"],
                                    workers=cfg["certify.workers"])
    report.write_csv(out / "violations.csv", ["z", "zp", "normalized_margin"],
                     [(" ".join(map(repr, z)), " ".join(map(repr, zp)), m) for z, zp, m in rep.violations])
    ok = rep.ok and lyap_residual <= 1e-12
    tail = {"status": "pass" if ok else "fail", "kappa": cert.kappa, "R": cert.R,
            "eps_contract": cert.eps_contract, "A_opnorm": cert.A_opnorm, "route": cert.meta["route"],
            "lyapunov_residual": lyap_residual, "n_pairs": rep.n_pairs, "n_violations": rep.n_violations,
            "worst_margin": rep.worst_margin}
    lines = [f"linear certificate: kappa = {kappa:.6g}, |A| = {cert.A_opnorm:.6g}",
             f"perturbation route: {cert.meta['route']}, R = {cert.R:.6g}, eps = {cert.eps_contract:.6g}",
             f"falsifier: {rep.n_violations} violations in {rep.n_pairs} pairs"]
    report.write_summary(out / "summary.txt", "certify", lines, tail)
    return (EXIT_OK if ok else EXIT_FAILED), {"certificate": cert, "falsifier": rep, **tail}


def run_steady(cfg: RunConfig, figures: bool = True) -> tuple[int, dict]:
    model = build_model(cfg)
    out = _out(cfg)
    gen = make_generator(cfg, model)
    grid = gen.grid
    mu = pde.steady_state(gen)
    mom = pde.moments(mu, grid)
    tail = {"status": "pass", "residual": mu.residual, "boundary_mass": pde.boundary_mass(mu.values, grid),
            "high_order_fraction": gen.meta["high_order_fraction"], **mom}
    cols, fields = ["x", "v", "mu"], [mu.values]
    var = gaussian_variances(model)
    if var is not None:
        gibbs = pde.gibbs_cell_average(grid, *var)
        l1 = float(np.sum(np.abs(mu.values - gibbs)) * grid.cell_area)
        tail["gibbs_l1"] = l1
        if l1 > GIBBS_L1_TOL:
            tail["status"] = "fail"
        cols.append("gibbs")
        fields.append(gibbs)
    report.write_csv(out / "steady.csv", cols, _field_rows(grid, *fields))
    if figures:
        plotting.plot_field(grid, mu.values, out / "steady.png", "steady state (log10)", log=True)
    report.write_summary(out / "summary.txt", "steady state",
                         [f"grid {grid.nx}x{grid.nv} on [{grid.x_min:g},{grid.x_max:g}]x[{grid.v_min:g},{grid.v_max:g}]"],
                         tail)
    return (EXIT_OK if tail["status"] == "pass" else EXIT_FAILED), {"mu": mu, "generator": gen, **tail}


def run_evolve(cfg: RunConfig, figures: bool = True) -> tuple[int, dict]:
    model = build_model(cfg)
    out = _out(cfg)
    gen = make_generator(cfg, model)
    grid = gen.grid
    mu = pde.steady_state(gen)
    f0 = initial_density(grid, model, cfg["evolve.init_shift"], cfg["evolve.init_width"])
    ev = pde.evolve_density(gen, f0, cfg["evolve.T"], dt=cfg["evolve.dt"], snapshots=cfg["evolve.snapshots"])
    rows, norms = [], []
    for i, (t, f) in enumerate(zip(ev.times, ev.fields)):
        h = f.values / mu.values
        name = f"snapshot_{i:03d}.csv"
        report.write_csv(out / name, ["x", "v", "f", "h"], _field_rows(grid, f.values, h))
        hn = pde.mu_norm(h - 1.0, mu, grid)
        norms.append(hn)
        rows.append((i, t, name, float(f.values.sum() * grid.cell_area), hn))
    report.write_csv(out / "manifest.csv", ["index", "t", "file", "mass", "h_norm"], rows)
    norms = np.array(norms)
    monotone = bool(np.all(np.diff(norms) <= 1e-10))
    mass_drift = float(np.max(np.abs(np.diff(ev.mass)))) if len(ev.mass) > 1 else 0.0
    if figures:
        plotting.plot_series(ev.times, {"|h_t - 1|": norms}, out / "h_norm.png")
        plotting.plot_field(grid, ev.fields[-1].values, out / "final_density.png", f"f at t = {ev.times[-1]:g}")
    tail = {"status": "pass" if monotone else "fail", "monotone": monotone, "dt": ev.dt, "n_steps": ev.n_steps,
            "leak": ev.leak, "max_mass_change_per_step": mass_drift, "h_norm_initial": norms[0],
            "h_norm_final": norms[-1]}
    report.write_summary(out / "summary.txt", "density evolution", [f"{len(rows)} snapshots written"], tail)
    return (EXIT_OK if monotone else EXIT_FAILED), {"evolution": ev, "h_norms": norms, **tail}


def run_verify(cfg: RunConfig, figures: bool = True) -> tuple[int, dict]:
    model = build_model(cfg)
    out = _out(cfg)
    gen = make_generator(cfg, model)
    grid = gen.grid
    mu = pde.steady_state(gen)
    f0 = initial_density(grid, model, cfg["evolve.init_shift"], cfg["evolve.init_width"])
    eps = hypo.select_eps(model)
    ray = hypo.poincare_rayleigh(mu, grid)
    C = ray["C_rayleigh"]
    C_prop2 = None
    if cfg["hypo.poincare"] == "prop2":
        op = hypo.operator_norm_Pt(gen, mu, cfg["hypo.t0"])
        C_prop2 = hypo.poincare_prop2(drift_bounds(model).one_sided_K, math.sqrt(2) * model.sigma,
                                      cfg["hypo.t0"], op["opnorm"])
        C = C_prop2
    T, dt = cfg["evolve.T"], cfg["evolve.dt"]
    trace = hypo.trace_observable(gen, mu, f0 / mu.values, T, eps["eps_norm"], C, dt=dt)
    decay = hypo.verify_decay(trace, slack=cfg["hypo.slack"])
    dissipation = hypo.dissipation_identity_check(trace, model.sigma)
    env_obs = hypo.envelope_check(trace)
    ev = pde.evolve_density(gen, f0, T, dt=dt, snapshots=cfg["evolve.snapshots"])
    h_sq = np.array([pde.mu_norm(f.values / mu.values - 1.0, mu, grid) ** 2 for f in ev.fields])
    env_den = hypo.envelope_check(trace, h_sq, ev.times)
    report.write_csv(out / "trace.csv", hypo.ModifiedNormTrace.COLUMNS, trace.rows())
    report.write_csv(out / "density_norms.csv", ["t", "h_norm_sq"], zip(ev.times, h_sq))
    if figures:
        plotting.plot_trace(trace, out / "trace.png", env_obs.c)
    ok = (decay.ok and dissipation["ok"] and env_obs.passes and env_den.passes
          and env_obs.c_emp >= env_obs.c and env_obs.c > 0)
    tail = {"status": "pass" if ok else "fail", "eps_norm": eps["eps_norm"], "M_coeff": eps["M_coeff"],
            "C_used": C, "C_rayleigh": ray["C_rayleigh"], "C_prop2": C_prop2 if C_prop2 is not None else "n/a",
            "c_certified": env_obs.c, "c_emp": env_obs.c_emp, "c_emp_density": env_den.c_emp,
            "decay_violations": decay.n_violations, "first_violation_time": decay.first_violation_time,
            "envelope_violations": env_obs.n_violations + env_den.n_violations,
            "dissipation_max_error": dissipation["max_error"], "dissipation_violations": dissipation["n_violations"],
            "alpha_ratio_min": env_obs.alpha_ratio_min, "leak": ev.leak, "n_steps": len(trace.times) - 1}
    lines = [f"modified norm traced over t in [0, {T:g}] with {len(trace.times) - 1} steps",
             f"certified squared-norm rate c = {env_obs.c:.4g}, observed {env_obs.c_emp:.4g}"]
    report.write_summary(out / "summary.txt", "decay verification", lines, tail)
    return (EXIT_OK if ok else EXIT_FAILED), {"trace": trace, "decay": decay, "dissipation": dissipation,
                                              "envelope": env_obs, "envelope_density": env_den, **tail}


def run_poincare(cfg: RunConfig, figures: bool = True) -> tuple[int, dict]:
    model = build_model(cfg)
    out = _out(cfg)
    gen = make_generator(cfg, model)
    mu = pde.steady_state(gen)
    est = hypo.poincare_estimate(gen, mu, cfg["hypo.t0"], cfg["evolve.dt"])
    ok = est.ordered
    report.write_csv(out / "poincare.csv", ["lambda1", "C_rayleigh", "K", "t0", "opnorm_Pt0", "C_prop2"],
                     [(est.lambda1, est.C_rayleigh, est.K, est.t0, est.opnorm_Pt0, est.C_prop2)])
    tail = {"status": "pass" if ok else "fail", "lambda1": est.lambda1, "C_rayleigh": est.C_rayleigh,
            "K": est.K, "t0": est.t0, "opnorm_Pt0": est.opnorm_Pt0, "C_prop2": est.C_prop2,
            "prop2_applicable": est.prop2_applicable, "ordered": ok}
    lines = ["semigroup route inapplicable at this t0 (no contraction)"] if not est.prop2_applicable else []
    report.write_summary(out / "summary.txt", "Poincare constants", lines, tail)
    return (EXIT_OK if ok else EXIT_FAILED), {"estimate": est, **tail}


def _mc_config(cfg, **kw):
    base = dict(dt=cfg["mc.dt"], T=cfg["mc.T"], n_traj=cfg["mc.n_traj"], seed=cfg["run.seed"],
                integrator=cfg["mc.integrator"], n_snapshots=cfg["mc.n_snapshots"])
    base.update(kw)
    return mc.SdeRunConfig(**base)


def run_couple(cfg: RunConfig, figures: bool = True) -> tuple[int, dict]:
    model = build_model(cfg)
    out = _out(cfg)
    cert = certify.certify_model(model, cfg["certify.target_fraction"])
    K = drift_bounds(model).one_sided_K
    d = model.d
    z0 = np.asarray(cfg["mc.z0"] or np.zeros(2 * d))
    if cfg["mc.z0p"] is not None:
        z0p = np.asarray(cfg["mc.z0p"])
    else:
        z0p = z0.copy()
        z0p[0] += max(3.0, 2.0 * cert.R)
    res = mc.couple_synchronous(model, z0, z0p, _mc_config(cfg), cert.A, K, cert.eps_contract, cert.R)
    report.write_csv(out / "coupling.csv", ["t", "mean_sq_dist", "mean_A_dist", "ci_sq", "ci_A", "bound"],
                     [(*row, b) for row, b in zip(res.stats.rows(), res.growth_bound)])
    if figures:
        plotting.plot_coupling(res.stats, res.growth_bound, out / "coupling.png")
    ok = res.verdict_growth and res.verdict_decay is not False
    tail = {"status": "pass" if ok else "fail", "K": K, "verdict_growth": res.verdict_growth,
            "verdict_decay": res.verdict_decay if res.verdict_decay is not None else "n/a",
            "decay_checks": res.decay_checks, "decay_violations": res.decay_violations,
            "R": cert.R, "eps_contract": cert.eps_contract, "em_bias_factor_final": res.em_bias_factor[-1],
            "n_traj": res.stats.n_traj}
    report.write_summary(out / "summary.txt", "synchronous coupling", [], tail)
    return (EXIT_OK if ok else EXIT_FAILED), {"result": res, **tail}


def grid_moments_with_error(cfg, model):
    """Grid moments at the configured size and an error bar from the half-resolution grid."""
    fine = make_grid(cfg, model)
    coarse = pde.PhaseGrid(fine.x_min, fine.x_max, fine.v_min, fine.v_max,
                           max(fine.nx // 2, 3), max(fine.nv // 2, 3))
    m_f = pde.moments(pde.steady_state(make_generator(cfg, model, fine)), fine)
    m_c = pde.moments(pde.steady_state(make_generator(cfg, model, coarse)), coarse)
    return m_f, {k: abs(m_f[k] - m_c[k]) for k in m_f}


def run_moments(cfg: RunConfig, figures: bool = True) -> tuple[int, dict]:
    """Grid versus Monte Carlo ``Cov(x, v)`` and variances (d = 1)."""
    model = build_model(cfg)
    out = _out(cfg)
    grid_m, grid_err = grid_moments_with_error(cfg, model)
    mcres = mc.ergodic_moments(model, _mc_config(cfg), cfg["mc.burn_in"], n_batches=cfg["mc.n_batches"])
    rows, agree = [], True
    for name, (i, j) in {"var_x": (0, 0), "var_v": (1, 1), "cov_xv": (0, 1)}.items():
        g, ge = grid_m[name], grid_err[name]
        m, mci = float(mcres["cov"][i, j]), float(mcres["cov_ci"][i, j])
        joint = math.hypot(mci, ge)
        ok = abs(g - m) <= joint
        agree &= ok
        rows.append((name, g, ge, m, mci, joint, ok))
    report.write_csv(out / "moments.csv", ["moment", "grid", "grid_err", "mc", "mc_ci95", "joint", "agree"], rows)
    cov_z = mcres["cov_xv"] / mcres["cov_xv_se"] if mcres["cov_xv_se"] > 0 else math.inf
    tail = {"status": "pass" if agree else "fail", "agree": agree, "grid_cov_xv": grid_m["cov_xv"],
            "mc_cov_xv": mcres["cov_xv"], "mc_cov_xv_se": mcres["cov_xv_se"], "cov_xv_z": cov_z,
            "grid_var_diff": grid_m["var_x"] - grid_m["var_v"]}
    report.write_summary(out / "summary.txt", "cross-method moments", [], tail)
    return (EXIT_OK if agree else EXIT_FAILED), {"grid": grid_m, "grid_err": grid_err, "mc": mcres, **tail}


COMMANDS = {"certify": run_certify, "verify": run_verify, "poincare": run_poincare, "couple": run_couple,
            "steady": run_steady, "evolve": run_evolve, "moments": run_moments}


# ------------------------------------------------------------------ argument handling

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="hypocert", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", "-c", help="INI file with [model], [drift], [grid], ... sections")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="run once per value (repeat for a cartesian product)")
    p.add_argument("--workers", type=int, default=1, help="parallel runs for --sweep")
    p.add_argument("--no-figures", action="store_true")
    return p


def _execute(command, cfg, figures):
    try:
        code, _ = COMMANDS[command](cfg, figures)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CertificationInfeasible, InapplicableError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ContractViolation as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HypocertError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


def _sweep_configs(cfg, sweeps):
    keys, values = [], []
    for item in sweeps:
        if "=" not in item:
            raise ConfigError(f"sweep {item!r} is not of the form key=v1,v2")
        k, raw = item.split("=", 1)
        keys.append(k)
        values.append([v for v in raw.split(",") if v])
    base = Path(cfg["output.dir"])
    for i, combo in enumerate(itertools.product(*values)):
        over = [f"{k}={v}" for k, v in zip(keys, combo)] + [f"output.dir={base / f'sweep_{i:03d}'}"]
        yield cfg.with_overrides(over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else parse_config("", "<empty>")
        over = list(args.set)
        if args.out:
            over.append(f"output.dir={args.out}")
        if args.seed is not None:
            over.append(f"run.seed={args.seed}")
        cfg = cfg.with_overrides(over)
        runs = list(_sweep_configs(cfg, args.sweep)) if args.sweep else [cfg]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    figures = not args.no_figures
    if len(runs) == 1:
        return _execute(args.command, runs[0], figures)
    with ProcessPoolExecutor(max(1, args.workers)) as pool:
        codes = list(pool.map(_execute, [args.command] * len(runs), runs, [figures] * len(runs)))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
