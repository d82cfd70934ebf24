"""Command-line experiment runner.

    jumpsee {simulate,audit,optimize,example8} --config FILE [--out DIR] [--seed N] [--threads N]

Exit status: 0 all checks passed, 1 a check or solver failed, 2 usage or
config error. Every run writes ``manifest.json`` next to its artifacts.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .adjoint import RegressionError, solve_riccati_lq
from .cauchy import ValidationFailure, gamma_matrices, run_example_end_to_end
from .config import (CauchyProblem, ConfigError, ExperimentConfig, build_control,
                     build_problem, load_config)
from .control import (OptimizationError, cost, optimize_hamiltonian_iteration,
                      optimize_projected_gradient, verification_check)
from .forward import (SolverError, _loglog_slope, continuous_dependence_experiment,
                      estimate_apriori, ito_energy_audit, simulate, solve_forward_picard)
from .noise import sample_noise
from .problem import ControlLaw, shifted
from .triple import check_coercivity, check_lipschitz, check_superparabolic

log = logging.getLogger("jumpsee")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("simulate", "audit", "optimize", "example8")


class _Run:
    """Per-invocation context: config, output directory, thread cap."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int, command: str):
        self.cfg, self.out, self.threads, self.command = cfg, out, threads, command

    def path(self, name) -> Path:
        return self.out / name

    def noise(self, problem):
        return sample_noise(problem.grid, problem.marks, self.cfg.paths, self.cfg.seed,
                            threads=self.threads)

    def setup(self, steps: int | None = None, validate: bool = True):
        cfg = self.cfg if steps is None else self.cfg.model_copy(update={"steps": steps})
        problem = build_problem(cfg, validate=validate)
        ric = None
        if isinstance(cfg.problem, CauchyProblem):
            ric = solve_riccati_lq(problem.space, problem.A, problem.B,
                                   gamma_matrices(cfg.cauchy_config()), problem.marks,
                                   problem.grid)
        return problem, build_control(cfg, problem, ric), ric


def _fail(run: _Run, exc: Exception) -> int:
    err = {"error": f"{type(exc).__name__}: {exc}"}
    if getattr(exc, "details", None):
        err["details"] = exc.details
    artifacts.write_json(run.path("error.json"), err)
    print(f"{run.command}: {err['error']}", file=sys.stderr)
    return EXIT_CHECK


# simulate ---------------------------------------------------------------------

def cmd_simulate(run: _Run) -> int:
    opts = run.cfg.simulate
    problem, control, _ = run.setup()
    noise = run.noise(problem)
    report = {}
    if opts.picard:
        states, trace = solve_forward_picard(problem.space, problem.A, problem.B,
                                             problem.coeffs, control, problem.x0, noise,
                                             opts.rho_steps, opts.picard_tol)
        report["picard"] = {"iterations": trace.iterations, "distances": trace.distances,
                            "contraction_ratio": trace.contraction_ratio}
    else:
        states = simulate(problem, control, noise)
    est = estimate_apriori(states, problem.space, problem.coeffs, problem.marks, problem.x0)
    J, se = cost(states, problem.cost)
    report.update(estimate=est.as_dict(), cost={"J": J, "stderr": se},
                  terminal_mean=states.terminal.mean(axis=0))
    passed = bool(np.isfinite(est.ratio))
    if opts.max_ratio is not None:
        passed &= est.ratio <= opts.max_ratio
    report["passed"] = passed
    artifacts.write_states_csv(run.path("states.csv"), states, opts.export_paths)
    artifacts.write_json(run.path("estimate.json"), report)
    return EXIT_OK if passed else EXIT_CHECK


# audit ------------------------------------------------------------------------

def _audit_coercivity(run, problem, opts):
    rep = check_coercivity(problem.A, problem.B, problem.space, problem.grid,
                           opts.probe_count, run.cfg.seed, lambda_cap=opts.lambda_cap,
                           alpha_max=opts.alpha_max)
    return {**rep.as_dict(), "passed": rep.satisfied}


def _audit_lipschitz(run, problem, opts):
    measured = check_lipschitz(problem.coeffs, problem.space, problem.marks, opts.probe_count,
                               run.cfg.seed, times=problem.grid.times)
    declared = problem.coeffs.lipschitz
    ok = bool(np.isfinite(declared) and measured <= declared * (1 + 1e-9) + 1e-12)
    return {"measured": measured, "declared": declared, "passed": ok}


def _audit_ito(run, problem, opts):
    rows = []
    for n in opts.steps:
        pr, control, _ = run.setup(steps=n, validate=False)
        noise = run.noise(pr)
        states = simulate(pr, control, noise)
        resid = ito_energy_audit(states, pr.A, pr.B, pr.coeffs, noise)
        rows.append({"steps": n, "dt": pr.grid.dt, "rms_residual": float(np.sqrt(np.mean(resid**2)))})
    rms = [r["rms_residual"] for r in rows]
    if max(rms) == 0:
        slope, ok = float("inf"), True  # exact at every resolution
    else:
        slope = _loglog_slope([r["dt"] for r in rows], rms)
        ok = bool(slope >= opts.min_slope)
    return {"rows": rows, "slope": slope, "min_slope": opts.min_slope, "passed": ok}


def _audit_dependence(run, problem, control, opts):
    N = problem.state_dim
    h = np.ones(N) / np.sqrt(N)

    def perturb(delta):
        return shifted(problem.coeffs, drift_shift=delta * h), problem.x0

    res = continuous_dependence_experiment(problem, control, perturb, opts.deltas,
                                           run.noise(problem))
    ok = bool(abs(res.slope_sup - opts.target_slope) <= opts.slope_tol)
    return {**res.as_dict(), "target_slope": opts.target_slope, "passed": ok}


def cmd_audit(run: _Run) -> int:
    opts = run.cfg.audit
    problem, control, _ = run.setup(validate=False)
    results = {}
    if isinstance(run.cfg.problem, CauchyProblem):
        c = run.cfg.cauchy_config()
        ok = check_superparabolic(c.a, c.eta, c.kappa, c.grid, 8 * c.dim + 64,
                                  domain_length=c.domain_length, K=c.K)
        results["superparabolic"] = {"kappa": c.kappa, "K": c.K, "passed": ok}
    if opts.coercivity is not None:
        results["coercivity"] = _audit_coercivity(run, problem, opts.coercivity)
    if opts.lipschitz is not None:
        results["lipschitz"] = _audit_lipschitz(run, problem, opts.lipschitz)
    if opts.ito is not None:
        results["ito"] = _audit_ito(run, problem, opts.ito)
    if opts.dependence is not None:
        results["dependence"] = _audit_dependence(run, problem, control, opts.dependence)
    for name, res in results.items():
        artifacts.write_json(run.path(f"audit_{name}.json"), res)
    summary = {name: res["passed"] for name, res in results.items()}
    summary["passed"] = all(summary.values())
    artifacts.write_json(run.path("audit.json"), summary)
    return EXIT_OK if summary["passed"] else EXIT_CHECK


# optimize ---------------------------------------------------------------------

def _initial_control(problem, cls, paths) -> ControlLaw:
    if cls == "tabulated":
        box = {"lower": problem.lower, "upper": problem.upper}
        return ControlLaw.tabulated(problem.grid,
                                    np.zeros((paths, problem.grid.steps, problem.control_dim)),
                                    problem.state_dim, **box)
    return problem.zero_control(cls)


def cmd_optimize(run: _Run) -> int:
    opts = run.cfg.optimize
    problem, _, ric = run.setup()
    noise = run.noise(problem)
    u0 = _initial_control(problem, opts.control_class, run.cfg.paths)
    methods = ["hamiltonian", "gradient"] if opts.method == "both" else [opts.method]
    report = {"methods": {}}
    if ric is not None:
        J_ric, se_ric = cost(simulate(problem, ric.control_law(), noise), problem.cost)
        report["riccati"] = {"J": J_ric, "stderr": se_ric, "value": ric.value(problem.x0)}
    passed = True
    for name in methods:
        try:
            if name == "hamiltonian":
                res = optimize_hamiltonian_iteration(problem, u0, noise, opts.damping,
                                                     opts.max_outer, opts.tol)
            else:
                res = optimize_projected_gradient(problem, u0, noise, step=opts.initial_step,
                                                  max_iter=opts.max_iter, tol=opts.tol,
                                                  min_step=opts.min_step)
        except OptimizationError as exc:
            artifacts.write_trace_csv(run.path(f"trace_{name}.csv"), exc.trace)
            report["methods"][name] = {"error": str(exc), "passed": False}
            passed = False
            continue
        artifacts.write_trace_csv(run.path(f"trace_{name}.csv"), res.trace)
        artifacts.write_control(run.path(f"control_{name}.txt"), res.control)
        entry = {"J": res.final_J, "iterations": res.trace[-1].iteration,
                 "converged": res.converged}
        ok = res.converged
        if ric is not None:
            rel = (res.final_J - J_ric) / abs(J_ric)
            entry["relative_gap_to_riccati"] = rel
            ok &= abs(rel) <= opts.oracle_rel
        if opts.verify:
            ver = verification_check(problem, res.control, noise, opts.perturbations,
                                     run.cfg.seed, residual_threshold=opts.residual_threshold)
            artifacts.write_json(run.path(f"verification_{name}.json"), ver.as_dict())
            entry["verification_passed"] = ver.passed
            ok &= ver.passed
        entry["passed"] = bool(ok)
        report["methods"][name] = entry
        passed &= ok
    report["passed"] = bool(passed)
    artifacts.write_json(run.path("optimize.json"), report)
    return EXIT_OK if passed else EXIT_CHECK


# example8 ---------------------------------------------------------------------

def cmd_example8(run: _Run) -> int:
    report = run_example_end_to_end(run.cfg.cauchy_config(), threads=run.threads)
    artifacts.write_json(run.path("example8_report.json"), report)
    with open(run.path("example8_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "passed", "skipped"])
        for s in report["stages"]:
            w.writerow([s["name"], int(s["passed"]), int(s.get("skipped", False))])
    return EXIT_OK if report["passed"] else EXIT_CHECK


HANDLERS = {"simulate": cmd_simulate, "audit": cmd_audit, "optimize": cmd_optimize,
            "example8": cmd_example8}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpsee", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for noise generation; results do not depend on it")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.command == "example8":
            cfg.cauchy_config()
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, args.out, args.threads, args.command)
    payload = cfg.model_dump(mode="json")
    artifacts.write_json(run.path("manifest.json"),
                         artifacts.manifest(payload, cfg.seed, args.command))
    try:
        return HANDLERS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationFailure, SolverError, RegressionError, np.linalg.LinAlgError) as exc:
        return _fail(run, exc)


if __name__ == "__main__":
    sys.exit(main())
