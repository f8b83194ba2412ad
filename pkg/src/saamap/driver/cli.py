"""Command line interface.

Subcommands: generate (build and save a problem), evaluate (one objective
and gradient with diagnostics), optimize (full MAP run), experiment (named
sweeps), reconstruct (posterior mean to array files). Exit codes: 0 success,
2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .. import problems
from ..estimator import draw_probes, evaluate
from ..krylov import PositivityError
from ..precond import IndefiniteCoreError
from .config import ConfigError, RunConfig, load_config
from .experiments import (
    EXPERIMENT_NAMES,
    build_problem,
    build_setup,
    make_eval_options,
    named_experiment,
    resolve_theta0,
    run_experiment,
    write_csv,
)

__all__ = ["main"]


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saamap",
        description="MAP hyperparameter estimation for Bayesian linear inverse problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a run configuration file")
        p.add_argument("--seed", type=int, help="override the probe seed")
        p.add_argument("--out-dir", help="override the output directory")
        p.add_argument("--threads", type=int, help="worker threads for probe evaluation")

    common(sub.add_parser("generate", help="build a problem instance and save it"))
    common(sub.add_parser("evaluate", help="one objective and gradient evaluation"))
    common(sub.add_parser("optimize", help="full MAP optimization run"))
    p_exp = sub.add_parser("experiment", help="run a named experiment sweep")
    p_exp.add_argument("name", choices=EXPERIMENT_NAMES)
    common(p_exp)
    p_rec = sub.add_parser("reconstruct", help="posterior mean reconstruction")
    p_rec.add_argument("--theta", help="hyperparameters as a whitespace-separated list")
    common(p_rec)
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.probe_seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg


def _cmd_generate(args) -> int:
    cfg = _load(args)
    problem = build_problem(cfg)
    target = os.path.join(cfg.out_dir, problem.name)
    problems.save_problem(problem, target)
    print(f"saved problem {problem.name} to {target}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load(args)
    problem = build_problem(cfg)
    setup = build_setup(problem, cfg)
    theta0 = resolve_theta0(problem, cfg)
    opts = make_eval_options(cfg, setup)
    probes = draw_probes(problem.m, cfg.n_mc, cfg.probe_kind, cfg.probe_seed)
    ev = evaluate(theta0, problem, probes, opts)
    row = {
        "objective": ev.objective,
        **{f"grad_{name}": float(g) for name, g in zip(problem.theta_names, ev.gradient)},
        "mean_lanczos_k": float(np.mean(ev.per_probe_k)),
        "reached_max": ev.reached_max,
        "pcg_converged": ev.pcg_converged,
        "pcg_iterations": ev.pcg_iterations,
        "matvecs_A": ev.matvecs["A_total"],
        "matvecs_Q": ev.matvecs["Q"],
    }
    path = write_csv(
        os.path.join(cfg.out_dir, "evaluate.csv"), cfg, list(row.keys()), [row]
    )
    with open(path) as fh:
        sys.stdout.write(fh.read())
    return 0


def _cmd_optimize(args) -> int:
    from .optimize import minimize

    cfg = _load(args)
    problem = build_problem(cfg)
    setup = build_setup(problem, cfg)
    theta0 = resolve_theta0(problem, cfg)
    opts = make_eval_options(cfg, setup)
    probes = draw_probes(problem.m, cfg.n_mc, cfg.probe_kind, cfg.probe_seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "eval_log.jsonl")
    log = open(log_path, "w")

    def fun(theta):
        ev = evaluate(theta, problem, probes, opts)
        log.write(ev.to_json_line(theta=[float(t) for t in theta]) + "\n")
        return ev.objective, ev.gradient, ev

    try:
        result = minimize(fun, theta0, cfg.bounds(), maxiter=cfg.maxiter,
                          ftol=cfg.ftol, gtol=cfg.gtol)
    finally:
        log.close()
    rows = [
        {
            "iter": rec["iter"],
            **{f"theta_{name}": float(t) for name, t in zip(problem.theta_names, rec["theta"])},
            "objective": rec["fun"],
            "grad_norm": rec["grad_norm"],
            "mean_lanczos_k": float(np.mean(rec["info"].per_probe_k)) if rec["info"] else "",
            "reached_max": rec["info"].reached_max if rec["info"] else "",
        }
        for rec in result.trace
    ]
    write_csv(os.path.join(cfg.out_dir, "optimize_trace.csv"), cfg, list(rows[0].keys()), rows)
    np.save(os.path.join(cfg.out_dir, "theta_star.npy"), result.theta)
    print("theta_star:", " ".join(repr(float(v)) for v in result.theta))
    print(f"objective: {result.fun!r}  status: {result.status}  evaluations: {result.nfev}")
    return 0


def _cmd_experiment(args) -> int:
    cfg = _load(args)
    spec = named_experiment(args.name, cfg)
    _, path = run_experiment(spec, cfg)
    print(f"experiment {args.name} written to {path}")
    return 0


def _cmd_reconstruct(args) -> int:
    cfg = _load(args)
    problem = build_problem(cfg)
    setup = build_setup(problem, cfg)
    theta = (
        np.array([float(x) for x in args.theta.split()])
        if args.theta
        else resolve_theta0(problem, cfg)
    )
    rec = problems.reconstruct(problem, theta, setup=setup, pcg_tol=cfg.pcg_tol)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, "reconstruction.npy")
    np.save(out, rec.s)
    msg = f"saved {out}  pcg_converged={rec.pcg_converged}"
    if rec.rel_error is not None:
        msg += f"  rel_error={rec.rel_error!r}"
    print(msg)
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "optimize": _cmd_optimize,
    "experiment": _cmd_experiment,
    "reconstruct": _cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (PositivityError, IndefiniteCoreError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
