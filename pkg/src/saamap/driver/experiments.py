"""Named experiment sweeps and their CSV emission.

Each experiment writes one CSV file whose header comments echo the effective
configuration. Error columns against the dense oracle are included whenever
the instance is small enough to materialize; otherwise they are omitted with
a note. Matvec counts are the primary cost metric; wall-clock columns are
informational only.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import problems
from ..estimator import EvalOptions, HyperPrior, draw_probes, evaluate
from ..oracle import SIZE_CAP, DenseProblem, exact_objective
from .config import RunConfig, config_echo_lines
from .optimize import minimize

__all__ = [
    "ExperimentSpec",
    "named_experiment",
    "run_experiment",
    "build_problem",
    "build_setup",
    "make_eval_options",
    "resolve_theta0",
    "write_csv",
]

EXPERIMENT_NAMES = ("mc-accuracy", "precond-rank", "noise-sweep", "measurement-scaling", "dynamic")


@dataclass
class ExperimentSpec:
    name: str
    grids: dict = field(default_factory=dict)
    repetitions: int = 5

    def __post_init__(self):
        if self.name not in EXPERIMENT_NAMES:
            raise ValueError(f"unknown experiment {self.name!r}")
        if not self.grids:
            raise ValueError("experiment sweep must be nonempty")


def named_experiment(name: str, cfg: RunConfig) -> ExperimentSpec:
    """Default sweep grids for each named experiment."""
    if name == "mc-accuracy":
        return ExperimentSpec(name, {"n_mc": list(range(8, 201, 16))}, repetitions=10)
    if name == "precond-rank":
        return ExperimentSpec(
            name, {"nu": [0.5, 1.5, 2.5], "p_space": [5, 10, 15, 20]},
            repetitions=cfg.repetitions,
        )
    if name == "noise-sweep":
        return ExperimentSpec(
            name, {"nu": [0.5, 1.5, 2.5], "sigma_m_sq": [1e2, 1e0, 1e-2, 1e-4, 1e-6]},
            repetitions=1,
        )
    if name == "measurement-scaling":
        return ExperimentSpec(name, {"j": [0.3, 0.456, 0.6]}, repetitions=1)
    if name == "dynamic":
        return ExperimentSpec(name, {"mode": ["precond", "noprecond"]}, repetitions=1)
    raise ValueError(f"unknown experiment {name!r}")


# ---------------------------------------------------------------------------
# shared builders

def build_problem(cfg: RunConfig, *, nu=None, j=None) -> problems.ProblemInstance:
    if cfg.kind == "saved":
        return problems.load_problem(cfg.problem_path)
    if cfg.kind == "dynamic":
        prob = problems.make_dynamic_problem(
            n_side=cfg.n_side, n_t=cfg.n_t, n_src=cfg.n_src, n_rcv=cfg.n_rcv,
            noise_level=cfg.noise_level, seed=cfg.problem_seed,
        )
    else:
        prob = problems.make_static_problem(
            n_side=cfg.n_side, j=j if j is not None else cfg.j,
            noise_level=cfg.noise_level, nu=nu if nu is not None else cfg.nu,
            seed=cfg.problem_seed,
        )
    prob.mu = cfg.mu
    return prob


def build_setup(problem, cfg: RunConfig, *, p_space=None):
    if not cfg.precond_enabled:
        return None
    return problems.make_precond_setup(
        problem,
        p_space=p_space if p_space is not None else cfg.p_space,
        p_theta=cfg.p_theta,
        p_time=cfg.p_time,
        ell_box=cfg.ell_box,
        ell_t_box=cfg.ell_t_box,
        cache_dir=cfg.cache_dir or None,
    )


def make_eval_options(cfg: RunConfig, setup) -> EvalOptions:
    return EvalOptions(
        precond=setup,
        quad_tol=cfg.quad_tol,
        pcg_tol=cfg.pcg_tol,
        kmax=cfg.kmax,
        threads=cfg.threads,
        hyper=HyperPrior(cfg.gamma),
    )


def resolve_theta0(problem, cfg: RunConfig) -> np.ndarray:
    if cfg.theta0:
        return np.asarray(cfg.theta0, dtype=float)
    if problem.default_theta0 is not None:
        return np.asarray(problem.default_theta0, dtype=float)
    raise ValueError("no initial hyperparameters available")


def write_csv(path, cfg: RunConfig, fieldnames, rows, notes=()):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in config_echo_lines(cfg):
            fh.write(line + "\n")
        for note in notes:
            fh.write(f"# {note}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _mean_k(evaluation) -> float:
    return float(np.mean(evaluation.per_probe_k))


# ---------------------------------------------------------------------------
# experiment bodies

def _accuracy_cells(problem, cfg, setup, theta0, n_mc_values, seeds):
    """Relative objective errors and Lanczos counts against the dense oracle."""
    dp = DenseProblem.from_problem(problem, hyper=HyperPrior(cfg.gamma))
    f_exact = exact_objective(dp, theta0)
    opts = make_eval_options(cfg, setup)
    cells = {}
    for n_mc in n_mc_values:
        errs, ks, reached = [], [], 0
        for seed in seeds:
            probes = draw_probes(problem.m, n_mc, cfg.probe_kind, seed)
            ev = evaluate(theta0, problem, probes, opts)
            errs.append(abs(ev.objective - f_exact) / abs(f_exact))
            ks.append(_mean_k(ev))
            reached += ev.reached_max
        cells[n_mc] = {
            "mean_rel_err": float(np.mean(errs)),
            "median_rel_err": float(np.median(errs)),
            "std_rel_err": float(np.std(errs)),
            "mean_lanczos_k": float(np.mean(ks)),
            "reached_max": reached,
        }
    return cells, f_exact


def _run_mc_accuracy(spec, cfg, out_dir):
    problem = build_problem(cfg)
    setup = build_setup(problem, cfg)
    theta0 = resolve_theta0(problem, cfg)
    seeds = list(range(spec.repetitions))
    cells, f_exact = _accuracy_cells(problem, cfg, setup, theta0, spec.grids["n_mc"], seeds)
    rows = [
        {"n_mc": n_mc, **cell, "exact_objective": f_exact}
        for n_mc, cell in sorted(cells.items())
    ]
    fieldnames = list(rows[0].keys())
    path = write_csv(os.path.join(out_dir, "mc_accuracy.csv"), cfg, fieldnames, rows)
    return rows, path


def _run_precond_rank(spec, cfg, out_dir):
    rows_err, rows_k = [], []
    for nu in spec.grids["nu"]:
        problem = build_problem(cfg, nu=nu)
        theta0 = resolve_theta0(problem, cfg)
        dp = DenseProblem.from_problem(problem, hyper=HyperPrior(cfg.gamma))
        f_exact = exact_objective(dp, theta0)
        err_row = {"metric": "rel_err", "nu": nu}
        k_row = {"metric": "mean_lanczos_k", "nu": nu}
        for p in spec.grids["p_space"]:
            setup = build_setup(problem, cfg, p_space=p)
            opts = make_eval_options(cfg, setup)
            errs, ks = [], []
            for seed in range(spec.repetitions):
                probes = draw_probes(problem.m, cfg.n_mc, cfg.probe_kind, seed)
                ev = evaluate(theta0, problem, probes, opts)
                errs.append(abs(ev.objective - f_exact) / abs(f_exact))
                ks.append(_mean_k(ev))
            err_row[f"r_{p * p}"] = float(np.mean(errs))
            k_row[f"r_{p * p}"] = float(np.mean(ks))
        rows_err.append(err_row)
        rows_k.append(k_row)
    rows = rows_err + rows_k
    fieldnames = list(rows[0].keys())
    path = write_csv(os.path.join(out_dir, "precond_rank.csv"), cfg, fieldnames, rows)
    return rows, path


def _run_noise_sweep(spec, cfg, out_dir):
    rows_err, rows_k = [], []
    for nu in spec.grids["nu"]:
        problem = build_problem(cfg, nu=nu)
        theta0 = resolve_theta0(problem, cfg)
        setup = build_setup(problem, cfg)
        opts = make_eval_options(cfg, setup)
        dp = DenseProblem.from_problem(problem, hyper=HyperPrior(cfg.gamma))
        err_row = {"metric": "rel_err", "nu": nu}
        k_row = {"metric": "mean_lanczos_k", "nu": nu}
        for sig in spec.grids["sigma_m_sq"]:
            theta = theta0.copy()
            theta[0] = sig
            f_exact = exact_objective(dp, theta)
            errs, ks = [], []
            for seed in range(spec.repetitions):
                probes = draw_probes(problem.m, cfg.n_mc, cfg.probe_kind, seed)
                ev = evaluate(theta, problem, probes, opts)
                errs.append(abs(ev.objective - f_exact) / abs(f_exact))
                ks.append(_mean_k(ev))
            err_row[f"sig_{sig:g}"] = float(np.mean(errs))
            k_row[f"sig_{sig:g}"] = float(np.mean(ks))
        rows_err.append(err_row)
        rows_k.append(k_row)
    rows = rows_err + rows_k
    fieldnames = list(rows[0].keys())
    path = write_csv(os.path.join(out_dir, "noise_sweep.csv"), cfg, fieldnames, rows)
    return rows, path


def _run_measurement_scaling(spec, cfg, out_dir):
    rows = []
    notes = []
    for j in spec.grids["j"]:
        problem = build_problem(cfg, j=j)
        theta0 = resolve_theta0(problem, cfg)
        setup = build_setup(problem, cfg)
        opts = make_eval_options(cfg, setup)
        probes = draw_probes(problem.m, cfg.n_mc, cfg.probe_kind, cfg.probe_seed)
        t0 = time.perf_counter()
        ev = evaluate(theta0, problem, probes, opts)
        wall = time.perf_counter() - t0
        row = {
            "j": j,
            "m": problem.m,
            "mean_lanczos_k": _mean_k(ev),
            "matvecs_A": ev.matvecs["A_total"],
            "matvecs_Q": ev.matvecs["Q"],
            "reached_max": ev.reached_max,
            "wallclock_s": wall,
        }
        if problem.m <= SIZE_CAP:
            dp = DenseProblem.from_problem(problem, hyper=HyperPrior(cfg.gamma))
            f_exact = exact_objective(dp, theta0)
            row["rel_err"] = abs(ev.objective - f_exact) / abs(f_exact)
        else:
            row["rel_err"] = ""
            notes.append(f"oracle infeasible at m={problem.m}; rel_err omitted")
        rows.append(row)
    fieldnames = list(rows[0].keys())
    path = write_csv(
        os.path.join(out_dir, "measurement_scaling.csv"), cfg, fieldnames, rows, notes
    )
    return rows, path


def _optimize_summary(problem, cfg, setup, theta0, bounds):
    opts = make_eval_options(cfg, setup)
    probes = draw_probes(problem.m, cfg.n_mc, cfg.probe_kind, cfg.probe_seed)
    evaluations = []

    def fun(theta):
        ev = evaluate(theta, problem, probes, opts)
        evaluations.append(ev)
        return ev.objective, ev.gradient, ev

    result = minimize(fun, theta0, bounds, maxiter=cfg.maxiter, ftol=cfg.ftol, gtol=cfg.gtol)
    ks = [k for ev in evaluations for k in ev.per_probe_k]
    return {
        "iterations": result.nit,
        "evaluations": len(evaluations),
        "mean_lanczos_k": float(np.mean(ks)),
        "reached_max": int(sum(ev.reached_max for ev in evaluations)),
        "objective": result.fun,
        "theta": result.theta,
        "result": result,
    }


def _run_dynamic(spec, cfg, out_dir):
    problem = build_problem(cfg)
    theta0 = resolve_theta0(problem, cfg)
    bounds = cfg.bounds()
    rows = []
    results = {}
    for mode in spec.grids["mode"]:
        setup = build_setup(problem, cfg) if mode == "precond" else None
        summary = _optimize_summary(problem, cfg, setup, theta0, bounds)
        results[mode] = summary
        rows.append(
            {
                "mode": mode,
                "iterations": summary["iterations"],
                "evaluations": summary["evaluations"],
                "mean_lanczos_k": summary["mean_lanczos_k"],
                "reached_max": summary["reached_max"],
                "objective": summary["objective"],
                "theta": " ".join(repr(float(v)) for v in summary["theta"]),
            }
        )
    fieldnames = list(rows[0].keys())
    path = write_csv(os.path.join(out_dir, "dynamic.csv"), cfg, fieldnames, rows)
    return rows, path


_RUNNERS = {
    "mc-accuracy": _run_mc_accuracy,
    "precond-rank": _run_precond_rank,
    "noise-sweep": _run_noise_sweep,
    "measurement-scaling": _run_measurement_scaling,
    "dynamic": _run_dynamic,
}


def run_experiment(spec: ExperimentSpec, cfg: RunConfig, out_dir=None):
    """Run a named experiment; returns (rows, csv_path)."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    return _RUNNERS[spec.name](spec, cfg, out_dir)
