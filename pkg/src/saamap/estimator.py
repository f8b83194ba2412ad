"""Monte Carlo estimator of the negative log marginal posterior and its gradient.

The log-determinant term is estimated by Hutchinson probes pushed through a
preconditioned Lanczos quadrature; the quadratic data term is an exact solve
by preconditioned CG; the gradient reuses the per-probe Lanczos bases, so it
costs only derivative applies on top of the objective.

The probe set is drawn once and frozen, which makes the estimated objective a
deterministic function of the hyperparameters (a sample average
approximation); a changing sample would break deterministic line searches.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import krylov
from .kernels import NoiseModel, noise_ops
from .linop import PsiMap
from .precond import (
    PrecondSetup,
    Preconditioner,
    g_apply,
    gT_apply,
    g_invT_apply,
    noise_preconditioner,
    precond_online,
)

__all__ = [
    "HyperPrior",
    "ProbeSet",
    "EvalOptions",
    "Evaluation",
    "PilotEstimates",
    "draw_probes",
    "neg_log_hyperprior",
    "evaluate",
    "plan_samples",
    "plan_iterations",
    "pilot_planner_inputs",
]


@dataclass(frozen=True)
class HyperPrior:
    """Gamma hyperprior with density proportional to exp(-gamma * sum theta_i)."""

    gamma: float = 1e-4

    def __post_init__(self):
        if not (self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class ProbeSet:
    """Frozen isotropic probe vectors (n_mc x m)."""

    vectors: np.ndarray
    kind: str
    seed: int

    @property
    def n_mc(self) -> int:
        return self.vectors.shape[0]

    @property
    def m(self) -> int:
        return self.vectors.shape[1]


def draw_probes(m: int, n_mc: int, kind: str = "rademacher", seed: int = 0) -> ProbeSet:
    """Draw n_mc isotropic probes of length m.

    Each probe comes from its own seed substream, so the set is bit
    reproducible and independent of evaluation order.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    if kind not in ("rademacher", "gaussian"):
        raise ValueError(f"unknown probe kind {kind!r}")
    children = np.random.SeedSequence(seed).spawn(n_mc)
    vectors = np.empty((n_mc, m))
    for t, child in enumerate(children):
        rng = np.random.default_rng(child)
        if kind == "rademacher":
            vectors[t] = rng.integers(0, 2, size=m) * 2.0 - 1.0
        else:
            vectors[t] = rng.standard_normal(m)
    return ProbeSet(vectors=vectors, kind=kind, seed=seed)


def neg_log_hyperprior(theta, hp: HyperPrior):
    """Value gamma * sum(theta) (additive constant dropped) and its gradient."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("hyperparameters must be positive")
    return hp.gamma * float(np.sum(theta)), np.full(theta.size, hp.gamma)


@dataclass
class EvalOptions:
    precond: Optional[PrecondSetup] = None
    quad_tol: float = 1e-7
    pcg_tol: float = 1e-8
    kmax: int = 350
    threads: int = 1
    hyper: HyperPrior = field(default_factory=HyperPrior)


@dataclass
class Evaluation:
    """Objective value, gradient and diagnostics of one estimator evaluation."""

    objective: float
    gradient: np.ndarray
    per_probe_k: list
    reached_max: int
    matvecs: dict
    pcg_converged: bool
    pcg_iterations: int
    ld: float
    ld_G: float
    lanczos_runs: int
    pcg_solves: int

    def as_record(self, **extra) -> dict:
        rec = {
            "objective": self.objective,
            "gradient": [float(g) for g in self.gradient],
            "per_probe_k": list(self.per_probe_k),
            "reached_max": self.reached_max,
            "matvecs": self.matvecs,
            "pcg_converged": self.pcg_converged,
            "pcg_iterations": self.pcg_iterations,
            "ld": self.ld,
            "ld_G": self.ld_G,
        }
        rec.update(extra)
        return rec

    def to_json_line(self, **extra) -> str:
        return json.dumps(self.as_record(**extra), sort_keys=True)


def evaluate(theta, problem, probes: ProbeSet, opts: Optional[EvalOptions] = None) -> Evaluation:
    """Estimate objective and gradient at theta for a problem instance.

    theta is (sigma_m_sq,) followed by the prior hyperparameters in the
    problem's own order. Non-convergence of a probe's Lanczos loop or of the
    CG solve is flagged in the result, never raised, so an optimizer can keep
    going with a degraded evaluation.
    """
    opts = opts or EvalOptions()
    theta = np.asarray(theta, dtype=float)
    hyp_val, hyp_grad = neg_log_hyperprior(theta, opts.hyper)
    A = problem.A
    m = A.rows
    if probes.m != m:
        raise ValueError(f"probes have length {probes.m}, problem has m={m}")

    # stage 0: operators, derivative handles, preconditioner
    a_count0 = A.matvec_count
    ops = noise_ops(NoiseModel(theta[0]), m)
    Q, dQs = problem.prior.build(theta[1:])
    psi = PsiMap(A, Q, ops.R_map())
    if opts.precond is not None:
        M = opts.precond.M_fn(theta[1:])
        P = precond_online(opts.precond.offline, M, ops)
    else:
        P = noise_preconditioner(ops)
    ld_G = P.logdetG
    a_count_stage0 = A.matvec_count

    def op_precond(v):
        return g_apply(P, psi.apply(gT_apply(P, v)))

    # stage 1: one Lanczos run per probe; log quadratic forms and the
    # inverse square root vectors that the gradient will reuse
    n_mc = probes.n_mc

    def run_probe(t):
        res = krylov.lanczos(op_precond, probes.vectors[t], kmax=opts.kmax, quad_tol=opts.quad_tol)
        q = krylov.logquad(res)
        # zeta_t = G^T (G Psi G^T)^{-1/2} w_t, so that E[zeta zeta^T] = Psi^{-1}
        # (the inverse is sandwiched as Psi^{-1} = G^T (G Psi G^T)^{-1} G)
        zeta = gT_apply(P, krylov.sqrtquad_vec(res))
        return q, zeta, res.k, res.converged

    if opts.threads > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(run_probe, range(n_mc)))
    else:
        results = [run_probe(t) for t in range(n_mc)]

    # aggregation in probe order keeps the sums reproducible
    per_probe_k = [res[2] for res in results]
    reached_max = sum(0 if res[3] else 1 for res in results)
    ld = float(np.sum(np.array([res[0] for res in results])) / n_mc)
    Zeta = np.stack([res[1] for res in results], axis=1)  # (m, n_mc)

    mu = float(getattr(problem, "mu", 0.0))
    if mu != 0.0:
        r_vec = A.apply(np.full(A.cols, mu)) - problem.d
    else:
        r_vec = -problem.d
    sol = krylov.pcg_solve(psi, P, r_vec, tol=opts.pcg_tol, kmax=opts.kmax)
    z = sol.z
    objective = hyp_val + 0.5 * (ld - 2.0 * ld_G) + 0.5 * float(z @ r_vec)
    a_count_stage1 = A.matvec_count

    # stage 2: gradient from the reused probe vectors; the only forward-map
    # work is one adjoint apply per probe plus one for the solve vector
    AtZeta = A.adjoint_apply_mat(Zeta)  # (n, n_mc)
    Atz = A.adjoint_apply(z)
    grad = hyp_grad.astype(float).copy()
    # noise variance component: dPsi = I
    grad[0] += float(np.sum(Zeta * Zeta)) / (2.0 * n_mc) - 0.5 * float(z @ z)
    # prior components: dPsi_i = A dQ_i A^T, evaluated through cached A^T zeta
    for i, dQ in enumerate(dQs):
        DZ = dQ.apply_mat(AtZeta)
        probe_term = float(np.sum(AtZeta * DZ)) / (2.0 * n_mc)
        grad[1 + i] += probe_term - 0.5 * float(Atz @ dQ.apply(Atz))
    # the prior mean is a theta-independent constant here, so the mean
    # derivative term of the gradient vanishes
    a_count_stage2 = A.matvec_count

    matvecs = {
        "A_total": a_count_stage2 - a_count0,
        "A_stage0": a_count_stage0 - a_count0,
        "A_stage1": a_count_stage1 - a_count_stage0,
        "A_stage2": a_count_stage2 - a_count_stage1,
        "Q": Q.matvec_count,
        "psi": psi.matvec_count,
        "dQ": [dq.matvec_count for dq in dQs],
    }
    return Evaluation(
        objective=float(objective),
        gradient=grad,
        per_probe_k=per_probe_k,
        reached_max=reached_max,
        matvecs=matvecs,
        pcg_converged=sol.converged,
        pcg_iterations=sol.iterations,
        ld=ld,
        ld_G=ld_G,
        lanczos_runs=n_mc,
        pcg_solves=1,
    )


def plan_samples(eps: float, delta: float, L_norm: float) -> int:
    """Smallest probe count meeting the absolute-error/failure-probability bound
    32 eps^-2 (||L||^2 + (eps/2) ||L||) log(2/delta), floored at one probe."""
    if not (0 < eps < 1) or not (0 < delta < 1):
        raise ValueError("eps and delta must lie in (0, 1)")
    if L_norm < 0:
        raise ValueError("L_norm must be nonnegative")
    bound = 32.0 * eps**-2 * (L_norm**2 + 0.5 * eps * L_norm) * math.log(2.0 / delta)
    return max(1, math.ceil(bound))


def plan_iterations(eps: float, delta: float, cond: float, m: int) -> int:
    """Smallest Lanczos iteration count for the quadrature accuracy bound.

    Evaluates sqrt(cond + 1)/4 * log(4 eps^-1 (sqrt(cond) + 1) log(2 cond)),
    floored at one and capped at m (an m-step run is exact).
    """
    if not (0 < eps < 1) or not (0 < delta < 1):
        raise ValueError("eps and delta must lie in (0, 1)")
    if cond < 1:
        raise ValueError("condition number must be at least 1")
    if m < 1:
        raise ValueError("m must be at least 1")
    arg = 4.0 / eps * (math.sqrt(cond) + 1.0) * math.log(2.0 * cond)
    if arg <= 1.0:
        return 1
    bound = 0.25 * math.sqrt(cond + 1.0) * math.log(arg)
    return int(min(m, max(1, math.ceil(bound))))


@dataclass
class PilotEstimates:
    """Heuristic planner inputs from a short pilot Lanczos run.

    Ritz extremes of a truncated run underestimate the true spectral range,
    so these are rough estimates, not bounds.
    """

    cond: float
    L_norm: float
    ritz_min: float
    ritz_max: float


def pilot_planner_inputs(op, w, steps: int = 20) -> PilotEstimates:
    """Estimate the condition number and off-diagonal log norm from Ritz values."""
    res = krylov.lanczos(op, w, kmax=steps, quad_tol=0.0)
    lam, _ = res.eig()
    lo, hi = float(lam[0]), float(lam[-1])
    if lo <= 0:
        raise krylov.PositivityError("pilot run produced a nonpositive Ritz value")
    cond = max(hi / lo, 1.0)
    L_norm = max(abs(math.log(hi)), abs(math.log(lo)))
    return PilotEstimates(cond=cond, L_norm=L_norm, ritz_min=lo, ritz_max=hi)
