"""Dense exact reference implementations of the objective, gradient and
log-determinant. This module exists to be slow and right: everything is
assembled, factorized by Cholesky, and evaluated without approximation, at
sizes where that is feasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .estimator import HyperPrior
from .linop import materialize

__all__ = ["DenseProblem", "exact_objective", "exact_gradient", "exact_logdet"]

SIZE_CAP = 2000


@dataclass
class DenseProblem:
    """Dense snapshot of a problem: forward matrix, data, prior builders.

    prior_build(theta_prior) must return the dense covariance and the list of
    its dense derivatives with respect to each prior hyperparameter. The mean
    is a theta-independent constant, so its derivative term vanishes.
    """

    A: np.ndarray
    d: np.ndarray
    prior_build: Callable
    mu: float = 0.0
    hyper: HyperPrior = field(default_factory=HyperPrior)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        if self.A.shape[0] > SIZE_CAP:
            raise ValueError(
                f"dense oracle capped at m <= {SIZE_CAP}, got m = {self.A.shape[0]}"
            )

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @classmethod
    def from_problem(cls, problem, hyper: Optional[HyperPrior] = None) -> "DenseProblem":
        """Materialize a matrix-free problem instance for exact evaluation."""
        A = materialize(problem.A)

        def prior_build(tp):
            Q, dQs = problem.prior.build(tp)
            return materialize(Q), [materialize(dq) for dq in dQs]

        return cls(
            A=A,
            d=problem.d,
            prior_build=prior_build,
            mu=float(getattr(problem, "mu", 0.0)),
            hyper=hyper or HyperPrior(),
        )

    def _assemble(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0):
            raise ValueError("hyperparameters must be positive")
        Q, dQs = self.prior_build(theta[1:])
        Psi = self.A @ Q @ self.A.T + theta[0] * np.eye(self.m)
        return Psi, dQs


def exact_logdet(S) -> float:
    """log det of an SPD matrix via Cholesky; failure means the input is not SPD."""
    S = np.asarray(S, dtype=float)
    L = np.linalg.cholesky(S)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def exact_objective(dp: DenseProblem, theta) -> float:
    """gamma sum(theta) + 1/2 logdet Psi + 1/2 (A mu - d)^T Psi^{-1} (A mu - d)."""
    theta = np.asarray(theta, dtype=float)
    Psi, _ = dp._assemble(theta)
    c, low = cho_factor(Psi)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    r = dp.A @ np.full(dp.n, dp.mu) - dp.d if dp.mu != 0.0 else -dp.d
    quad = float(r @ cho_solve((c, low), r))
    return dp.hyper.gamma * float(np.sum(theta)) + 0.5 * logdet + 0.5 * quad


def exact_gradient(dp: DenseProblem, theta) -> np.ndarray:
    """All three gradient terms with dense solves and exact traces."""
    theta = np.asarray(theta, dtype=float)
    Psi, dQs = dp._assemble(theta)
    c, low = cho_factor(Psi)
    r = dp.A @ np.full(dp.n, dp.mu) - dp.d if dp.mu != 0.0 else -dp.d
    z = cho_solve((c, low), r)
    PsiInvA = cho_solve((c, low), dp.A)  # (m, n)
    AtPsiInvA = dp.A.T @ PsiInvA         # (n, n)
    Atz = dp.A.T @ z
    grad = np.full(theta.size, dp.hyper.gamma)
    # noise variance component: dPsi = I
    tr0 = float(np.trace(cho_solve((c, low), np.eye(dp.m))))
    grad[0] += 0.5 * tr0 - 0.5 * float(z @ z)
    for i, dQ in enumerate(dQs):
        tr = float(np.sum(AtPsiInvA * dQ.T))
        grad[1 + i] += 0.5 * tr - 0.5 * float(Atz @ dQ @ Atz)
    return grad
