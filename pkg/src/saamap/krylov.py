"""Lanczos tridiagonalization with full reorthogonalization, quadrature
extraction of log and inverse-square-root quadratic forms, and a split
preconditioned conjugate gradient solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .linop import LinearMap
from .precond import Preconditioner, g_apply, gT_apply

__all__ = [
    "PositivityError",
    "LanczosResult",
    "PcgResult",
    "lanczos",
    "logquad",
    "sqrtquad_vec",
    "pcg_solve",
]

BREAKDOWN_REL = 1e-14


class PositivityError(RuntimeError):
    """A Ritz value is nonpositive: the operator (or its preconditioned
    form) lost positive definiteness."""


@dataclass
class LanczosResult:
    """Orthonormal basis and tridiagonal coefficients of a Lanczos run.

    gamma holds the k diagonal entries, offdiag the k-1 off-diagonal entries
    of T_k, delta_next the trailing residual coefficient delta_{k+1}, and
    v_next the corresponding next basis vector (None at exact breakdown).
    """

    V: np.ndarray
    gamma: np.ndarray
    offdiag: np.ndarray
    delta_next: float
    v_next: Optional[np.ndarray]
    wnorm: float
    k: int
    converged: bool
    _eig: Optional[tuple] = field(default=None, repr=False)

    def tridiagonal(self) -> np.ndarray:
        T = np.diag(self.gamma)
        if self.k > 1:
            T += np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)
        return T

    def eig(self):
        """Eigendecomposition of T_k, cached so the log and inverse-sqrt
        extractions share one factorization per probe."""
        if self._eig is None:
            if self.k == 1:
                self._eig = (self.gamma.copy(), np.ones((1, 1)))
            else:
                self._eig = eigh_tridiagonal(self.gamma, self.offdiag)
        return self._eig


def _e1_quadform_log(gamma, offdiag) -> float:
    """e1^T log(T) e1 for the symmetric tridiagonal with given coefficients."""
    if len(gamma) == 1:
        lam = np.asarray(gamma)
        first = np.ones(1)
    else:
        lam, S = eigh_tridiagonal(gamma, offdiag)
        first = S[0]
    if lam[0] <= 0:
        raise PositivityError(
            f"nonpositive Ritz value {lam[0]:.3e}; operator is not positive definite"
        )
    return float(np.sum(first**2 * np.log(lam)))


def lanczos(op, w, kmax: int = 350, quad_tol: float = 1e-7) -> LanczosResult:
    """Symmetric Lanczos on an SPD operator with full reorthogonalization.

    op is either a LinearMap or a callable returning the operator image of a
    vector. The recurrence is the standard one: with the previous
    off-diagonal coefficient delta_i, the residual r = op(v_i) - gamma_i v_i
    - delta_i v_{i-1} is reorthogonalized against all stored basis vectors
    (classical Gram-Schmidt, two passes), and delta_{i+1} = ||r||.

    Stopping: from k = 2 on, the run stops once the relative change of
    e1^T log(T_k) e1 between consecutive steps falls below quad_tol; a
    residual coefficient below 1e-14 ||w|| signals an exact invariant
    subspace and also counts as converged. Hitting kmax without either
    leaves converged False.
    """
    apply_fn = op.apply if isinstance(op, LinearMap) else op
    w = np.asarray(w, dtype=float)
    wnorm = float(np.linalg.norm(w))
    if wnorm == 0.0:
        raise ValueError("starting vector must be nonzero")
    m = w.size
    kmax = max(1, int(min(kmax, m)))
    V = np.empty((m, kmax))
    gamma = np.empty(kmax)
    offdiag = np.empty(max(kmax - 1, 0))
    V[:, 0] = w / wnorm
    delta_prev = 0.0
    q_prev = None
    converged = False
    delta_next = 0.0
    v_next = None
    k = 0
    for i in range(kmax):
        u = apply_fn(V[:, i])
        gamma[i] = float(V[:, i] @ u)
        r = u - gamma[i] * V[:, i]
        if i > 0:
            r -= delta_prev * V[:, i - 1]
        # full reorthogonalization against every stored vector, twice
        basis = V[:, : i + 1]
        r -= basis @ (basis.T @ r)
        r -= basis @ (basis.T @ r)
        delta = float(np.linalg.norm(r))
        k = i + 1
        q_k = _e1_quadform_log(gamma[:k], offdiag[: k - 1])
        if q_prev is not None and abs(q_k - q_prev) <= quad_tol * abs(q_k):
            converged = True
            delta_next = delta
            v_next = r / delta if delta > 0 else None
            break
        q_prev = q_k
        if delta <= BREAKDOWN_REL * wnorm:
            converged = True
            delta_next = delta
            v_next = None
            break
        if k == kmax:
            delta_next = delta
            v_next = r / delta if delta > 0 else None
            break
        offdiag[i] = delta
        V[:, i + 1] = r / delta
        delta_prev = delta
    return LanczosResult(
        V=V[:, :k].copy(),
        gamma=gamma[:k].copy(),
        offdiag=offdiag[: k - 1].copy(),
        delta_next=delta_next,
        v_next=v_next,
        wnorm=wnorm,
        k=k,
        converged=converged,
    )


def logquad(res: LanczosResult) -> float:
    """Quadrature value ||w||^2 e1^T log(T_k) e1 of the log quadratic form."""
    lam, S = res.eig()
    if lam[0] <= 0:
        raise PositivityError(
            f"nonpositive Ritz value {lam[0]:.3e}; operator is not positive definite"
        )
    return res.wnorm**2 * float(np.sum(S[0] ** 2 * np.log(lam)))


def sqrtquad_vec(res: LanczosResult) -> np.ndarray:
    """Inverse square root action ||w|| V_k T_k^{-1/2} e1."""
    lam, S = res.eig()
    if lam[0] <= 0:
        raise PositivityError(
            f"nonpositive Ritz value {lam[0]:.3e}; operator is not positive definite"
        )
    coeff = S @ (S[0] / np.sqrt(lam))
    return res.wnorm * (res.V @ coeff)


@dataclass
class PcgResult:
    z: np.ndarray
    converged: bool
    iterations: int
    relres: float


def pcg_solve(
    psi: LinearMap,
    P: Preconditioner,
    rhs,
    tol: float = 1e-8,
    kmax: int = 350,
) -> PcgResult:
    """Solve psi z = rhs by conjugate gradients in split preconditioned form.

    CG runs on (G Psi G^T) y = G rhs and the solution is mapped back as
    z = G^T y. The recurrence residual of the split system drives the inner
    stopping test; on inner convergence the true relative residual
    ||psi z - rhs|| / ||rhs|| is verified (one extra apply) and iteration
    resumes with a tighter inner tolerance if it exceeds tol. Hitting kmax
    returns the current iterate with converged False.
    """
    rhs = np.asarray(rhs, dtype=float)
    rhsnorm = float(np.linalg.norm(rhs))
    if rhsnorm == 0.0:
        return PcgResult(z=np.zeros(rhs.size), converged=True, iterations=0, relres=0.0)

    def op(y):
        return g_apply(P, psi.apply(gT_apply(P, y)))

    b = g_apply(P, rhs)
    bnorm = float(np.linalg.norm(b))
    y = np.zeros(rhs.size)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    inner_tol = tol
    iters = 0
    relres = np.inf
    while iters < kmax:
        q = op(p)
        alpha = rs / float(p @ q)
        y += alpha * p
        r -= alpha * q
        rs_new = float(r @ r)
        iters += 1
        if np.sqrt(rs_new) <= inner_tol * bnorm:
            z = gT_apply(P, y)
            relres = float(np.linalg.norm(psi.apply(z) - rhs)) / rhsnorm
            if relres <= tol:
                return PcgResult(z=z, converged=True, iterations=iters, relres=relres)
            inner_tol *= 0.25
        beta = rs_new / rs
        p = r + beta * p
        rs = rs_new
    z = gT_apply(P, y)
    relres = float(np.linalg.norm(psi.apply(z) - rhs)) / rhsnorm
    return PcgResult(z=z, converged=relres <= tol, iterations=iters, relres=relres)
