"""Low-rank plus diagonal preconditioner built from the parametric kernel factor.

Offline, the forward operator is applied once to the columns of U. Online,
for each hyperparameter instance, a Woodbury factorization of the inverse of
the approximate data-space covariance (AU) M (AU)^T + R is assembled in
O(m r^2) work, giving applies of G, G^T and G^{-T} in O(m r) plus an exact
log-determinant. No forward or adjoint solves happen online.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kernels import NoiseModel, NoiseOps, noise_ops
from .linop import LinearMap

__all__ = [
    "PrecondOffline",
    "Preconditioner",
    "PrecondSetup",
    "IndefiniteCoreError",
    "precond_offline",
    "precond_online",
    "noise_preconditioner",
    "g_apply",
    "gT_apply",
    "g_invT_apply",
    "logdet_g",
    "save_offline",
    "load_offline",
]


class IndefiniteCoreError(ValueError):
    """The core matrix has negative eigenvalues beyond the clip tolerance."""


@dataclass
class PrecondOffline:
    """Precomputed products: AU (m x r) and the factor U it came from."""

    AU: np.ndarray
    U: np.ndarray

    @property
    def r(self) -> int:
        return self.AU.shape[1]

    @property
    def m(self) -> int:
        return self.AU.shape[0]


@dataclass
class Preconditioner:
    """Factor G of the Woodbury identity G^T G = ((AU) M (AU)^T + R)^{-1}.

    G = (I - W diag(Dvec) W^T) R^{-1/2} with W orthonormal and 0 < Dvec < 1,
    so I - W D W^T is SPD and log|det G| is directly available.
    """

    W: np.ndarray
    Dvec: np.ndarray
    noise: NoiseOps
    logdetG: float
    sigma: np.ndarray

    @property
    def m(self) -> int:
        return self.noise.m

    @property
    def rank(self) -> int:
        return self.W.shape[1]


@dataclass
class PrecondSetup:
    """Offline product plus the map from prior hyperparameters to the core M."""

    offline: PrecondOffline
    M_fn: Callable[[np.ndarray], np.ndarray]


def precond_offline(A: LinearMap, U) -> PrecondOffline:
    """Compute AU column-wise; costs exactly r forward applies of A."""
    Uarr = U.U if hasattr(U, "U") else np.asarray(U, dtype=float)
    if Uarr.ndim != 2:
        raise ValueError("U must be a 2-d factor")
    if Uarr.shape[0] != A.cols:
        raise ValueError(
            f"factor has {Uarr.shape[0]} rows but the forward map has {A.cols} columns"
        )
    return PrecondOffline(AU=A.apply_mat(Uarr), U=Uarr)


def _thin_svd(B: np.ndarray, gram_ratio: int = 64):
    """Left singular vectors and singular values of a tall m x r matrix.

    For strongly rectangular inputs the r x r Gram matrix route is used
    (O(m r^2) without touching an m x m object), followed by a symmetric
    polar correction that restores orthonormality of W to machine precision.
    Otherwise LAPACK's thin SVD is used directly.
    """
    m, r = B.shape
    if r == 0:
        return np.zeros((m, 0)), np.zeros(0)
    if m >= gram_ratio * r:
        G = B.T @ B
        lam, V = np.linalg.eigh(0.5 * (G + G.T))
        lam = np.clip(lam[::-1], 0.0, None)
        V = V[:, ::-1]
        s = np.sqrt(lam)
        keep = s > s[0] * 1e-10 if s.size and s[0] > 0 else np.zeros(r, dtype=bool)
        if not np.any(keep):
            return np.zeros((m, 0)), np.zeros(0)
        W = B @ (V[:, keep] / s[keep])
        # polar cleanup: W <- W (W^T W)^{-1/2}
        C = W.T @ W
        cl, cv = np.linalg.eigh(0.5 * (C + C.T))
        W = W @ (cv / np.sqrt(cl)) @ cv.T
        return W, s[keep]
    W, s, _ = np.linalg.svd(B, full_matrices=False)
    return W, s


def precond_online(
    off: PrecondOffline,
    M: np.ndarray,
    noise,
    *,
    clip_tol: float = 0.25,
    drop_tol: float = 1e-14,
) -> Preconditioner:
    """Assemble the Woodbury factor for one hyperparameter instance.

    M must be symmetric positive semidefinite up to interpolation error;
    small negative eigenvalues (within clip_tol relative to the largest) are
    clipped to zero, larger ones raise IndefiniteCoreError. Singular values
    of the scaled factor below drop_tol relative to the largest are dropped,
    shrinking the effective rank. Performs no applies of the forward map.
    """
    ops = noise if isinstance(noise, NoiseOps) else noise_ops(noise, off.m)
    if ops.m != off.m:
        raise ValueError("noise dimension does not match the offline product")
    M = np.asarray(M, dtype=float)
    if M.shape != (off.r, off.r):
        raise ValueError(f"core must be {off.r} x {off.r}, got {M.shape}")
    Ms = 0.5 * (M + M.T)
    lam, V = np.linalg.eigh(Ms)
    lmax = max(float(lam[-1]), 0.0)
    if float(lam[0]) < -clip_tol * lmax - drop_tol:
        raise IndefiniteCoreError(
            f"core has eigenvalue {lam[0]:.3e} below -clip_tol * lambda_max "
            f"({-clip_tol * lmax:.3e}); the low-rank approximation is unusable"
        )
    pos = lam > 0
    if not np.any(pos):
        return noise_preconditioner(ops)
    B = ops.r_inv_sqrt_apply(off.AU) @ (V[:, pos] * np.sqrt(lam[pos]))
    W, s = _thin_svd(B)
    if s.size:
        keep = s > drop_tol * s[0]
        W, s = W[:, keep], s[keep]
    # Dvec = 1 - (1 + s^2)^{-1/2}, evaluated stably for both tiny and huge s
    log1p_s2 = np.log1p(s**2)
    Dvec = -np.expm1(-0.5 * log1p_s2)
    logdetG = -0.5 * ops.logdet_R - 0.5 * float(np.sum(log1p_s2))
    return Preconditioner(W=W, Dvec=Dvec, noise=ops, logdetG=logdetG, sigma=s)


def noise_preconditioner(noise, m: Optional[int] = None) -> Preconditioner:
    """Preconditioner with no low-rank part: G = R^{-1/2}."""
    ops = noise if isinstance(noise, NoiseOps) else noise_ops(noise, m)
    return Preconditioner(
        W=np.zeros((ops.m, 0)),
        Dvec=np.zeros(0),
        noise=ops,
        logdetG=-0.5 * ops.logdet_R,
        sigma=np.zeros(0),
    )


def g_apply(P: Preconditioner, v) -> np.ndarray:
    """G v = (I - W D W^T) R^{-1/2} v."""
    y = P.noise.r_inv_sqrt_apply(v)
    if P.rank == 0:
        return y
    return y - P.W @ (P.Dvec * (P.W.T @ y))


def gT_apply(P: Preconditioner, v) -> np.ndarray:
    """G^T v = R^{-1/2} (I - W D W^T) v."""
    v = np.asarray(v, dtype=float)
    if P.rank:
        v = v - P.W @ (P.Dvec * (P.W.T @ v))
    return P.noise.r_inv_sqrt_apply(v)


def g_invT_apply(P: Preconditioner, v) -> np.ndarray:
    """G^{-T} v = (I + W diag(d / (1 - d)) W^T) R^{1/2} v."""
    y = P.noise.r_sqrt_apply(v)
    if P.rank == 0:
        return y
    one_minus_d = 1.0 - P.Dvec
    if np.any(one_minus_d <= 0):
        raise ValueError("preconditioner is singular: some d_i >= 1")
    return y + P.W @ ((P.Dvec / one_minus_d) * (P.W.T @ y))


def logdet_g(P: Preconditioner) -> float:
    """log |det G| = -1/2 logdet R + sum_i log(1 - d_i)."""
    return P.logdetG


def save_offline(off: PrecondOffline, directory):
    os.makedirs(directory, exist_ok=True)
    np.save(os.path.join(directory, "AU.npy"), off.AU)
    np.save(os.path.join(directory, "U.npy"), off.U)


def load_offline(directory) -> PrecondOffline:
    return PrecondOffline(
        AU=np.load(os.path.join(directory, "AU.npy")),
        U=np.load(os.path.join(directory, "U.npy")),
    )
