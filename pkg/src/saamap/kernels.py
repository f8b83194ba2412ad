"""Matern covariance family and the diagonal noise model.

Only the half-integer smoothness values 1/2, 3/2, 5/2 are supported; their
closed exponential-polynomial forms avoid Bessel evaluations and admit exact
length-scale derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .linop import DenseMap, DiagonalMap, ScaledMap

__all__ = [
    "SUPPORTED_NU",
    "MaternSpec",
    "PointGrid",
    "NoiseModel",
    "NoiseOps",
    "matern_eval",
    "matern_pairwise",
    "assemble_Q",
    "dQ_dsigma",
    "dQ_dell",
    "noise_ops",
]

SUPPORTED_NU = (0.5, 1.5, 2.5)

ASSEMBLY_CAP = 4_000_000


@dataclass(frozen=True)
class MaternSpec:
    """Smoothness nu in {1/2, 3/2, 5/2}, standard deviation sigma_n, length scale ell."""

    nu: float
    sigma_n: float
    ell: float

    def __post_init__(self):
        if self.nu not in SUPPORTED_NU:
            raise ValueError(f"nu must be one of {SUPPORTED_NU}, got {self.nu}")
        if not (self.sigma_n > 0):
            raise ValueError(f"sigma_n must be positive, got {self.sigma_n}")
        if not (self.ell > 0):
            raise ValueError(f"ell must be positive, got {self.ell}")


class PointGrid:
    """Finite point set in R^d (d in 1..3) carrying the field unknowns."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError("points must be an (n, d) array")
        if pts.shape[1] not in (1, 2, 3):
            raise ValueError(f"spatial dimension must be 1, 2 or 3, got {pts.shape[1]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic noise R = sigma_m_sq * I."""

    sigma_m_sq: float

    def __post_init__(self):
        if not (self.sigma_m_sq > 0):
            raise ValueError(f"sigma_m_sq must be positive, got {self.sigma_m_sq}")


def _kappa(spec: MaternSpec, r):
    """Kernel value at distance(s) r."""
    s2 = spec.sigma_n**2
    if spec.nu == 0.5:
        return s2 * np.exp(-r / spec.ell)
    if spec.nu == 1.5:
        u = (np.sqrt(3.0) / spec.ell) * r
        return s2 * (1.0 + u) * np.exp(-u)
    u = (np.sqrt(5.0) / spec.ell) * r
    return s2 * (1.0 + u + u**2 / 3.0) * np.exp(-u)


def _dkappa_dell(spec: MaternSpec, r):
    """Exact derivative of the kernel with respect to ell at distance(s) r."""
    s2 = spec.sigma_n**2
    if spec.nu == 0.5:
        return s2 * (r / spec.ell**2) * np.exp(-r / spec.ell)
    if spec.nu == 1.5:
        u = (np.sqrt(3.0) / spec.ell) * r
        return s2 * (u**2 / spec.ell) * np.exp(-u)
    u = (np.sqrt(5.0) / spec.ell) * r
    return s2 * (u**2 * (1.0 + u) / (3.0 * spec.ell)) * np.exp(-u)


def matern_eval(spec: MaternSpec, x, y) -> float:
    """Evaluate the kernel at a single pair of points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    r = np.linalg.norm(x - y)
    return float(_kappa(spec, r))


def matern_pairwise(spec: MaternSpec, X, Y=None) -> np.ndarray:
    """Kernel matrix between two point sets (rows of X and Y)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    return _kappa(spec, cdist(X, Y))


def _check_budget(n: int):
    if n * n > ASSEMBLY_CAP:
        raise ValueError(
            f"dense covariance assembly for n={n} exceeds the {ASSEMBLY_CAP}-entry budget"
        )


def assemble_Q(spec: MaternSpec, grid: PointGrid) -> DenseMap:
    """Dense covariance operator with entries kappa(x_i, x_j)."""
    _check_budget(grid.n)
    K = _kappa(spec, cdist(grid.points, grid.points))
    K = 0.5 * (K + K.T)  # assembled symmetrically
    return DenseMap(K)


def dQ_dsigma(spec: MaternSpec, grid: PointGrid) -> ScaledMap:
    """Derivative of Q with respect to sigma_n: (2 / sigma_n) Q."""
    return ScaledMap(assemble_Q(spec, grid), 2.0 / spec.sigma_n)


def dQ_dell(spec: MaternSpec, grid: PointGrid) -> DenseMap:
    """Entrywise derivative of Q with respect to the length scale."""
    _check_budget(grid.n)
    D = _dkappa_dell(spec, cdist(grid.points, grid.points))
    D = 0.5 * (D + D.T)
    return DenseMap(D)


class NoiseOps:
    """Apply handles and scalars for R = sigma_m_sq * I on R^m.

    R is trivially invertible, so inverse and square-root applies are exact
    scalar scalings; all handles accept vectors or matrices.
    """

    def __init__(self, model: NoiseModel, m: int):
        self.model = model
        self.m = int(m)
        self.sigma_m_sq = model.sigma_m_sq
        self._inv = 1.0 / model.sigma_m_sq
        self._inv_sqrt = model.sigma_m_sq**-0.5
        self._sqrt = model.sigma_m_sq**0.5

    def r_apply(self, v):
        return self.sigma_m_sq * np.asarray(v, dtype=float)

    def r_inv_apply(self, v):
        return self._inv * np.asarray(v, dtype=float)

    def r_inv_sqrt_apply(self, v):
        return self._inv_sqrt * np.asarray(v, dtype=float)

    def r_sqrt_apply(self, v):
        return self._sqrt * np.asarray(v, dtype=float)

    @property
    def logdet_R(self) -> float:
        return self.m * np.log(self.sigma_m_sq)

    def R_map(self) -> DiagonalMap:
        return DiagonalMap(np.full(self.m, self.sigma_m_sq))

    def dR_dsigma_m_sq(self) -> DiagonalMap:
        return DiagonalMap(np.ones(self.m))


def noise_ops(model: NoiseModel, m: int) -> NoiseOps:
    return NoiseOps(model, m)
