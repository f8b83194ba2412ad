"""Parametric kernel low-rank approximation Q(theta) ~ U M(theta) U^T.

Chebyshev interpolation in the spatial coordinates and in the kernel
hyperparameters turns the kernel matrix into a fixed factor U (independent
of theta) times a small core M(theta) that can be re-evaluated without
touching the point set or the forward operator.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .kernels import PointGrid

__all__ = [
    "ChebBox",
    "FactorU",
    "ParametricCore",
    "cheb_nodes",
    "phi_interp",
    "interp_weights",
    "build_factor_U",
    "build_core",
    "eval_core_M",
    "save_factor",
    "load_factor",
]

CORE_BUDGET = 50_000_000


@dataclass(frozen=True)
class ChebBox:
    """Axis-aligned box with p Chebyshev nodes per dimension.

    Used both for the spatial box enclosing the points and for the
    hyperparameter box enclosing the interpolated kernel parameters.
    """

    lows: tuple
    highs: tuple
    p: int

    def __post_init__(self):
        object.__setattr__(self, "lows", tuple(float(a) for a in np.atleast_1d(self.lows)))
        object.__setattr__(self, "highs", tuple(float(b) for b in np.atleast_1d(self.highs)))
        if len(self.lows) != len(self.highs):
            raise ValueError("lows and highs must have equal length")
        for a, b in zip(self.lows, self.highs):
            if not a < b:
                raise ValueError(f"empty interval [{a}, {b}]")
        if self.p < 1:
            raise ValueError("p must be at least 1")

    @property
    def dim(self) -> int:
        return len(self.lows)

    def nodes(self, axis: int) -> np.ndarray:
        return cheb_nodes(self.p, self.lows[axis], self.highs[axis])


def cheb_nodes(p: int, alpha: float, beta: float) -> np.ndarray:
    """Roots of the degree-p Chebyshev polynomial mapped to [alpha, beta]."""
    if p < 1:
        raise ValueError("p must be at least 1")
    if not alpha < beta:
        raise ValueError(f"empty interval [{alpha}, {beta}]")
    i = np.arange(1, p + 1)
    zeta = np.cos((2 * i - 1) * np.pi / (2 * p))
    return 0.5 * (beta - alpha) * zeta + 0.5 * (alpha + beta)


def _to_unit(alpha: float, beta: float, x):
    return (2.0 * np.asarray(x, dtype=float) - (alpha + beta)) / (beta - alpha)


def _clamped_unit(alpha: float, beta: float, x, what: str):
    xh = _to_unit(alpha, beta, x)
    if np.any(xh < -1.0) or np.any(xh > 1.0):
        warnings.warn(
            f"{what} outside [{alpha}, {beta}]; clamping to the box",
            RuntimeWarning,
            stacklevel=3,
        )
        xh = np.clip(xh, -1.0, 1.0)
    return xh


def interp_weights(p: int, alpha: float, beta: float, x) -> np.ndarray:
    """Interpolation weights of x against the p Chebyshev nodes on [alpha, beta].

    Row t is the Lagrange basis value for node t:
    1/p + (2/p) * sum_{j=1}^{p-1} T_j(node_t) T_j(x). At the nodes the rows
    reduce to Kronecker deltas, and every row sums to one. Arguments outside
    the box are clamped with a warning.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xh = _clamped_unit(alpha, beta, x, "interpolation argument")
    i = np.arange(1, p + 1)
    theta_nodes = (2 * i - 1) * np.pi / (2 * p)  # arccos of the unit nodes
    theta_x = np.arccos(np.clip(xh, -1.0, 1.0))
    j = np.arange(1, p)
    # T_j(cos t) = cos(j t)
    Tn = np.cos(np.outer(theta_nodes, j))  # (p, p-1)
    Tx = np.cos(np.outer(theta_x, j))      # (k, p-1)
    return 1.0 / p + (2.0 / p) * Tx @ Tn.T


def phi_interp(p: int, alpha: float, beta: float, x: float, y: float) -> float:
    """Interpolating polynomial value 1/p + (2/p) sum_j T_j(x) T_j(y)."""
    if p < 1:
        raise ValueError("p must be at least 1")
    if not alpha < beta:
        raise ValueError(f"empty interval [{alpha}, {beta}]")
    xh = _clamped_unit(alpha, beta, x, "interpolation argument")
    yh = _clamped_unit(alpha, beta, y, "interpolation argument")
    j = np.arange(1, p)
    tx = np.cos(j * np.arccos(float(xh)))
    ty = np.cos(j * np.arccos(float(yh)))
    return float(1.0 / p + (2.0 / p) * np.dot(tx, ty))


@dataclass
class FactorU:
    """Interpolation factor: n x p^d matrix of face-split per-dimension rows."""

    U: np.ndarray
    box: ChebBox
    factors: list

    @property
    def rank(self) -> int:
        return self.U.shape[1]


def build_factor_U(grid: PointGrid, box: ChebBox) -> FactorU:
    """Interpolation matrix of the point set against the tensor Chebyshev grid.

    Row i is the Kronecker product of the per-dimension interpolation rows of
    point x_i, ordered with the last dimension fastest.
    """
    if box.dim != grid.d:
        raise ValueError(f"box dimension {box.dim} does not match grid dimension {grid.d}")
    pts = grid.points
    for axis in range(grid.d):
        lo, hi = box.lows[axis], box.highs[axis]
        slack = 1e-12 * (hi - lo)
        if np.any(pts[:, axis] < lo - slack) or np.any(pts[:, axis] > hi + slack):
            raise ValueError(f"point coordinate outside the box on axis {axis}")
    factors = [
        interp_weights(box.p, box.lows[axis], box.highs[axis], pts[:, axis])
        for axis in range(grid.d)
    ]
    U = factors[0]
    for f in factors[1:]:
        U = (U[:, :, None] * f[:, None, :]).reshape(grid.n, -1)
    return FactorU(U=U, box=box, factors=factors)


@dataclass
class ParametricCore:
    """Kernel tensor sampled on Chebyshev node tuples (x-nodes, theta-nodes, y-nodes).

    Stored unfolded as (r, p_theta, ..., p_theta, r) with r = p^d; contracting
    the middle axes with interpolation weights yields M(theta).
    """

    tensor: np.ndarray
    space_box: ChebBox
    theta_box: ChebBox

    @property
    def rank(self) -> int:
        return self.tensor.shape[0]


def _tensor_grid_points(box: ChebBox) -> np.ndarray:
    axes = [box.nodes(a) for a in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def build_core(kernel_pairwise, space_box: ChebBox, theta_box: ChebBox) -> ParametricCore:
    """Sample the kernel on all Chebyshev node tuples.

    kernel_pairwise(X, Y, tvec) must return the kernel matrix between point
    sets X and Y at hyperparameter vector tvec.
    """
    d = space_box.dim
    k_theta = theta_box.dim
    r = space_box.p**d
    n_theta = theta_box.p**k_theta
    if r * r * n_theta > CORE_BUDGET:
        raise ValueError(
            "core tensor would exceed the memory budget; lower p on one of the boxes"
        )
    Xn = _tensor_grid_points(space_box)
    theta_axes = [theta_box.nodes(a) for a in range(k_theta)]
    tensor = np.empty((r,) + (theta_box.p,) * k_theta + (r,))
    for idx in itertools.product(*(range(theta_box.p) for _ in range(k_theta))):
        tvec = np.array([theta_axes[a][idx[a]] for a in range(k_theta)])
        tensor[(slice(None),) + idx + (slice(None),)] = kernel_pairwise(Xn, Xn, tvec)
    return ParametricCore(tensor=tensor, space_box=space_box, theta_box=theta_box)


def eval_core_M(core: ParametricCore, theta) -> np.ndarray:
    """Contract the theta axes with interpolation weights; returns symmetric r x r.

    Values outside the hyperparameter box are clamped with a warning, so the
    approximation degrades gracefully instead of failing mid line-search.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    box = core.theta_box
    if theta.shape != (box.dim,):
        raise ValueError(f"expected {box.dim} hyperparameters, got shape {theta.shape}")
    M = core.tensor
    for axis in range(box.dim):
        w = interp_weights(box.p, box.lows[axis], box.highs[axis], theta[axis])[0]
        M = np.tensordot(M, w, axes=([1], [0]))
    return 0.5 * (M + M.T)


def save_factor(factor: FactorU, path):
    np.save(path, factor.U)


def load_factor(path) -> np.ndarray:
    return np.load(path)
