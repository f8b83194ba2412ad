"""Matrix-free linear operators and their compositions.

Every operator exposes ``apply`` / ``adjoint_apply`` together with a monotone
matvec counter, so downstream cost accounting is done in units of operator
applications instead of machine-dependent flop models.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp
from scipy.io import mmread, mmwrite

__all__ = [
    "DimensionMismatch",
    "LinearMap",
    "DenseMap",
    "SparseMap",
    "DiagonalMap",
    "ZeroMap",
    "ScaledMap",
    "SumMap",
    "ProductMap",
    "KroneckerMap",
    "LowRankMap",
    "PsiMap",
    "identity_map",
    "psi_derivative_apply",
    "materialize",
    "save_matrix_market",
    "load_matrix_market",
]

MATERIALIZE_CAP = 4_000_000


class DimensionMismatch(ValueError):
    """A vector length does not match an operator dimension."""


class _Counter:
    """Monotone counter; atomic so maps stay safe under concurrent applies."""

    __slots__ = ("_lock", "_n")

    def __init__(self):
        self._lock = threading.Lock()
        self._n = 0

    def add(self, k=1):
        with self._lock:
            self._n += k

    @property
    def value(self):
        with self._lock:
            return self._n


class LinearMap:
    """Abstract matrix-free operator.

    Subclasses implement ``_apply`` and ``_adjoint_apply`` (and may override
    the matrix variants for speed). Dimension checks and counting happen
    here; each apply/adjoint_apply increments the counter by exactly one,
    and the matrix variants count one per column. Maps are immutable after
    construction: no apply mutates operator state.
    """

    def __init__(self, rows: int, cols: int):
        self.rows = int(rows)
        self.cols = int(cols)
        self._counter = _Counter()

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def matvec_count(self) -> int:
        return self._counter.value

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.cols,):
            raise DimensionMismatch(
                f"apply expects a vector of length {self.cols}, got shape {v.shape}"
            )
        self._counter.add(1)
        return self._apply(v)

    def adjoint_apply(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.rows,):
            raise DimensionMismatch(
                f"adjoint_apply expects a vector of length {self.rows}, got shape {u.shape}"
            )
        self._counter.add(1)
        return self._adjoint_apply(u)

    def apply_mat(self, V) -> np.ndarray:
        """Apply to each column of V; counts one matvec per column."""
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[0] != self.cols:
            raise DimensionMismatch(
                f"apply_mat expects shape ({self.cols}, k), got {V.shape}"
            )
        self._counter.add(V.shape[1])
        return self._apply_mat(V)

    def adjoint_apply_mat(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        if U.ndim != 2 or U.shape[0] != self.rows:
            raise DimensionMismatch(
                f"adjoint_apply_mat expects shape ({self.rows}, k), got {U.shape}"
            )
        self._counter.add(U.shape[1])
        return self._adjoint_apply_mat(U)

    # -- implementation hooks -------------------------------------------

    def _apply(self, v):
        raise NotImplementedError

    def _adjoint_apply(self, u):
        raise NotImplementedError

    def _apply_mat(self, V):
        out = np.empty((self.rows, V.shape[1]))
        for j in range(V.shape[1]):
            out[:, j] = self._apply(V[:, j])
        return out

    def _adjoint_apply_mat(self, U):
        out = np.empty((self.cols, U.shape[1]))
        for j in range(U.shape[1]):
            out[:, j] = self._adjoint_apply(U[:, j])
        return out


class DenseMap(LinearMap):
    """Operator backed by a dense array."""

    def __init__(self, mat):
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2:
            raise ValueError("DenseMap requires a 2-d array")
        super().__init__(*mat.shape)
        self.mat = mat

    def _apply(self, v):
        return self.mat @ v

    def _adjoint_apply(self, u):
        return self.mat.T @ u

    def _apply_mat(self, V):
        return self.mat @ V

    def _adjoint_apply_mat(self, U):
        return self.mat.T @ U


class SparseMap(LinearMap):
    """Operator backed by row-compressed sparse storage."""

    def __init__(self, mat):
        if not sp.issparse(mat):
            raise ValueError("SparseMap requires a scipy sparse matrix")
        mat = sp.csr_matrix(mat).astype(float)
        super().__init__(*mat.shape)
        self.mat = mat
        # transpose precomputed in CSR form; adjoint applies dominate in
        # normal-equation style products
        self._mat_t = sp.csr_matrix(mat.T)

    @classmethod
    def from_coo(cls, rows, cols, data, shape):
        return cls(sp.coo_matrix((data, (rows, cols)), shape=shape))

    def _apply(self, v):
        return self.mat @ v

    def _adjoint_apply(self, u):
        return self._mat_t @ u

    def _apply_mat(self, V):
        return self.mat @ V

    def _adjoint_apply_mat(self, U):
        return self._mat_t @ U


class DiagonalMap(LinearMap):
    def __init__(self, diag):
        diag = np.asarray(diag, dtype=float)
        if diag.ndim != 1:
            raise ValueError("DiagonalMap requires a 1-d array")
        super().__init__(diag.size, diag.size)
        self.diag = diag

    def _apply(self, v):
        return self.diag * v

    def _adjoint_apply(self, u):
        return self.diag * u

    def _apply_mat(self, V):
        return self.diag[:, None] * V

    _adjoint_apply_mat = _apply_mat


class ZeroMap(LinearMap):
    def _apply(self, v):
        return np.zeros(self.rows)

    def _adjoint_apply(self, u):
        return np.zeros(self.cols)

    def _apply_mat(self, V):
        return np.zeros((self.rows, V.shape[1]))

    def _adjoint_apply_mat(self, U):
        return np.zeros((self.cols, U.shape[1]))


class ScaledMap(LinearMap):
    """alpha * base."""

    def __init__(self, base: LinearMap, alpha: float):
        super().__init__(base.rows, base.cols)
        self.base = base
        self.alpha = float(alpha)

    def _apply(self, v):
        return self.alpha * self.base.apply(v)

    def _adjoint_apply(self, u):
        return self.alpha * self.base.adjoint_apply(u)

    def _apply_mat(self, V):
        return self.alpha * self.base.apply_mat(V)

    def _adjoint_apply_mat(self, U):
        return self.alpha * self.base.adjoint_apply_mat(U)


class SumMap(LinearMap):
    def __init__(self, maps):
        maps = list(maps)
        if not maps:
            raise ValueError("SumMap requires at least one term")
        r, c = maps[0].shape
        for m in maps:
            if m.shape != (r, c):
                raise DimensionMismatch("SumMap terms must share a shape")
        super().__init__(r, c)
        self.maps = maps

    def _apply(self, v):
        out = self.maps[0].apply(v)
        for m in self.maps[1:]:
            out = out + m.apply(v)
        return out

    def _adjoint_apply(self, u):
        out = self.maps[0].adjoint_apply(u)
        for m in self.maps[1:]:
            out = out + m.adjoint_apply(u)
        return out


class ProductMap(LinearMap):
    """Composition maps[0] @ maps[1] @ ... applied right to left."""

    def __init__(self, maps):
        maps = list(maps)
        if not maps:
            raise ValueError("ProductMap requires at least one factor")
        for a, b in zip(maps, maps[1:]):
            if a.cols != b.rows:
                raise DimensionMismatch("ProductMap factors do not chain")
        super().__init__(maps[0].rows, maps[-1].cols)
        self.maps = maps

    def _apply(self, v):
        for m in reversed(self.maps):
            v = m.apply(v)
        return v

    def _adjoint_apply(self, u):
        for m in self.maps:
            u = m.adjoint_apply(u)
        return u


class KroneckerMap(LinearMap):
    """Kronecker product left (x) right of two maps.

    The action is evaluated through the reshape identity: with x viewed as a
    (left.cols, right.cols) array X, the product maps X to L X R^T.
    """

    def __init__(self, left: LinearMap, right: LinearMap):
        super().__init__(left.rows * right.rows, left.cols * right.cols)
        self.left = left
        self.right = right

    def _apply(self, v):
        X = v.reshape(self.left.cols, self.right.cols)
        XRt = self.right.apply_mat(X.T).T  # (left.cols, right.rows)
        Y = self.left.apply_mat(XRt)       # (left.rows, right.rows)
        return Y.reshape(-1)

    def _adjoint_apply(self, u):
        X = u.reshape(self.left.rows, self.right.rows)
        XRt = self.right.adjoint_apply_mat(X.T).T
        Y = self.left.adjoint_apply_mat(XRt)
        return Y.reshape(-1)


class LowRankMap(LinearMap):
    """Symmetric low-rank operator U C U^T (C defaults to the identity)."""

    def __init__(self, U, core=None):
        U = np.asarray(U, dtype=float)
        if U.ndim != 2:
            raise ValueError("LowRankMap requires a 2-d factor")
        super().__init__(U.shape[0], U.shape[0])
        self.U = U
        self.core = None if core is None else np.asarray(core, dtype=float)
        if self.core is not None and self.core.shape != (U.shape[1], U.shape[1]):
            raise DimensionMismatch("core shape must match factor rank")

    def _apply(self, v):
        w = self.U.T @ v
        if self.core is not None:
            w = self.core @ w
        return self.U @ w

    _adjoint_apply = _apply

    def _apply_mat(self, V):
        W = self.U.T @ V
        if self.core is not None:
            W = self.core @ W
        return self.U @ W

    _adjoint_apply_mat = _apply_mat


class PsiMap(LinearMap):
    """Data-space covariance A Q A^T + R of a linear-Gaussian model.

    Q must be symmetric and R diagonal SPD; the result is then symmetric
    positive definite. One apply costs exactly one forward apply, one
    adjoint apply of A, and one apply of Q.
    """

    def __init__(self, A: LinearMap, Q: LinearMap, R: LinearMap):
        if Q.rows != Q.cols or Q.rows != A.cols:
            raise DimensionMismatch("Q must be square with side A.cols")
        if R.rows != R.cols or R.rows != A.rows:
            raise DimensionMismatch("R must be square with side A.rows")
        super().__init__(A.rows, A.rows)
        self.A = A
        self.Q = Q
        self.R = R

    def _apply(self, v):
        return self.A.apply(self.Q.apply(self.A.adjoint_apply(v))) + self.R.apply(v)

    _adjoint_apply = _apply

    def _apply_mat(self, V):
        return self.A.apply_mat(self.Q.apply_mat(self.A.adjoint_apply_mat(V))) + self.R.apply_mat(V)

    _adjoint_apply_mat = _apply_mat


def identity_map(n: int) -> DiagonalMap:
    return DiagonalMap(np.ones(n))


def psi_derivative_apply(psi: PsiMap, dQ, dR, v) -> np.ndarray:
    """Apply the derivative A dQ A^T + dR of a PsiMap to a vector.

    Either dQ or dR may be None, meaning a zero contribution.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (psi.rows,):
        raise DimensionMismatch(
            f"expected a vector of length {psi.rows}, got shape {v.shape}"
        )
    out = np.zeros(psi.rows)
    if dQ is not None:
        if dQ.shape != (psi.A.cols, psi.A.cols):
            raise DimensionMismatch("dQ must be square with side A.cols")
        out += psi.A.apply(dQ.apply(psi.A.adjoint_apply(v)))
    if dR is not None:
        if dR.shape != (psi.rows, psi.rows):
            raise DimensionMismatch("dR must be square with side A.rows")
        out += dR.apply(v)
    return out


def materialize(m: LinearMap, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    """Assemble the dense matrix of a map, column by column.

    Guarded by an entry cap so accidental dense blowups are refused; tests
    that need a dense oracle opt in with an explicit cap.
    """
    if m.rows * m.cols > cap:
        raise ValueError(
            f"refusing to materialize {m.rows}x{m.cols} operator "
            f"({m.rows * m.cols} entries exceeds cap {cap})"
        )
    return m.apply_mat(np.eye(m.cols))


def save_matrix_market(m: LinearMap, path, cap: int = MATERIALIZE_CAP):
    """Write a map to Matrix Market text (coordinate for sparse, else array)."""
    if isinstance(m, SparseMap):
        mmwrite(path, m.mat)
    elif isinstance(m, DiagonalMap):
        mmwrite(path, sp.diags(m.diag).tocoo())
    elif isinstance(m, DenseMap):
        mmwrite(path, m.mat)
    else:
        mmwrite(path, materialize(m, cap=cap))


def load_matrix_market(path) -> LinearMap:
    mat = mmread(path)
    if sp.issparse(mat):
        return SparseMap(mat)
    return DenseMap(np.asarray(mat))
