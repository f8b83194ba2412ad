"""Experiment problem generators: static 2-D straight-ray tomography on the
unit square, a dynamic space-time variant with a rotating-Gaussian phantom
and Kronecker structure, noise injection, posterior-mean reconstruction, and
disk round-tripping of instances.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import paramlr
from .kernels import MaternSpec, PointGrid, assemble_Q, dQ_dell
from .krylov import pcg_solve
from .linop import (
    KroneckerMap,
    LinearMap,
    ScaledMap,
    SparseMap,
    identity_map,
    load_matrix_market,
    save_matrix_market,
)
from .precond import PrecondOffline, PrecondSetup, noise_preconditioner, precond_offline

__all__ = [
    "TomoGeometry",
    "ProblemInstance",
    "MaternPrior",
    "KroneckerPrior",
    "build_ray_matrix",
    "make_static_problem",
    "make_dynamic_problem",
    "make_precond_setup",
    "reconstruct",
    "ReconstructionResult",
    "blob_phantom",
    "dynamic_frame",
    "pixel_grid",
    "save_problem",
    "load_problem",
]


# ---------------------------------------------------------------------------
# geometry and ray tracing

@dataclass
class TomoGeometry:
    """Sources and receivers on the boundary of the unit square."""

    n_side: int
    sources: np.ndarray
    receivers: np.ndarray

    @classmethod
    def standard(cls, n_side: int, n_src: int, n_rcv: int) -> "TomoGeometry":
        """Sources on the left edge; receivers split between the opposite
        (right) edge and the adjacent top edge."""
        src = np.column_stack([np.zeros(n_src), (np.arange(n_src) + 0.5) / n_src])
        n_right = (n_rcv + 1) // 2
        n_top = n_rcv - n_right
        right = np.column_stack([np.ones(n_right), (np.arange(n_right) + 0.5) / n_right])
        top = np.column_stack([(np.arange(n_top) + 0.5) / max(n_top, 1), np.ones(n_top)])
        rcv = np.vstack([right, top]) if n_top else right
        return cls(n_side=n_side, sources=src, receivers=rcv)

    @property
    def n_rays(self) -> int:
        return len(self.sources) * len(self.receivers)


def _trace_ray(p0, p1, n_side: int):
    """Exact intersection lengths of the segment p0 -> p1 with the pixels of
    an n x n grid on the unit square. Returns (pixel indices, lengths)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    direction = p1 - p0
    length = float(np.linalg.norm(direction))
    if length < 1e-12:
        return None
    ts = [np.array([0.0, 1.0])]
    lines = np.arange(n_side + 1) / n_side
    for axis in range(2):
        if abs(direction[axis]) > 1e-14:
            t = (lines - p0[axis]) / direction[axis]
            ts.append(t[(t > 0.0) & (t < 1.0)])
    t_all = np.unique(np.concatenate(ts))
    a, b = t_all[:-1], t_all[1:]
    seg = b - a
    keep = seg > 1e-14
    a, seg = a[keep], seg[keep]
    mids = p0[None, :] + (a + 0.5 * seg)[:, None] * direction[None, :]
    ix = np.clip((mids[:, 0] * n_side).astype(int), 0, n_side - 1)
    iy = np.clip((mids[:, 1] * n_side).astype(int), 0, n_side - 1)
    return iy * n_side + ix, seg * length


def build_ray_matrix(geom: TomoGeometry) -> SparseMap:
    """Sparse ray matrix: one row per (source, receiver) pair whose entries are
    the exact pixel intersection lengths of the straight ray. Degenerate rays
    (coincident endpoints) give a zero row and a warning."""
    rows, cols, vals = [], [], []
    n_rcv = len(geom.receivers)
    for i, src in enumerate(geom.sources):
        for j, rcv in enumerate(geom.receivers):
            traced = _trace_ray(src, rcv, geom.n_side)
            if traced is None:
                warnings.warn(
                    f"degenerate ray (source {i} coincides with receiver {j}); row left empty",
                    RuntimeWarning,
                )
                continue
            idx, lens = traced
            row = i * n_rcv + j
            rows.extend([row] * len(idx))
            cols.extend(idx.tolist())
            vals.extend(lens.tolist())
    shape = (geom.n_rays, geom.n_side**2)
    return SparseMap(sp.coo_matrix((vals, (rows, cols)), shape=shape))


def pixel_grid(n_side: int) -> PointGrid:
    """Pixel centers of the n x n grid over the unit square, y-major order."""
    c = (np.arange(n_side) + 0.5) / n_side
    X, Y = np.meshgrid(c, c)  # row index = y, column index = x
    return PointGrid(np.column_stack([X.reshape(-1), Y.reshape(-1)]))


# ---------------------------------------------------------------------------
# phantoms

def blob_phantom(n_side: int) -> np.ndarray:
    """Smooth sum of three Gaussian bumps, flattened in grid order."""
    grid = pixel_grid(n_side).points
    blobs = [(0.35, 0.60, 1.0, 0.12), (0.70, 0.35, 0.8, 0.09), (0.55, 0.78, 0.6, 0.07)]
    s = np.zeros(n_side**2)
    for cx, cy, amp, width in blobs:
        r2 = (grid[:, 0] - cx) ** 2 + (grid[:, 1] - cy) ** 2
        s += amp * np.exp(-r2 / (2.0 * width**2))
    return s


def dynamic_frame(n_side: int, angle: float) -> np.ndarray:
    """Two Gaussian bumps rotated about the domain center by the given angle."""
    grid = pixel_grid(n_side).points
    center = np.array([0.5, 0.5])
    radius = 0.22
    width = 0.08
    s = np.zeros(n_side**2)
    for amp, phase in ((1.0, 0.0), (0.8, np.pi)):
        c = center + radius * np.array([np.cos(angle + phase), np.sin(angle + phase)])
        r2 = (grid[:, 0] - c[0]) ** 2 + (grid[:, 1] - c[1]) ** 2
        s += amp * np.exp(-r2 / (2.0 * width**2))
    return s


# ---------------------------------------------------------------------------
# prior models

class MaternPrior:
    """Static Matern prior over a spatial grid; hyperparameters (sigma_n, ell)."""

    theta_names = ("sigma_n", "ell")

    def __init__(self, grid: PointGrid, nu: float):
        self.grid = grid
        self.nu = nu

    @property
    def n(self) -> int:
        return self.grid.n

    def build(self, tp):
        sigma_n, ell = float(tp[0]), float(tp[1])
        spec = MaternSpec(self.nu, sigma_n, ell)
        Q = assemble_Q(spec, self.grid)
        dQs = [ScaledMap(Q, 2.0 / sigma_n), dQ_dell(spec, self.grid)]
        return Q, dQs

    def low_rank(self, p_space: int, p_theta: int, ell_box):
        """Interpolation factor over the grid plus the core evaluator.

        sigma_n enters the kernel as a pure prefactor and is handled exactly
        by scaling; only the length scale is interpolated.
        """
        box = _bounding_box(self.grid, p_space)
        factor = paramlr.build_factor_U(self.grid, box)
        tbox = paramlr.ChebBox((float(ell_box[0]),), (float(ell_box[1]),), p_theta)
        nu = self.nu

        def kern(X, Y, tvec):
            from .kernels import matern_pairwise

            return matern_pairwise(MaternSpec(nu, 1.0, float(tvec[0])), X, Y)

        core = paramlr.build_core(kern, box, tbox)

        def M_fn(tp):
            return float(tp[0]) ** 2 * paramlr.eval_core_M(core, [float(tp[1])])

        return factor.U, M_fn


class KroneckerPrior:
    """Space-time prior Q_t (x) Q_s; hyperparameters (sigma_n, ell_t, ell_s).

    The temporal factor has unit variance and smoothness 5/2; the spatial
    factor carries sigma_n and its own smoothness.
    """

    theta_names = ("sigma_n", "ell_t", "ell_s")

    def __init__(self, time_grid: PointGrid, space_grid: PointGrid, nu_s: float = 1.5):
        self.time_grid = time_grid
        self.space_grid = space_grid
        self.nu_s = nu_s
        self.nu_t = 2.5

    @property
    def n(self) -> int:
        return self.time_grid.n * self.space_grid.n

    def build(self, tp):
        sigma_n, ell_t, ell_s = (float(x) for x in tp)
        spec_t = MaternSpec(self.nu_t, 1.0, ell_t)
        spec_s = MaternSpec(self.nu_s, sigma_n, ell_s)
        Qt = assemble_Q(spec_t, self.time_grid)
        Qs = assemble_Q(spec_s, self.space_grid)
        Q = KroneckerMap(Qt, Qs)
        dQs = [
            KroneckerMap(Qt, ScaledMap(Qs, 2.0 / sigma_n)),
            KroneckerMap(dQ_dell(spec_t, self.time_grid), Qs),
            KroneckerMap(Qt, dQ_dell(spec_s, self.space_grid)),
        ]
        return Q, dQs

    def low_rank(self, p_time: int, p_space: int, p_theta: int, ell_t_box, ell_s_box):
        """Independent temporal and spatial approximations composed by
        Kronecker product: U = U_t (x) U_s, M = M_t (x) sigma_n^2 M_s."""
        tprior = MaternPrior(self.time_grid, self.nu_t)
        sprior = MaternPrior(self.space_grid, self.nu_s)
        Ut, Mt_fn = tprior.low_rank(p_time, p_theta, ell_t_box)
        Us, Ms_fn = sprior.low_rank(p_space, p_theta, ell_s_box)

        def M_fn(tp):
            sigma_n, ell_t, ell_s = (float(x) for x in tp)
            Mt = Mt_fn([1.0, ell_t])
            Ms = Ms_fn([sigma_n, ell_s])
            return np.kron(Mt, Ms)

        return np.kron(Ut, Us), M_fn


def _bounding_box(grid: PointGrid, p: int) -> paramlr.ChebBox:
    lows, highs = [], []
    for axis in range(grid.d):
        lo = float(grid.points[:, axis].min())
        hi = float(grid.points[:, axis].max())
        pad = max(1e-6, 1e-9 * max(abs(lo), abs(hi), 1.0))
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        lows.append(lo - pad)
        highs.append(hi + pad)
    return paramlr.ChebBox(tuple(lows), tuple(highs), p)


# ---------------------------------------------------------------------------
# problem instances

@dataclass
class ProblemInstance:
    """Forward map, data, point set and prior family defining one experiment."""

    name: str
    A: LinearMap
    d: np.ndarray
    grid: PointGrid
    prior: object
    s_true: Optional[np.ndarray] = None
    true_sigma_m_sq: float = 0.0
    noise_level: float = 0.0
    mu: float = 0.0
    default_theta0: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.A.rows

    @property
    def n(self) -> int:
        return self.A.cols

    @property
    def theta_names(self):
        return ("sigma_m_sq",) + tuple(self.prior.theta_names)


def _add_noise(clean: np.ndarray, noise_level: float, seed: int):
    if noise_level == 0.0:
        return clean.copy(), 0.0
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(clean.size)
    eta = noise_level * (np.linalg.norm(clean) / np.linalg.norm(g)) * g
    d = clean + eta
    return d, float(eta @ eta) / clean.size


def make_static_problem(
    n_side: int = 32,
    j: float = 1.0,
    noise_level: float = 0.02,
    nu: float = 0.5,
    seed: int = 0,
) -> ProblemInstance:
    """Static tomography instance with m = round(32 j) * round(45 j) rays."""
    n_src = max(2, round(32 * j))
    n_rcv = max(3, round(45 * j))
    geom = TomoGeometry.standard(n_side, n_src, n_rcv)
    A = build_ray_matrix(geom)
    s_true = blob_phantom(n_side)
    clean = A.mat @ s_true
    d, true_var = _add_noise(clean, noise_level, seed)
    grid = pixel_grid(n_side)
    return ProblemInstance(
        name=f"static_n{n_side}_j{j:g}_nu{nu:g}_s{seed}",
        A=A,
        d=d,
        grid=grid,
        prior=MaternPrior(grid, nu),
        s_true=s_true,
        true_sigma_m_sq=true_var,
        noise_level=noise_level,
        default_theta0=np.array([1e-3, 0.8147, 0.9058]),
        meta={"kind": "static", "n_side": n_side, "n_src": n_src, "n_rcv": n_rcv,
              "nu": nu, "seed": seed},
    )


def make_dynamic_problem(
    n_side: int = 16,
    n_t: int = 6,
    n_src: int = 8,
    n_rcv: int = 12,
    noise_level: float = 0.02,
    nu_s: float = 1.5,
    seed: int = 0,
) -> ProblemInstance:
    """Space-time tomography with identical per-frame geometry; the forward
    map is I (x) A_s and the prior is Q_t (x) Q_s."""
    geom = TomoGeometry.standard(n_side, n_src, n_rcv)
    A_s = build_ray_matrix(geom)
    frames = np.stack([dynamic_frame(n_side, 2.0 * np.pi * t / n_t) for t in range(n_t)])
    s_true = frames.reshape(-1)
    clean = (A_s.mat @ frames.T).T.reshape(-1)
    d, true_var = _add_noise(clean, noise_level, seed)
    A = KroneckerMap(identity_map(n_t), A_s)
    grid = pixel_grid(n_side)
    time_grid = PointGrid(np.linspace(0.0, 1.0, n_t)[:, None])
    theta0_var = true_var if true_var > 0 else 1e-3
    return ProblemInstance(
        name=f"dynamic_n{n_side}_t{n_t}_s{seed}",
        A=A,
        d=d,
        grid=grid,
        prior=KroneckerPrior(time_grid, grid, nu_s=nu_s),
        s_true=s_true,
        true_sigma_m_sq=true_var,
        noise_level=noise_level,
        default_theta0=np.array([theta0_var, 1.0, 1.0, 1.0]),
        meta={"kind": "dynamic", "n_side": n_side, "n_t": n_t, "n_src": n_src,
              "n_rcv": n_rcv, "nu_s": nu_s, "seed": seed},
    )


# ---------------------------------------------------------------------------
# preconditioner setup and reconstruction

def make_precond_setup(
    problem: ProblemInstance,
    *,
    p_space: int = 8,
    p_theta: int = 25,
    p_time: int = 3,
    ell_box=(0.05, 2.0),
    ell_t_box=None,
    cache_dir=None,
) -> PrecondSetup:
    """Build (or load from cache) the offline product AU and the core map.

    The cache key combines the problem name and the factor rank, so a rank
    change never reuses a stale product.
    """
    if isinstance(problem.prior, KroneckerPrior):
        U, M_fn = problem.prior.low_rank(
            p_time, p_space, p_theta, ell_t_box or ell_box, ell_box
        )
    else:
        U, M_fn = problem.prior.low_rank(p_space, p_theta, ell_box)
    offline = None
    if cache_dir is not None:
        key = os.path.join(cache_dir, f"{problem.name}_r{U.shape[1]}")
        if os.path.exists(os.path.join(key, "AU.npy")):
            from .precond import load_offline

            cached = load_offline(key)
            if cached.AU.shape == (problem.m, U.shape[1]):
                offline = PrecondOffline(AU=cached.AU, U=U)
    if offline is None:
        offline = precond_offline(problem.A, U)
        if cache_dir is not None:
            from .precond import save_offline

            save_offline(offline, os.path.join(cache_dir, f"{problem.name}_r{U.shape[1]}"))
    return PrecondSetup(offline=offline, M_fn=M_fn)


@dataclass
class ReconstructionResult:
    s: np.ndarray
    rel_error: Optional[float]
    pcg_converged: bool
    pcg_iterations: int


def reconstruct(
    problem: ProblemInstance,
    theta,
    *,
    setup: Optional[PrecondSetup] = None,
    pcg_tol: float = 1e-8,
    kmax: int = 1000,
) -> ReconstructionResult:
    """Posterior mean field mu + Q A^T Psi^{-1} (d - A mu) at fixed theta."""
    from .estimator import evaluate  # noqa: F401  (shared conventions)
    from .kernels import NoiseModel, noise_ops
    from .linop import PsiMap
    from .precond import precond_online

    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("hyperparameters must be positive")
    ops = noise_ops(NoiseModel(theta[0]), problem.m)
    Q, _ = problem.prior.build(theta[1:])
    psi = PsiMap(problem.A, Q, ops.R_map())
    if setup is not None:
        P = precond_online(setup.offline, setup.M_fn(theta[1:]), ops)
    else:
        P = noise_preconditioner(ops)
    mu = float(problem.mu)
    rhs = problem.d - (problem.A.apply(np.full(problem.n, mu)) if mu != 0.0 else 0.0)
    sol = pcg_solve(psi, P, rhs, tol=pcg_tol, kmax=kmax)
    s = mu + Q.apply(problem.A.adjoint_apply(sol.z))
    rel = None
    if problem.s_true is not None and np.linalg.norm(problem.s_true) > 0:
        rel = float(np.linalg.norm(s - problem.s_true) / np.linalg.norm(problem.s_true))
    return ReconstructionResult(
        s=s, rel_error=rel, pcg_converged=sol.converged, pcg_iterations=sol.iterations
    )


# ---------------------------------------------------------------------------
# disk round trip

def save_problem(problem: ProblemInstance, directory):
    """Persist an instance as a directory: Matrix Market operator files,
    array files for data and phantom, and a key = value metadata file."""
    os.makedirs(directory, exist_ok=True)
    meta = dict(problem.meta)
    theta0 = problem.default_theta0 if problem.default_theta0 is not None else []
    meta.update(
        {
            "name": problem.name,
            "noise_level": problem.noise_level,
            "true_sigma_m_sq": problem.true_sigma_m_sq,
            "mu": problem.mu,
            "theta0": " ".join(repr(float(v)) for v in theta0),
        }
    )
    if meta.get("kind") == "dynamic":
        save_matrix_market(problem.A.right, os.path.join(directory, "A_space.mtx"))
    else:
        save_matrix_market(problem.A, os.path.join(directory, "A.mtx"))
    np.save(os.path.join(directory, "d.npy"), problem.d)
    if problem.s_true is not None:
        np.save(os.path.join(directory, "s_true.npy"), problem.s_true)
    with open(os.path.join(directory, "meta.txt"), "w") as fh:
        for key, val in sorted(meta.items()):
            fh.write(f"{key} = {val}\n")


def _parse_meta(path) -> dict:
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
    return meta


def load_problem(directory) -> ProblemInstance:
    meta = _parse_meta(os.path.join(directory, "meta.txt"))
    kind = meta.get("kind", "static")
    n_side = int(meta["n_side"])
    grid = pixel_grid(n_side)
    d = np.load(os.path.join(directory, "d.npy"))
    s_path = os.path.join(directory, "s_true.npy")
    s_true = np.load(s_path) if os.path.exists(s_path) else None
    theta0 = None
    if meta.get("theta0"):
        theta0 = np.array([float(x) for x in meta["theta0"].split()])
    common = dict(
        name=meta.get("name", "loaded"),
        d=d,
        grid=grid,
        s_true=s_true,
        true_sigma_m_sq=float(meta.get("true_sigma_m_sq", 0.0)),
        noise_level=float(meta.get("noise_level", 0.0)),
        mu=float(meta.get("mu", 0.0)),
        default_theta0=theta0,
        meta={k: v for k, v in meta.items()},
    )
    if kind == "dynamic":
        A_s = load_matrix_market(os.path.join(directory, "A_space.mtx"))
        n_t = int(meta["n_t"])
        A = KroneckerMap(identity_map(n_t), A_s)
        time_grid = PointGrid(np.linspace(0.0, 1.0, n_t)[:, None])
        prior = KroneckerPrior(time_grid, grid, nu_s=float(meta.get("nu_s", 1.5)))
    else:
        A = load_matrix_market(os.path.join(directory, "A.mtx"))
        prior = MaternPrior(grid, float(meta.get("nu", 0.5)))
    return ProblemInstance(A=A, prior=prior, **common)
