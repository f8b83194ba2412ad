"""MAP hyperparameter estimation for hierarchical Bayesian linear inverse
problems via a frozen-sample Monte Carlo objective, preconditioned Lanczos
quadrature for log-determinants, and a reusable-basis gradient estimator.
"""

from . import driver, estimator, kernels, krylov, linop, oracle, paramlr, precond, problems

__version__ = "0.1.0"

__all__ = [
    "driver",
    "estimator",
    "kernels",
    "krylov",
    "linop",
    "oracle",
    "paramlr",
    "precond",
    "problems",
    "__version__",
]
