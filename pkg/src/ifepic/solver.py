"""Jacobi-preconditioned conjugate gradient, the innermost iteration level.

Stops on the relative residual ||r||/||b|| <= tol; the absolute residual
is reported as well for the convergence-history logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class PCGConfig:
    max_iterations: int = 60
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("PCG max_iterations must be >= 1")
        if not (0.0 < self.tolerance < 1.0):
            raise ValueError("PCG tolerance must lie in (0, 1)")


@dataclass
class SolveReport:
    iterations: int
    residual: float        # final absolute residual norm ||Ax - b||
    relative: float        # residual / ||b||
    converged: bool


def pcg_solve(A: sp.csr_matrix, b: np.ndarray, x0: np.ndarray | None,
              config: PCGConfig, track=None) -> tuple[np.ndarray, SolveReport]:
    """Solve the SPD system A x = b.

    `track(x_k)` is called with a copy of each iterate when provided (used
    by property tests). Deterministic for fixed inputs.
    """
    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, 0.0, True)

    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise SolverError("non-positive diagonal entry; assembly produced a non-SPD matrix")
    inv_diag = 1.0 / diag

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    it = 0
    rnorm = float(np.linalg.norm(r))
    if track is not None:
        track(x.copy())
    while rnorm / bnorm > config.tolerance and it < config.max_iterations:
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError("p'Ap <= 0 encountered; matrix is not SPD")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        rnorm = float(np.linalg.norm(r))
        it += 1
        if track is not None:
            track(x.copy())
    rel = rnorm / bnorm
    return x, SolveReport(iterations=it, residual=rnorm, relative=rel,
                          converged=rel <= config.tolerance)
