"""Assembly and solution of the step-one linear system.

Each iteration's coefficient update solves, per task,

    (X^T D X + sigma * I_s x (I_t + L_P) + sigma * L_Q x I_t) vec(theta) = vec(b)

with ``x`` the Kronecker product under the column-major vec convention.  The
matrix is symmetric positive definite for any ``sigma > 0``.  Small and
medium systems are solved by a cached dense Cholesky factorization, rebuilt
only when ``sigma`` changes; large systems fall back to Jacobi-preconditioned
conjugate gradients driven by matrix-free operator applications.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .model import (
    ProblemData,
    SpatialGraph,
    edge_diff_adjoint,
    temporal_laplacian,
    time_diff_adjoint,
)

__all__ = [
    "LinearSolveError",
    "Precomputed",
    "StepOneSystem",
    "build_rhs",
    "DIRECT_SIZE_LIMIT",
]

# Largest t*s solved by dense Cholesky when mode="auto".
DIRECT_SIZE_LIMIT = 4096


class LinearSolveError(RuntimeError):
    """Raised when an iterative solve fails to reach its tolerance."""

    def __init__(self, message: str, achieved_residual: float):
        super().__init__(f"{message} (achieved relative residual {achieved_residual:.3e})")
        self.achieved_residual = achieved_residual


@dataclass
class Precomputed:
    """Per-fit cache of the weighted Gram matrix and ``X^T D y`` tensors."""

    data: ProblemData

    @cached_property
    def gram(self) -> np.ndarray:
        X = self.data.design
        if self.data.sample_weights is None:
            return X.T @ X
        return X.T @ (self.data.sample_weights[:, None] * X)

    @cached_property
    def xty(self) -> np.ndarray:
        """``X^T D y`` per task, reshaped to a ``(t, s, m)`` tensor."""
        d = self.data.dims
        y = self.data.responses
        if self.data.sample_weights is not None:
            y = y * self.data.sample_weights[:, None]
        cols = self.data.design.T @ y
        return cols.reshape((d.t, d.s, d.m), order="F")

    @cached_property
    def gram_diag(self) -> np.ndarray:
        X = self.data.design
        if self.data.sample_weights is None:
            return np.einsum("kv,kv->v", X, X)
        return np.einsum("k,kv,kv->v", self.data.sample_weights, X, X)


class StepOneSystem:
    """The SPD step-one operator at a fixed ``sigma``, with a cached factorization."""

    def __init__(self, data: ProblemData, graph: SpatialGraph, sigma: float,
                 precomputed: Precomputed | None = None, mode: str = "auto",
                 cg_tol: float = 1e-10, cg_maxiter: int | None = None):
        if not sigma > 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        if graph.node_count != data.dims.s:
            raise ValueError(f"graph has {graph.node_count} nodes, dims.s = {data.dims.s}")
        if mode not in ("auto", "direct", "cg"):
            raise ValueError(f"mode must be auto|direct|cg, got {mode!r}")
        self.data = data
        self.graph = graph
        self.sigma = float(sigma)
        self.pre = precomputed if precomputed is not None else Precomputed(data)
        d = data.dims
        if mode == "auto":
            mode = "direct" if d.ts <= DIRECT_SIZE_LIMIT else "cg"
        self.mode = mode
        self.cg_tol = float(cg_tol)
        self.cg_maxiter = int(cg_maxiter) if cg_maxiter is not None else 10 * d.ts
        self.chol: tuple[np.ndarray, bool] | None = None
        self.fallback_used = False
        self._lap_t = temporal_laplacian(d.t)
        self._lap_s = graph.laplacian()

    # -- dense assembly ------------------------------------------------------

    def dense_matrix(self) -> np.ndarray:
        """Materialize the full system matrix (used by the direct path and tests)."""
        d = self.data.dims
        t, s = d.t, d.s
        M = np.array(self.pre.gram, dtype=np.float64, copy=True)
        block = self.sigma * (np.eye(t) + self._lap_t)
        for j in range(s):
            M[j * t:(j + 1) * t, j * t:(j + 1) * t] += block
        idx = np.arange(t)
        deg = np.diag(self._lap_s)
        for j in range(s):
            M[j * t + idx, j * t + idx] += self.sigma * deg[j]
        for j, j2 in zip(self.graph.head, self.graph.tail):
            M[j * t + idx, j2 * t + idx] -= self.sigma
            M[j2 * t + idx, j * t + idx] -= self.sigma
        return M

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Matrix-free application of the system operator to ``vec(theta)``."""
        d = self.data.dims
        V = v.reshape((d.t, d.s), order="F")
        X = self.data.design
        xv = X @ v
        if self.data.sample_weights is not None:
            xv = xv * self.data.sample_weights
        out = X.T @ xv
        KV = V + self._lap_t @ V + V @ self._lap_s
        return out + self.sigma * KV.reshape(-1, order="F")

    def diagonal(self) -> np.ndarray:
        d = self.data.dims
        kdiag = 1.0 + np.diag(self._lap_t)
        diag = np.add.outer(np.diag(self._lap_s), kdiag).reshape(-1)
        return self.pre.gram_diag + self.sigma * diag

    # -- factorization and solves ---------------------------------------------

    def factorize(self) -> "StepOneSystem":
        """Cholesky-factorize the dense matrix; fall back to CG if it fails."""
        if self.mode != "direct" or self.chol is not None:
            return self
        M = self.dense_matrix()
        try:
            self.chol = sla.cho_factor(M, lower=True, overwrite_a=True,
                                       check_finite=False)
        except np.linalg.LinAlgError:
            self.mode = "cg"
            self.fallback_used = True
        return self

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve for one ``(t, s)`` right-hand side or a ``(t, s, m)`` stack of them.

        Tasks are solved one at a time so the per-iteration cost stays
        proportional to the task count.
        """
        d = self.data.dims
        single = b.ndim == 2
        bt = b[:, :, None] if single else b
        m = bt.shape[2]
        out = np.empty_like(bt)
        for r in range(m):
            vec = bt[:, :, r].reshape(-1, order="F")
            if self.mode == "direct":
                if self.chol is None:
                    self.factorize()
                if self.chol is None:  # fell back during factorize
                    sol = self._cg_solve(vec)
                else:
                    sol = sla.cho_solve(self.chol, vec, check_finite=False)
            else:
                sol = self._cg_solve(vec)
            out[:, :, r] = sol.reshape((d.t, d.s), order="F")
        return out[:, :, 0] if single else out

    def _cg_solve(self, b: np.ndarray) -> np.ndarray:
        bnorm = float(np.linalg.norm(b))
        if bnorm == 0.0:
            return np.zeros_like(b)
        inv_diag = 1.0 / self.diagonal()
        x = np.zeros_like(b)
        r = b.copy()
        z = inv_diag * r
        p = z.copy()
        rz = float(r @ z)
        for _ in range(self.cg_maxiter):
            Ap = self.matvec(p)
            alpha = rz / float(p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            if np.linalg.norm(r) <= self.cg_tol * bnorm:
                return x
            z = inv_diag * r
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        achieved = float(np.linalg.norm(r) / bnorm)
        raise LinearSolveError(
            f"CG did not reach tol={self.cg_tol:g} in {self.cg_maxiter} iterations",
            achieved,
        )


def build_rhs(xty: np.ndarray, w: np.ndarray, z: np.ndarray, u: np.ndarray,
              s: np.ndarray, t: np.ndarray, r: np.ndarray, sigma: float,
              graph: SpatialGraph) -> np.ndarray:
    """Right-hand side of the step-one system for all tasks at once.

    Computes ``X^T D y + P^T(sigma*W - S) + (sigma*Z - T) B^T + sigma*U - R``
    as a ``(t, s, m)`` tensor.
    """
    out = xty + sigma * u - r
    if w.shape[0] > 0:
        out = out + time_diff_adjoint(sigma * w - s)
    if z.shape[1] > 0:
        out = out + edge_diff_adjoint(sigma * z - t, graph)
    return out
