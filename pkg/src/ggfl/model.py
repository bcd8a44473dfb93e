"""Problem data, spatial graphs, difference operators, and objective evaluation.

Coefficients for ``m`` tasks are stored as a dense ``(t, s, m)`` float tensor:
axis 0 is the time lag, axis 1 the spatial location, axis 2 the task.  Slice
``theta[:, :, r]`` is task ``r``'s coefficient matrix, ``theta[i, :, r]`` a
time row, ``theta[:, j, r]`` a location column, and ``theta[i, j, :]`` the
cross-task fiber at ``(i, j)``.

Vectorization is column-major throughout: ``vec`` of a ``(t, s)`` matrix
stacks its columns, so the time index varies fastest.  Rows of the design
matrix hold predictors vectorized with the same convention, which fixes the
Kronecker ordering used by the step-one linear system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dims",
    "SpatialGraph",
    "ProblemData",
    "Hyperparams",
    "build_grid_graph",
    "time_diff",
    "time_diff_adjoint",
    "edge_diff",
    "edge_diff_adjoint",
    "temporal_laplacian",
    "laplacians",
    "mat_to_vec",
    "vec_to_mat",
    "coeff_to_columns",
    "columns_to_coeff",
    "predict",
    "loss_value",
    "penalty_value",
    "objective",
    "loss_gradient",
]


@dataclass(frozen=True)
class Dims:
    """Problem dimensions: ``t`` time lags, ``s`` locations, ``m`` tasks, ``n`` samples."""

    t: int
    s: int
    m: int = 1
    n: int = 0

    def __post_init__(self):
        if self.t < 1 or self.s < 1 or self.m < 1:
            raise ValueError(f"t, s, m must be >= 1, got ({self.t}, {self.s}, {self.m})")
        if self.n < 0:
            raise ValueError(f"n must be >= 0, got {self.n}")

    @property
    def ts(self) -> int:
        return self.t * self.s


@dataclass(frozen=True)
class SpatialGraph:
    """Weighted undirected graph over ``s`` spatial locations.

    Edges are canonicalized to ``head < tail`` and sorted lexicographically;
    the position of an edge in the sorted order is its column index in the
    incidence matrix.  Weights enter only the spatial penalty; the Laplacian
    uses the unweighted edge set (degree on the diagonal, -1 per edge).
    """

    node_count: int
    head: np.ndarray  # smaller endpoint per edge
    tail: np.ndarray  # larger endpoint per edge
    weight: np.ndarray

    @classmethod
    def from_edges(cls, node_count: int, edges) -> "SpatialGraph":
        """Build a graph from an iterable of ``(j, j2, weight)`` triples."""
        if node_count < 1:
            raise ValueError(f"node_count must be >= 1, got {node_count}")
        canon = []
        for j, j2, w in edges:
            j, j2 = int(j), int(j2)
            if j == j2:
                raise ValueError(f"self-loop at node {j}")
            if not (0 <= j < node_count and 0 <= j2 < node_count):
                raise ValueError(f"edge ({j}, {j2}) out of range for {node_count} nodes")
            if w <= 0:
                raise ValueError(f"edge ({j}, {j2}) has non-positive weight {w}")
            canon.append((min(j, j2), max(j, j2), float(w)))
        canon.sort(key=lambda e: (e[0], e[1]))
        for a, b in zip(canon, canon[1:]):
            if a[:2] == b[:2]:
                raise ValueError(f"duplicate edge {a[:2]}")
        head = np.array([e[0] for e in canon], dtype=np.intp)
        tail = np.array([e[1] for e in canon], dtype=np.intp)
        weight = np.array([e[2] for e in canon], dtype=np.float64)
        return cls(node_count, head, tail, weight)

    @property
    def n_edges(self) -> int:
        return self.head.size

    def edge_list(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(w)) for a, b, w in zip(self.head, self.tail, self.weight)]

    def incidence(self) -> np.ndarray:
        """Dense node-arc incidence matrix, shape ``(s, n_edges)``: +1 at head, -1 at tail."""
        B = np.zeros((self.node_count, self.n_edges))
        cols = np.arange(self.n_edges)
        B[self.head, cols] = 1.0
        B[self.tail, cols] = -1.0
        return B

    def laplacian(self) -> np.ndarray:
        """Unweighted graph Laplacian: ``deg(v_j)`` on the diagonal, -1 at edges."""
        L = np.zeros((self.node_count, self.node_count))
        for j, j2 in zip(self.head, self.tail):
            L[j, j] += 1.0
            L[j2, j2] += 1.0
            L[j, j2] -= 1.0
            L[j2, j] -= 1.0
        return L


def build_grid_graph(rows: int, cols: int) -> SpatialGraph:
    """4-neighbor grid graph with unit weights.

    Nodes are indexed column-major, ``node(p, q) = p + q * rows``, matching the
    column-major vectorization of a ``rows x cols`` latent field.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must have positive shape, got {rows}x{cols}")
    edges = []
    for q in range(cols):
        for p in range(rows):
            j = p + q * rows
            if p + 1 < rows:
                edges.append((j, j + 1, 1.0))
            if q + 1 < cols:
                edges.append((j, j + rows, 1.0))
    return SpatialGraph.from_edges(rows * cols, edges)


@dataclass(frozen=True)
class ProblemData:
    """Design matrix, per-task responses, and optional positive sample weights.

    ``design`` has shape ``(n, t*s)`` with row ``k`` the column-major
    vectorization of the k-th predictor matrix; ``responses`` has shape
    ``(n, m)`` with column ``r`` the response vector of task ``r``.
    """

    dims: Dims
    design: np.ndarray
    responses: np.ndarray
    sample_weights: np.ndarray | None = None

    def __post_init__(self):
        design = np.ascontiguousarray(self.design, dtype=np.float64)
        responses = np.ascontiguousarray(self.responses, dtype=np.float64)
        if responses.ndim == 1:
            responses = responses[:, None]
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "responses", responses)
        d = self.dims
        if design.shape != (d.n, d.ts):
            raise ValueError(f"design shape {design.shape} != ({d.n}, {d.ts})")
        if responses.shape != (d.n, d.m):
            raise ValueError(f"responses shape {responses.shape} != ({d.n}, {d.m})")
        if self.sample_weights is not None:
            w = np.ascontiguousarray(self.sample_weights, dtype=np.float64)
            if w.shape != (d.n,):
                raise ValueError(f"sample_weights shape {w.shape} != ({d.n},)")
            if not np.all(w > 0):
                raise ValueError("sample_weights must be strictly positive")
            object.__setattr__(self, "sample_weights", w)

    def weights(self) -> np.ndarray:
        """Sample weights, defaulting to all ones."""
        if self.sample_weights is None:
            return np.ones(self.dims.n)
        return self.sample_weights


@dataclass(frozen=True)
class Hyperparams:
    """Regularization strengths and the norms used on temporal/spatial differences.

    ``lam1``/``lam2`` weight the elementwise l1 and cross-task group l2
    penalties, ``lam_t``/``lam_g`` the temporal fused and graph-guided
    penalties.  Only ``p, q in {1, 2}`` admit closed-form proximal maps.
    """

    lam1: float = 0.0
    lam2: float = 0.0
    lam_t: float = 0.0
    lam_g: float = 0.0
    p: int = 2
    q: int = 2

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam_t", "lam_g"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.p not in (1, 2) or self.q not in (1, 2):
            raise ValueError(f"p, q must be in {{1, 2}}, got p={self.p}, q={self.q}")


# ---------------------------------------------------------------------------
# Difference operators and their adjoints.
# ---------------------------------------------------------------------------

def time_diff(theta: np.ndarray) -> np.ndarray:
    """Consecutive time-row differences: output row ``i`` is ``theta[i] - theta[i+1]``."""
    return theta[:-1] - theta[1:]


def time_diff_adjoint(w: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`time_diff`; maps ``(t-1, ...)`` back to ``(t, ...)``."""
    out = np.zeros((w.shape[0] + 1,) + w.shape[1:])
    out[:-1] += w
    out[1:] -= w
    return out


def edge_diff(theta: np.ndarray, graph: SpatialGraph) -> np.ndarray:
    """Per-edge column differences: column ``e`` is ``theta[:, head_e] - theta[:, tail_e]``."""
    if theta.shape[1] != graph.node_count:
        raise ValueError(f"theta has {theta.shape[1]} locations, graph has {graph.node_count}")
    return theta[:, graph.head] - theta[:, graph.tail]


def edge_diff_adjoint(z: np.ndarray, graph: SpatialGraph) -> np.ndarray:
    """Adjoint of :func:`edge_diff`; scatter-adds edge columns back to nodes."""
    if z.shape[1] != graph.n_edges:
        raise ValueError(f"z has {z.shape[1]} edge columns, graph has {graph.n_edges}")
    out = np.zeros((z.shape[0], graph.node_count) + z.shape[2:])
    np.add.at(out, (slice(None), graph.head), z)
    np.subtract.at(out, (slice(None), graph.tail), z)
    return out


def temporal_laplacian(t: int) -> np.ndarray:
    """Tridiagonal ``P^T P``: diagonal ``(1, 2, ..., 2, 1)`` with -1 off-diagonals."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    L = np.zeros((t, t))
    if t == 1:
        return L
    idx = np.arange(t)
    L[idx, idx] = 2.0
    L[0, 0] = L[-1, -1] = 1.0
    L[idx[:-1], idx[1:]] = -1.0
    L[idx[1:], idx[:-1]] = -1.0
    return L


def laplacians(graph: SpatialGraph, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Temporal and spatial Laplacians ``(L_P, L_Q)`` for ``t`` lags and the given graph."""
    return temporal_laplacian(t), graph.laplacian()


# ---------------------------------------------------------------------------
# Vectorization helpers (column-major convention).
# ---------------------------------------------------------------------------

def mat_to_vec(a: np.ndarray) -> np.ndarray:
    """Column-major vectorization of a ``(t, s)`` matrix."""
    return a.reshape(-1, order="F")


def vec_to_mat(v: np.ndarray, t: int, s: int) -> np.ndarray:
    """Inverse of :func:`mat_to_vec`."""
    return v.reshape((t, s), order="F")


def coeff_to_columns(theta: np.ndarray) -> np.ndarray:
    """Reshape a ``(t, s, m)`` tensor to ``(t*s, m)`` with column ``r = vec(theta[:, :, r])``."""
    t, s, m = theta.shape
    return theta.reshape((t * s, m), order="F")


def columns_to_coeff(cols: np.ndarray, t: int, s: int) -> np.ndarray:
    """Inverse of :func:`coeff_to_columns`."""
    m = cols.shape[1]
    return cols.reshape((t, s, m), order="F")


# ---------------------------------------------------------------------------
# Objective and gradient.
# ---------------------------------------------------------------------------

def predict(design: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Fitted values ``<X_k, theta^(r)>`` for all samples and tasks, shape ``(n, m)``."""
    t = theta.shape[0]
    s = theta.shape[1]
    cols = theta.reshape((t * s, -1), order="F")
    return design @ cols


def loss_value(data: ProblemData, theta: np.ndarray) -> float:
    """Weighted squared loss ``0.5 * sum_r ||sqrt(d) * (y^(r) - X theta^(r))||^2``."""
    resid = data.responses - predict(data.design, theta)
    d = data.weights()
    return 0.5 * float(np.sum(d[:, None] * resid * resid))


def penalty_value(hp: Hyperparams, theta: np.ndarray, graph: SpatialGraph) -> float:
    """Sum of the three regularizers evaluated at ``theta``."""
    total = 0.0
    if hp.lam_t > 0 and theta.shape[0] > 1:
        w = time_diff(theta)
        if hp.p == 1:
            total += hp.lam_t * float(np.abs(w).sum())
        else:
            total += hp.lam_t * float(np.linalg.norm(w, axis=1).sum())
    if hp.lam_g > 0 and graph.n_edges > 0:
        z = edge_diff(theta, graph)
        if hp.q == 1:
            total += hp.lam_g * float((graph.weight[None, :, None] * np.abs(z)).sum())
        else:
            total += hp.lam_g * float((graph.weight[:, None] * np.linalg.norm(z, axis=0)).sum())
    if hp.lam1 > 0:
        total += hp.lam1 * float(np.abs(theta).sum())
    if hp.lam2 > 0:
        total += hp.lam2 * float(np.linalg.norm(theta, axis=2).sum())
    return total


def objective(data: ProblemData, hp: Hyperparams, theta: np.ndarray,
              graph: SpatialGraph) -> float:
    """Full composite objective: weighted loss plus all penalties."""
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("theta contains non-finite entries")
    return loss_value(data, theta) + penalty_value(hp, theta, graph)


def loss_gradient(data: ProblemData, theta: np.ndarray) -> np.ndarray:
    """Gradient of the weighted squared loss, one ``(t, s)`` slice per task."""
    t, s, m = theta.shape
    resid = predict(data.design, theta) - data.responses
    if data.sample_weights is not None:
        resid = resid * data.sample_weights[:, None]
    grad_cols = data.design.T @ resid
    return columns_to_coeff(grad_cols, t, s)
