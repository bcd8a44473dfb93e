"""Closed-form proximal operators for the three regularizers.

All maps act blockwise: the temporal prox shrinks time rows, the spatial prox
shrinks edge columns with edge-specific thresholds, and the cross-task prox
composes elementwise soft thresholding with per-fiber group shrinkage (l1
inside, l2 outside; the composition is the exact prox only in this order).
"""

from __future__ import annotations

import numpy as np

from .model import SpatialGraph

__all__ = ["soft_threshold", "block_shrink", "prox_omega", "prox_phi", "prox_psi"]


def _check_threshold(nu: float) -> float:
    nu = float(nu)
    if not np.isfinite(nu) or nu < 0:
        raise ValueError(f"threshold must be finite and >= 0, got {nu}")
    return nu


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return sigma


def soft_threshold(v: np.ndarray, nu: float) -> np.ndarray:
    """Elementwise shrinkage ``sign(v) * max(|v| - nu, 0)``."""
    nu = _check_threshold(nu)
    return np.sign(v) * np.maximum(np.abs(v) - nu, 0.0)


def block_shrink(v: np.ndarray, nu: float) -> np.ndarray:
    """Group shrinkage ``max(1 - nu/||v||, 0) * v``, with 0 at the origin."""
    nu = _check_threshold(nu)
    norm = float(np.linalg.norm(v))
    if norm <= nu or norm == 0.0:
        return np.zeros_like(v)
    return (1.0 - nu / norm) * v


def _group_shrink(a: np.ndarray, nu, axis: int) -> np.ndarray:
    """Vectorized block shrinkage of the slices of ``a`` along ``axis``.

    ``nu`` broadcasts against the norm array (norms keep a singleton axis),
    allowing per-edge thresholds.  Groups with norm <= threshold map to zero.
    """
    norms = np.linalg.norm(a, axis=axis, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    scale = np.maximum(1.0 - nu / safe, 0.0)
    scale = np.where(norms > 0, scale, 0.0)
    return a * scale


def prox_omega(w: np.ndarray, lam_t: float, sigma: float, p: int) -> np.ndarray:
    """Prox of the temporal penalty scaled by ``1/sigma``, applied row-wise."""
    sigma = _check_sigma(sigma)
    nu = _check_threshold(lam_t / sigma)
    if nu == 0.0 or w.size == 0:
        return w.copy()
    if p == 1:
        return soft_threshold(w, nu)
    if p == 2:
        return _group_shrink(w, nu, axis=1)
    raise ValueError(f"p must be 1 or 2, got {p}")


def prox_phi(z: np.ndarray, lam_g: float, sigma: float, q: int,
             graph: SpatialGraph) -> np.ndarray:
    """Prox of the graph-guided penalty scaled by ``1/sigma``, per edge column.

    Each edge column uses its own threshold ``lam_g * w_e / sigma``.
    """
    sigma = _check_sigma(sigma)
    _check_threshold(lam_g)
    if z.shape[1] != graph.n_edges:
        raise ValueError(f"z has {z.shape[1]} edge columns, graph has {graph.n_edges}")
    if lam_g == 0.0 or z.size == 0:
        return z.copy()
    nu = (lam_g / sigma) * graph.weight
    if q == 1:
        return np.sign(z) * np.maximum(np.abs(z) - nu[None, :, None], 0.0)
    if q == 2:
        return _group_shrink(z, nu[None, :, None], axis=0)
    raise ValueError(f"q must be 1 or 2, got {q}")


def prox_psi(u: np.ndarray, lam1: float, lam2: float, sigma: float) -> np.ndarray:
    """Prox of the cross-task sparse group penalty scaled by ``1/sigma``.

    Soft-thresholds every entry at ``lam1/sigma``, then shrinks each
    cross-task fiber ``u[i, j, :]`` at ``lam2/sigma``.
    """
    sigma = _check_sigma(sigma)
    nu1 = _check_threshold(lam1 / sigma)
    nu2 = _check_threshold(lam2 / sigma)
    out = soft_threshold(u, nu1) if nu1 > 0 else u.copy()
    if nu2 > 0:
        out = _group_shrink(out, nu2, axis=2)
    return out
