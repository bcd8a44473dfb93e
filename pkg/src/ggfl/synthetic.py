"""Seeded synthetic data: matrix-variate Gaussian predictors and structured coefficients.

Predictors are drawn with a separable (Kronecker) covariance: an AR-style
temporal factor and a block-diagonal spatial factor with one equicorrelated
block per grid column.  Coefficients start from a Gaussian-smoothed latent
field on the grid, decay geometrically over time with a single additive jump
at a shared change point, and are hard-thresholded at the end.

Randomness comes from counter-based Philox streams keyed by ``(seed, tag)``,
one stream per purpose (latent field per task, change point, predictors and
noise per split), so regeneration of any part is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Dims, ProblemData, SpatialGraph, build_grid_graph

__all__ = [
    "GenConfig",
    "SyntheticDataset",
    "stream",
    "kron_covariances",
    "gaussian_smooth",
    "latent_field",
    "draw_change_point",
    "gen_coefficient",
    "gen_predictors",
    "gen_dataset",
]

# Stream tags; the full key of a stream is (seed, TAG [+ offset]).
TAG_CHANGE_POINT = 1
TAG_LATENT = 1000        # + task index
TAG_DESIGN = 2000        # + split index (0 train, 1 val, 2 test)
TAG_NOISE = 3000         # + split index * 1024 + task index


def stream(seed: int, tag: int) -> np.random.Generator:
    """Philox generator for the sub-stream ``tag`` of ``seed``."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(tag)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class GenConfig:
    """Generator settings; defaults follow the simulation protocol."""

    t: int
    grid_rows: int
    grid_cols: int
    m: int = 1
    n_train: int = 100
    n_val: int = 1000
    n_test: int = 1000
    noise_var: float = 1e-4
    ar_decay: float = 0.9
    block_mix: tuple[float, float] = (0.4, 0.6)
    evolve_decay: float = 0.99
    jump: float = 0.2
    threshold: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.t < 5:
            raise ValueError(
                f"t must be >= 5 so the change-point range {{3,...,t-2}} is "
                f"nonempty, got t={self.t}")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid shape must be positive")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be >= 0")
        if not self.noise_var > 0:
            raise ValueError(f"noise_var must be > 0, got {self.noise_var}")
        if not (0 < self.evolve_decay <= 1):
            raise ValueError(f"evolve_decay must be in (0, 1], got {self.evolve_decay}")

    @property
    def s(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class SyntheticDataset:
    config: GenConfig
    graph: SpatialGraph
    theta_true: np.ndarray  # (t, s, m)
    change_point: int       # 1-based time index of the jump
    train: ProblemData
    val: ProblemData
    test: ProblemData


def kron_covariances(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Temporal Toeplitz factor and block-diagonal spatial factor.

    The temporal entry ``(i, i')`` is ``ar_decay ** |i - i'|``; the spatial
    factor repeats one equicorrelated block ``a*I + b*11^T`` of size
    ``grid_rows`` per grid column (column-major node order makes each grid
    column contiguous).
    """
    idx = np.arange(cfg.t)
    sigma_t = cfg.ar_decay ** np.abs(idx[:, None] - idx[None, :])
    a, b = cfg.block_mix
    block = a * np.eye(cfg.grid_rows) + b * np.ones((cfg.grid_rows, cfg.grid_rows))
    sigma_s = np.kron(np.eye(cfg.grid_cols), block)
    return sigma_t, sigma_s


def gaussian_smooth(field_: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian blur over the whole grid.

    ``out[p, q] = (1/2pi) * sum_{p', q'} exp(-((p-p')^2 + (q-q')^2)/2) * in[p', q']``,
    computed separably.
    """
    rows, cols = field_.shape
    pr = np.arange(rows)
    pc = np.arange(cols)
    kr = np.exp(-0.5 * (pr[:, None] - pr[None, :]) ** 2)
    kc = np.exp(-0.5 * (pc[:, None] - pc[None, :]) ** 2)
    return (kr @ field_ @ kc.T) / (2.0 * np.pi)


def latent_field(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Latent grid field: six roughly equal blocks in a 3x2 layout.

    The middle-left block is N(1, 0.1), the lower-left N(-1, 0.1) (second
    argument a variance), the other four blocks zero.  Row boundaries fall at
    multiples of ``ceil(rows/3)``, the column boundary at ``ceil(cols/2)``;
    remainders are absorbed by the last block.
    """
    rows, cols = cfg.grid_rows, cfg.grid_cols
    S = np.zeros((rows, cols))
    r1 = min(int(np.ceil(rows / 3)), rows)
    r2 = min(2 * r1, rows)
    c1 = min(int(np.ceil(cols / 2)), cols)
    std = np.sqrt(0.1)
    S[r1:r2, :c1] = 1.0 + std * rng.standard_normal((max(r2 - r1, 0), c1))
    S[r2:, :c1] = -1.0 + std * rng.standard_normal((max(rows - r2, 0), c1))
    return S


def draw_change_point(cfg: GenConfig, rng: np.random.Generator) -> int:
    """Uniform draw from {3, ..., t-2} (1-based time indices)."""
    return int(rng.integers(3, cfg.t - 2, endpoint=True))


def gen_coefficient(cfg: GenConfig, rng: np.random.Generator, change_point: int,
                    apply_threshold: bool = True) -> np.ndarray:
    """One task's ``(t, s)`` coefficient matrix.

    Row 1 is the vectorized smoothed latent field; subsequent rows follow
    ``theta_i = evolve_decay * theta_{i-1} + jump * [i == change_point]``.
    Entries below ``threshold`` in magnitude are zeroed at the end.
    """
    if not (3 <= change_point <= cfg.t - 2):
        raise ValueError(f"change_point {change_point} outside {{3,...,{cfg.t - 2}}}")
    smoothed = gaussian_smooth(latent_field(cfg, rng))
    theta = np.empty((cfg.t, cfg.s))
    theta[0] = smoothed.reshape(-1, order="F")
    for i in range(1, cfg.t):
        theta[i] = cfg.evolve_decay * theta[i - 1]
        if i == change_point - 1:
            theta[i] += cfg.jump
    if apply_threshold:
        theta[np.abs(theta) < cfg.threshold] = 0.0
    return theta


def gen_predictors(cfg: GenConfig, sigma_t: np.ndarray, sigma_s: np.ndarray,
                   rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` design rows sampled from the separable Gaussian model.

    Each predictor matrix is ``L_t G L_s^T`` with ``G`` i.i.d. standard
    normal, equivalent to a Gaussian with covariance ``sigma_s (x) sigma_t``
    under the column-major vec convention.  Rows are the vectorized matrices.
    """
    lt = np.linalg.cholesky(sigma_t)
    ls = np.linalg.cholesky(sigma_s)
    G = rng.standard_normal((n, cfg.t, cfg.s))
    X = np.einsum("ij,njk,lk->nil", lt, G, ls)
    return X.transpose(0, 2, 1).reshape(n, cfg.t * cfg.s)


def _responses(cfg: GenConfig, design: np.ndarray, theta_cols: np.ndarray,
               split: int) -> np.ndarray:
    n = design.shape[0]
    y = design @ theta_cols
    std = np.sqrt(cfg.noise_var)
    for r in range(cfg.m):
        rng = stream(cfg.seed, TAG_NOISE + split * 1024 + r)
        y[:, r] += std * rng.standard_normal(n)
    return y


def gen_dataset(cfg: GenConfig) -> SyntheticDataset:
    """Full train/validation/test dataset with shared predictor covariances.

    Coefficient matrices are drawn independently per task except for the
    change point, which is shared.  All splits use independent streams.
    """
    graph = build_grid_graph(cfg.grid_rows, cfg.grid_cols)
    sigma_t, sigma_s = kron_covariances(cfg)
    change_point = draw_change_point(cfg, stream(cfg.seed, TAG_CHANGE_POINT))
    theta = np.stack(
        [gen_coefficient(cfg, stream(cfg.seed, TAG_LATENT + r), change_point)
         for r in range(cfg.m)],
        axis=2,
    )
    theta_cols = theta.reshape((cfg.t * cfg.s, cfg.m), order="F")

    splits = []
    for split, n in enumerate((cfg.n_train, cfg.n_val, cfg.n_test)):
        design = gen_predictors(cfg, sigma_t, sigma_s,
                                stream(cfg.seed, TAG_DESIGN + split), n)
        y = _responses(cfg, design, theta_cols, split)
        splits.append(ProblemData(Dims(cfg.t, cfg.s, cfg.m, n), design, y))

    return SyntheticDataset(config=cfg, graph=graph, theta_true=theta,
                            change_point=change_point, train=splits[0],
                            val=splits[1], test=splits[2])
