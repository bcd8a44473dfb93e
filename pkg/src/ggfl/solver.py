"""Halpern-accelerated Peaceman-Rachford solver with restarts and adaptive sigma.

One iteration performs five steps: (1) solve the step-one linear system for
the coefficient block, (2) ascend the multipliers, (3) apply the three
proximal maps to the slack blocks, (4) extrapolate ``2*Hbar - H``, and (5)
average the extrapolated point with the epoch's anchor using Halpern weights
``1/(k+2)`` and ``(k+1)/(k+2)``.

The outer loop monitors a cheap progress quantity every iteration and, at
fixed checkpoints, either stops on the normalized KKT residual, exhausts the
iteration budget, or restarts the inner loop with a rebalanced penalty
parameter ``sigma = delta_dual / delta_primal``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .linsolve import Precomputed, StepOneSystem, build_rhs
from .model import (
    Hyperparams,
    ProblemData,
    SpatialGraph,
    edge_diff,
    edge_diff_adjoint,
    loss_gradient,
    objective,
    time_diff,
    time_diff_adjoint,
)
from .prox import prox_omega, prox_phi, prox_psi

__all__ = [
    "State",
    "SolverOptions",
    "EpochInfo",
    "SolveReport",
    "DivergenceError",
    "hpr_iteration",
    "restart_check",
    "adaptive_sigma",
    "kkt_residuals",
    "ResidualMapping",
    "residual_mapping_norm",
    "solve",
]

SIGMA_MIN = 1e-6
SIGMA_MAX = 1e6


class DivergenceError(RuntimeError):
    """Raised when the iterate contains non-finite values."""

    def __init__(self, message: str, report: "SolveReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass
class State:
    """The seven-block primal-dual iterate.

    ``w``, ``z``, ``u`` are the slack copies of the temporal differences,
    edge differences, and coefficients; ``s``, ``t``, ``r`` are their
    multipliers.
    """

    theta: np.ndarray  # (t, s, m)
    w: np.ndarray      # (t-1, s, m)
    z: np.ndarray      # (t, |E|, m)
    u: np.ndarray      # (t, s, m)
    s: np.ndarray
    t: np.ndarray
    r: np.ndarray

    @classmethod
    def zeros(cls, t: int, s: int, m: int, n_edges: int) -> "State":
        return cls(
            theta=np.zeros((t, s, m)),
            w=np.zeros((max(t - 1, 0), s, m)),
            z=np.zeros((t, n_edges, m)),
            u=np.zeros((t, s, m)),
            s=np.zeros((max(t - 1, 0), s, m)),
            t=np.zeros((t, n_edges, m)),
            r=np.zeros((t, s, m)),
        )

    def blocks(self) -> tuple[np.ndarray, ...]:
        return (self.theta, self.w, self.z, self.u, self.s, self.t, self.r)

    def copy(self) -> "State":
        return State(*(b.copy() for b in self.blocks()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(b)) for b in self.blocks())


@dataclass
class SolverOptions:
    """Termination, restart, and linear-solver settings."""

    sigma0: float = 1.0
    eta_tol: float = 1e-4
    max_total_iters: int = 2000
    check_period: int = 50
    alpha1: float = 0.6
    alpha2: float = 0.2
    alpha3: float = 0.25
    restart_enabled: bool = True
    halpern_enabled: bool = True
    # Diagnostic: drop the coefficient block from extrapolation/averaging.
    theta_in_averaging: bool = True
    linsolve_mode: str = "auto"
    cg_tol: float = 1e-10
    cg_maxiter: int | None = None
    track_residual_mapping: bool = False

    def __post_init__(self):
        if not (0 < self.alpha2 < self.alpha1 < 1):
            raise ValueError(f"need 0 < alpha2 < alpha1 < 1, got {self.alpha2}, {self.alpha1}")
        if self.alpha3 <= 0:
            raise ValueError(f"alpha3 must be > 0, got {self.alpha3}")
        if self.eta_tol < 0:
            raise ValueError(f"eta_tol must be >= 0, got {self.eta_tol}")
        if self.sigma0 <= 0:
            raise ValueError(f"sigma0 must be > 0, got {self.sigma0}")
        if self.check_period < 1 or self.max_total_iters < 1:
            raise ValueError("check_period and max_total_iters must be >= 1")


@dataclass
class EpochInfo:
    sigma: float
    iters: int
    c_first: float
    c_last: float


@dataclass
class SolveReport:
    """Final estimate, status, per-iteration trace, and timing breakdown."""

    theta: np.ndarray
    status: str  # "converged" | "max_iters"
    total_iters: int
    epochs: list[EpochInfo]
    trace: dict[str, np.ndarray]
    timings: dict[str, float]
    r_p: float
    r_d: float
    eta_kkt: float
    objective: float
    sigma_final: float
    state: State
    fallback_used: bool = False

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _pair_norm_sq(sigma: float, da: np.ndarray, db: np.ndarray) -> float:
    diff = sigma * da - db
    return float(np.sum(diff * diff))


def hpr_iteration(hk: State, h0: State, k: int, sigma: float, sys: StepOneSystem,
                  hp: Hyperparams, graph: SpatialGraph,
                  halpern: bool = True, theta_in_averaging: bool = True,
                  ) -> tuple[State, State, float]:
    """One accelerated Peaceman-Rachford iteration.

    Returns ``(H_{k+1}, Hbar_{k+1}, c_k)`` where ``c_k`` is the progress
    quantity monitored by the restart rule.
    """
    # Step 1: coefficient block, one linear solve per task.
    b = build_rhs(sys.pre.xty, hk.w, hk.z, hk.u, hk.s, hk.t, hk.r, sigma, graph)
    theta_bar = sys.solve(b)
    if not np.all(np.isfinite(theta_bar)):
        raise DivergenceError("non-finite coefficient iterate")

    p_theta = time_diff(theta_bar)
    q_theta = edge_diff(theta_bar, graph)

    # Step 2: multiplier ascent.
    s_bar = hk.s + sigma * (p_theta - hk.w)
    t_bar = hk.t + sigma * (q_theta - hk.z)
    r_bar = hk.r + sigma * (theta_bar - hk.u)

    # Step 3: slack blocks via the proximal maps.
    w_bar = prox_omega(p_theta + s_bar / sigma, hp.lam_t, sigma, hp.p)
    z_bar = prox_phi(q_theta + t_bar / sigma, hp.lam_g, sigma, hp.q, graph)
    u_bar = prox_psi(theta_bar + r_bar / sigma, hp.lam1, hp.lam2, sigma)

    hbar = State(theta_bar, w_bar, z_bar, u_bar, s_bar, t_bar, r_bar)

    c_sq = (_pair_norm_sq(sigma, w_bar - hk.w, s_bar - hk.s)
            + _pair_norm_sq(sigma, z_bar - hk.z, t_bar - hk.t)
            + _pair_norm_sq(sigma, u_bar - hk.u, r_bar - hk.r))
    c_k = 2.0 * float(np.sqrt(c_sq))

    # Steps 4-5: extrapolation and Halpern averaging toward the epoch anchor.
    if halpern:
        lam0 = 1.0 / (k + 2)
        lam1 = (k + 1) / (k + 2)
        new_blocks = []
        for b0, bk, bbar in zip(h0.blocks(), hk.blocks(), hbar.blocks()):
            new_blocks.append(lam0 * b0 + lam1 * (2.0 * bbar - bk))
        h_next = State(*new_blocks)
        if not theta_in_averaging:
            h_next.theta = theta_bar.copy()
    else:
        # Averaged (ADMM/Douglas-Rachford style) baseline for ablations.
        h_next = hbar.copy()
    return h_next, hbar, c_k


def restart_check(c_history, c0: float, k: int, total: int, opts: SolverOptions) -> bool:
    """Restart rule evaluated at a checkpoint.

    Fires when progress stagnates while already partially decayed
    (``c_{k-1} < c_k <= alpha1 * c0``), when progress has decayed enough
    (``c_k <= alpha2 * c0``), or when the inner count ``k`` is large relative
    to the accumulated ``total`` iteration history (``k >= alpha3 * total``).
    """
    if len(c_history) < 2:
        raise ValueError("restart_check needs at least two recorded c values")
    c_k = c_history[-1]
    c_prev = c_history[-2]
    if c_prev < c_k <= opts.alpha1 * c0:
        return True
    if c_k <= opts.alpha2 * c0:
        return True
    if k >= opts.alpha3 * total:
        return True
    return False


def adaptive_sigma(h_new: State, h_old: State, prev_sigma: float) -> float:
    """Rebalanced penalty ``delta_dual / delta_primal`` between epoch endpoints.

    Keeps the previous value when either motion vanishes; the result is
    clamped to ``[1e-6, 1e6]``.
    """
    dp = np.sqrt(float(np.sum((h_new.w - h_old.w) ** 2))
                 + float(np.sum((h_new.z - h_old.z) ** 2))
                 + float(np.sum((h_new.u - h_old.u) ** 2)))
    dd = np.sqrt(float(np.sum((h_new.s - h_old.s) ** 2))
                 + float(np.sum((h_new.t - h_old.t) ** 2))
                 + float(np.sum((h_new.r - h_old.r) ** 2)))
    if dp == 0.0 or dd == 0.0:
        return prev_sigma
    return float(np.clip(dd / dp, SIGMA_MIN, SIGMA_MAX))


def _fro(a: np.ndarray) -> float:
    return float(np.linalg.norm(a.ravel()))


def kkt_residuals(hbar: State, data: ProblemData, hp: Hyperparams,
                  graph: SpatialGraph) -> tuple[float, float, float]:
    """Normalized primal/dual KKT residuals ``(R_p, R_d, eta)`` at ``hbar``.

    The dual conditions use the unit-scale proximal maps of the three
    regularizers and the loss gradient for the coefficient block.
    """
    theta, w, z, u = hbar.theta, hbar.w, hbar.z, hbar.u
    s, t, r = hbar.s, hbar.t, hbar.r
    nw, nz, nu, nr = 1 + _fro(w), 1 + _fro(z), 1 + _fro(u), 1 + _fro(r)

    r_p = max(
        _fro(time_diff(theta) - w) / nw,
        _fro(edge_diff(theta, graph) - z) / nz,
        _fro(theta - u) / nu,
    )
    grad = loss_gradient(data, theta)
    stat = grad + r
    if w.shape[0] > 0:
        stat = stat + time_diff_adjoint(s)
    if z.shape[1] > 0:
        stat = stat + edge_diff_adjoint(t, graph)
    r_d = max(
        _fro(stat) / nr,
        _fro(w - prox_omega(w + s, hp.lam_t, 1.0, hp.p)) / nw,
        _fro(z - prox_phi(z + t, hp.lam_g, 1.0, hp.q, graph)) / nz,
        _fro(u - prox_psi(u + r, hp.lam1, hp.lam2, 1.0)) / nu,
    )
    return r_p, r_d, max(r_p, r_d)


class ResidualMapping:
    """Fixed-point residual of the KKT system; zero exactly at solutions.

    The coefficient block needs the prox of the loss, i.e. one solve with
    ``I + X^T D X`` per task; the factorization is built on first use.
    """

    def __init__(self, data: ProblemData, hp: Hyperparams, graph: SpatialGraph):
        self.data = data
        self.hp = hp
        self.graph = graph
        self._chol = None

    def _prox_loss(self, v: np.ndarray) -> np.ndarray:
        d = self.data.dims
        if d.n == 0:
            return v
        if self._chol is None:
            pre = Precomputed(self.data)
            M = np.eye(d.ts) + pre.gram
            self._chol = sla.cho_factor(M, lower=True, overwrite_a=True,
                                        check_finite=False)
            self._xty = pre.xty
        rhs = (v + self._xty).reshape((d.ts, d.m), order="F")
        sol = np.empty_like(rhs)
        for r in range(d.m):
            sol[:, r] = sla.cho_solve(self._chol, rhs[:, r], check_finite=False)
        return sol.reshape((d.t, d.s, d.m), order="F")

    def blocks(self, h: State) -> list[np.ndarray]:
        hp, graph = self.hp, self.graph
        arg = h.theta - h.r
        if h.w.shape[0] > 0:
            arg = arg - time_diff_adjoint(h.s)
        if h.z.shape[1] > 0:
            arg = arg - edge_diff_adjoint(h.t, graph)
        return [
            h.theta - self._prox_loss(arg),
            h.w - prox_omega(h.w + h.s, hp.lam_t, 1.0, hp.p),
            h.z - prox_phi(h.z + h.t, hp.lam_g, 1.0, hp.q, graph),
            h.u - prox_psi(h.u + h.r, hp.lam1, hp.lam2, 1.0),
            time_diff(h.theta) - h.w,
            edge_diff(h.theta, graph) - h.z,
            h.theta - h.u,
        ]

    def norm(self, h: State) -> float:
        return float(np.sqrt(sum(np.sum(b * b) for b in self.blocks(h))))


def residual_mapping_norm(h: State, data: ProblemData, hp: Hyperparams,
                          graph: SpatialGraph) -> float:
    """One-shot ``||R(H)||_F``; prefer :class:`ResidualMapping` for repeated use."""
    return ResidualMapping(data, hp, graph).norm(h)


class _Trace:
    COLS = ("k", "epoch", "sigma", "c_k", "r_p", "r_d", "eta_kkt", "objective",
            "wall_ms", "resmap")

    def __init__(self):
        self.rows: list[list[float]] = []

    def add(self, k, epoch, sigma, c_k, wall_ms, resmap=np.nan):
        self.rows.append([k, epoch, sigma, c_k, np.nan, np.nan, np.nan, np.nan,
                          wall_ms, resmap])

    def update_last(self, r_p, r_d, eta, obj):
        self.rows[-1][4:8] = [r_p, r_d, eta, obj]

    def as_dict(self) -> dict[str, np.ndarray]:
        arr = np.asarray(self.rows, dtype=np.float64).reshape(-1, len(self.COLS))
        return {name: arr[:, i] for i, name in enumerate(self.COLS)}


def solve(data: ProblemData, hp: Hyperparams, graph: SpatialGraph,
          opts: SolverOptions | None = None, warm_start: State | None = None,
          precomputed: Precomputed | None = None) -> SolveReport:
    """Run the restarted solver until the KKT tolerance or the iteration budget.

    ``warm_start`` seeds the outer state (all zeros otherwise); ``precomputed``
    lets callers share the Gram matrix across repeated fits on the same data.
    """
    opts = opts if opts is not None else SolverOptions()
    d = data.dims
    if graph.node_count != d.s:
        raise ValueError(f"graph has {graph.node_count} nodes, dims.s = {d.s}")
    pre = precomputed if precomputed is not None else Precomputed(data)

    t_start = time.perf_counter()
    hbar_outer = warm_start.copy() if warm_start is not None else State.zeros(
        d.t, d.s, d.m, graph.n_edges)
    sigma = float(opts.sigma0)
    total = 0
    epoch = 0
    trace = _Trace()
    epochs: list[EpochInfo] = []
    timings = {"assembly": 0.0, "factorization": 0.0, "iterations": 0.0}
    status = None
    fallback = False
    hbar = hbar_outer
    r_p = r_d = eta = np.nan
    resmap = ResidualMapping(data, hp, graph) if opts.track_residual_mapping else None
    sys_cur: StepOneSystem | None = None

    def _partial_report() -> SolveReport:
        return SolveReport(
            theta=hbar.theta.copy(), status="diverged", total_iters=total,
            epochs=epochs, trace=trace.as_dict(), timings=timings,
            r_p=r_p, r_d=r_d, eta_kkt=eta, objective=np.nan,
            sigma_final=sigma, state=hbar.copy(), fallback_used=fallback)

    while status is None:
        if sys_cur is None or sys_cur.sigma != sigma:
            t0 = time.perf_counter()
            sys_cur = StepOneSystem(data, graph, sigma, pre, mode=opts.linsolve_mode,
                                    cg_tol=opts.cg_tol, cg_maxiter=opts.cg_maxiter)
            _ = pre.xty
            if sys_cur.mode == "direct":
                _ = pre.gram
            timings["assembly"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            sys_cur.factorize()
            timings["factorization"] += time.perf_counter() - t0
            fallback = fallback or sys_cur.fallback_used

        h0 = hbar_outer.copy()
        hk = h0.copy()
        c0 = None
        c_hist: list[float] = []
        epoch_iters = 0
        total_before = total
        restart = False
        t0 = time.perf_counter()
        while True:
            try:
                hk, hbar, c_k = hpr_iteration(
                    hk, h0, epoch_iters, sigma, sys_cur, hp, graph,
                    halpern=opts.halpern_enabled,
                    theta_in_averaging=opts.theta_in_averaging)
            except DivergenceError as exc:
                timings["iterations"] += time.perf_counter() - t0
                raise DivergenceError(str(exc), _partial_report()) from None
            epoch_iters += 1
            total += 1
            c_hist.append(c_k)
            if c0 is None:
                c0 = c_k
            wall_ms = (time.perf_counter() - t_start) * 1e3
            rm = resmap.norm(hbar) if resmap is not None else np.nan
            trace.add(total, epoch, sigma, c_k, wall_ms, rm)

            at_budget = total >= opts.max_total_iters
            if epoch_iters % opts.check_period == 0 or at_budget:
                if not hbar.is_finite():
                    timings["iterations"] += time.perf_counter() - t0
                    raise DivergenceError("non-finite iterate at checkpoint",
                                          _partial_report())
                r_p, r_d, eta = kkt_residuals(hbar, data, hp, graph)
                obj = objective(data, hp, hbar.theta, graph)
                trace.update_last(r_p, r_d, eta, obj)
                if eta <= opts.eta_tol:
                    status = "converged"
                    break
                if at_budget:
                    status = "max_iters"
                    break
                if (opts.restart_enabled and len(c_hist) >= 2
                        and restart_check(c_hist, c0, epoch_iters, total_before, opts)):
                    restart = True
                    break
        timings["iterations"] += time.perf_counter() - t0

        epochs.append(EpochInfo(sigma=sigma, iters=epoch_iters,
                                c_first=float(c0), c_last=float(c_hist[-1])))
        prev_outer = hbar_outer
        hbar_outer = hbar
        if status is None and restart:
            if opts.restart_enabled:
                sigma = adaptive_sigma(hbar_outer, prev_outer, sigma)
            epoch += 1

    final_obj = objective(data, hp, hbar.theta, graph)
    return SolveReport(
        theta=hbar.theta.copy(), status=status, total_iters=total, epochs=epochs,
        trace=trace.as_dict(), timings=timings, r_p=float(r_p), r_d=float(r_d),
        eta_kkt=float(eta), objective=float(final_obj), sigma_final=sigma,
        state=hbar.copy(), fallback_used=fallback)
