"""Structured large-margin ensemble learning: CMC-triplet and CMC-top.

Both solvers share one cutting-plane loop over the 1-slack problem

    min_{w >= 0, xi >= 0}  1/2 |w|^2 + nu * xi
    s.t.  w^T a_c + xi >= delta_c   for every constraint c in the working set

and differ only in how the next constraint is generated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConvergenceError, InvalidInputError
from .types import OrderingMatrix, TripletDistanceTable, WeightVector

log = logging.getLogger(__name__)

# CMC-triplet and CMC-top regularisation grids: 11 log-spaced points each
TRIPLET_NU_GRID = tuple(10.0 ** (3 + 0.1 * i) for i in range(11))
TOP_NU_GRID = tuple(10.0 ** (2 + 0.1 * i) for i in range(11))


@dataclass(frozen=True)
class CuttingPlaneConfig:
    nu: float = 100.0
    epsilon: float = 1e-6
    k: int = 10
    max_iterations: int = 1000
    qp_tolerance: float = 1e-8
    active_set_limit: int = 50

    def __post_init__(self):
        if not self.nu > 0:
            raise InvalidInputError(f"nu must be > 0, got {self.nu}")
        if not self.epsilon > 0:
            raise InvalidInputError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.k) < 1:
            raise InvalidInputError(f"k must be >= 1, got {self.k}")
        if self.max_iterations < 1 or not self.qp_tolerance > 0:
            raise InvalidInputError("max_iterations must be >= 1 and qp_tolerance > 0")

    def check_table(self, table: TripletDistanceTable):
        if self.k > table.m_prime:
            raise InvalidInputError(f"k = {self.k} exceeds the {table.m_prime} wrong candidates per probe")

    def to_dict(self):
        return {"nu": self.nu, "epsilon": self.epsilon, "k": self.k,
                "max_iterations": self.max_iterations, "qp_tolerance": self.qp_tolerance,
                "active_set_limit": self.active_set_limit}


@dataclass(frozen=True)
class ConstraintRecord:
    """One working-set constraint ``w^T a + xi >= delta``."""

    a: np.ndarray
    delta: float
    origin: object = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).ravel()
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("constraint vector must be finite")
        if not -1e-12 <= self.delta <= 1 + 1e-12:
            raise InvalidInputError(f"constraint offset must lie in [0, 1], got {self.delta}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "delta", float(self.delta))


# --------------------------------------------------------------------------- structured loss

def _check_shapes(table, P):
    if P.shape != (table.m, table.m_prime):
        raise InvalidInputError(f"ordering shape {P.shape} does not match table ({table.m}, {table.m_prime})")


def delta_loss(P: OrderingMatrix) -> float:
    """Fraction of top-k positions whose candidate outranks the true match."""
    m = P.shape[0]
    return float(P.top_entries().sum()) / (m * P.k)


def psi(table: TripletDistanceTable, P: OrderingMatrix) -> np.ndarray:
    """Joint reward: averaged margins ``d^- - d^+`` over correctly ordered top-k cells."""
    _check_shapes(table, P)
    keep = 1 - P.top_entries()
    top_margins = np.take_along_axis(table.margins, P.top[:, :, None], axis=1)  # m x k x T
    return np.einsum("ij,ijt->t", keep, top_margins) / (table.m * P.k)


def margin_scores(table: TripletDistanceTable, w) -> np.ndarray:
    """``s_ij = w^T (d_ij^- - d_i^+)`` for every probe and wrong candidate."""
    w = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if w.shape != (table.T,):
        raise InvalidInputError(f"weight vector has length {w.shape}, expected {table.T}")
    return table.margins @ w


def most_violated_ordering(table: TripletDistanceTable, w, k: int) -> OrderingMatrix:
    """Separation oracle for CMC-top.

    Candidates of each probe are ranked ascending by margin score (ties by
    column, i.e. canonical candidate order); the first ``k`` take the top
    positions. A top cell is set when its score is <= 1, any other cell when
    its score is <= 0.
    """
    w = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise InvalidInputError("weights must be non-negative")
    if not 1 <= k <= table.m_prime:
        raise InvalidInputError(f"k = {k} must lie in [1, {table.m_prime}]")
    S = margin_scores(table, w)
    top = kernels.topk_smallest(S, k)
    P = (S <= 0).astype(np.int8)
    rows = np.arange(table.m)[:, None]
    P[rows, top] = (S[rows, top] <= 1).astype(np.int8)
    return OrderingMatrix(P, k, top)


def ordering_constraint(table: TripletDistanceTable, P: OrderingMatrix) -> ConstraintRecord:
    """Constraint ``a = psi(S, P*) - psi(S, P)``, ``delta = Delta(P*, P)``.

    ``P*`` shares the position assignment of ``P``. Computed directly as the
    averaged margins of the set top-k cells.
    """
    _check_shapes(table, P)
    flags = P.top_entries()
    top_margins = np.take_along_axis(table.margins, P.top[:, :, None], axis=1)
    a = np.einsum("ij,ijt->t", flags, top_margins) / (table.m * P.k)
    return ConstraintRecord(a, delta_loss(P), P.key())


def violation(table: TripletDistanceTable, P: OrderingMatrix, w) -> float:
    """``g(S, P, w) = Delta(P*, P) - w^T (psi(S, P*) - psi(S, P))``."""
    rec = ordering_constraint(table, P)
    w = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    return rec.delta - float(w @ rec.a)


def triplet_constraint(table: TripletDistanceTable) -> ConstraintRecord:
    """The single averaged CMC-triplet constraint (``delta = 1``)."""
    a = table.margins.sum(axis=(0, 1)) / (table.m * table.m_prime)
    return ConstraintRecord(a, 1.0, "triplet")


# --------------------------------------------------------------------------- inner QP

@dataclass(frozen=True)
class QpSolution:
    weights: WeightVector
    residual: float
    iterations: int
    method: str
    multipliers: np.ndarray = field(repr=False, default=None)


def qp_objective(w, xi, nu) -> float:
    w = np.asarray(w, dtype=np.float64)
    return 0.5 * float(w @ w) + nu * float(xi)


def _constraint_rows(working_set, T):
    """Rows ``G x >= h`` over ``x = (w, xi)``: cuts (row 0 is ``xi >= 0``) then bounds."""
    nc = len(working_set)
    G = np.zeros((nc + 1 + T, T + 1))
    h = np.zeros(nc + 1 + T)
    G[0, T] = 1.0
    for c, rec in enumerate(working_set, start=1):
        if rec.a.shape != (T,):
            raise InvalidInputError(f"constraint has length {rec.a.shape[0]}, expected {T}")
        G[c, :T] = rec.a
        G[c, T] = 1.0
        h[c] = rec.delta
    G[nc + 1:, :T] = np.eye(T)
    return G, h, nc + 1


def kkt_residual(working_set, nu, w, xi, multipliers=None) -> float:
    """Largest KKT violation of ``(w, xi)`` for the working-set QP.

    Stationarity and complementarity are divided by ``max(1, max multiplier)``;
    the cut multipliers sum to ``nu``, so for large ``nu`` an absolute
    residual would only measure rounding in the constraint slacks.
    Without ``multipliers`` they are recovered: constraint multipliers by
    non-negative least squares on the stationarity conditions of the tight cuts.
    """
    w = np.asarray(w, dtype=np.float64)
    T = w.shape[0]
    G, h, ncut = _constraint_rows(list(working_set), T)
    x = np.append(w, xi)
    slack = G @ x - h
    grad = np.append(w, nu)
    if multipliers is None:
        from scipy.optimize import nnls
        scale = max(1.0, float(np.abs(h).max(initial=0.0)), float(np.abs(G).max()))
        tight = np.flatnonzero(slack <= 1e-9 * scale)
        lam_t, _ = nnls(G[tight].T, grad)
        multipliers = np.zeros(G.shape[0])
        multipliers[tight] = lam_t
    lam = np.asarray(multipliers, dtype=np.float64)
    primal = float(np.max(np.clip(-slack, 0, None)))
    lam_scale = max(1.0, float(np.max(np.abs(lam))))
    dual = float(np.max(np.clip(-lam, 0, None)))
    stationarity = float(np.max(np.abs(grad - G.T @ lam))) / lam_scale
    complementarity = float(np.max(np.abs(lam * slack))) / lam_scale
    return max(primal, dual, stationarity, complementarity)


def _active_set(G, h, ncut, nu, T, x, W, tolerance, max_iter):
    """Primal active-set method (exact up to linear-solve rounding).

    ``W`` must hold linearly independent rows and at least one cut row; the
    cut multipliers then sum to ``nu`` so a cut is never the one dropped last,
    and the equality-constrained subproblems stay strictly convex.
    """
    n = T + 1
    H = np.zeros((n, n))
    H[:T, :T] = np.eye(T)
    g0 = np.zeros(n)
    g0[T] = nu
    W = list(W)
    for it in range(1, max_iter + 1):
        grad = H @ x + g0
        GW = G[W]
        nw = len(W)
        if nw == n:
            # vertex: the step is zero, only multipliers are needed
            p = np.zeros(n)
            lam = np.linalg.solve(GW.T, grad)
        else:
            KKT = np.zeros((n + nw, n + nw))
            KKT[:n, :n] = H
            KKT[:n, n:] = -GW.T
            KKT[n:, :n] = GW
            rhs = np.concatenate([-grad, np.zeros(nw)])
            sol = np.linalg.solve(KKT, rhs)
            p, lam = sol[:n], sol[n:]
        if np.max(np.abs(p)) <= 1e-13 * max(1.0, nu) * (1.0 + np.max(np.abs(x))):
            if nw == 0 or lam.min() >= -tolerance * 1e-3:
                full = np.zeros(G.shape[0])
                full[W] = np.clip(lam, 0, None)
                return x, full, it
            drop = int(np.argmin(lam))
            W.pop(drop)
            continue
        Gp = G @ p
        slack = G @ x - h
        alpha, block = 1.0, -1
        in_w = np.zeros(G.shape[0], dtype=bool)
        in_w[W] = True
        for i in np.flatnonzero((~in_w) & (Gp < -1e-15)):
            step = max(slack[i], 0.0) / -Gp[i]
            if step < alpha:
                alpha, block = step, i
        x = x + alpha * p
        if block >= 0:
            W.append(int(block))
    raise ConvergenceError("active-set QP exceeded its iteration cap", {"iterations": max_iter})


def _maximize_pair(u, d, gain):
    """Maximise ``t * gain - 1/2 |[u + t d]_+|^2`` over ``t`` (unconstrained root).

    The derivative is monotone non-increasing; returns the root or +-inf.
    """
    def deriv(t):
        return gain - float(d @ np.clip(u + t * d, 0, None))

    nz = d != 0
    breaks = np.unique(-u[nz] / d[nz]) if nz.any() else np.array([])
    pts = np.concatenate([[-np.inf], breaks, [np.inf]])
    for lo, hi in zip(pts[:-1], pts[1:]):
        mid = (lo + hi) / 2 if np.isfinite(lo) and np.isfinite(hi) else (
            hi - 1.0 if np.isfinite(hi) else (lo + 1.0 if np.isfinite(lo) else 0.0))
        active = (u + mid * d) > 0
        slope = float(d[active] @ d[active])
        const = gain - float(d[active] @ u[active])
        # on this piece deriv(t) = const - slope * t
        if slope > 0:
            t = const / slope
            if lo - 1e-15 <= t <= hi + 1e-15:
                return t
        elif const == 0:
            return mid
    return np.inf if deriv(0.0) > 0 else -np.inf


def _dual_coordinate_ascent(A, delta, nu, tolerance, max_iter):
    """Pairwise coordinate ascent on the dual over the scaled simplex.

    Dual: ``max_{alpha >= 0, sum alpha = nu} alpha^T delta - 1/2 |[A alpha]_+|^2``
    where column 0 of ``A`` is the zero cut for ``xi >= 0``.
    """
    nc = A.shape[1]
    alpha = np.zeros(nc)
    alpha[0] = nu
    u = A @ alpha
    for it in range(1, max_iter + 1):
        w = np.clip(u, 0, None)
        grad = delta - A.T @ w
        i = int(np.argmax(grad))
        support = np.flatnonzero(alpha > 0)
        j = int(support[np.argmin(grad[support])])
        if grad[i] - grad[j] <= tolerance or i == j:
            return alpha, it
        d = A[:, i] - A[:, j]
        t = _maximize_pair(u, d, delta[i] - delta[j])
        t = min(max(t, 0.0), alpha[j])
        if t <= 0:
            return alpha, it
        alpha[i] += t
        alpha[j] -= t
        u = u + t * d
    return alpha, max_iter


def solve_inner_qp(working_set, nu: float, tolerance: float = 1e-8, T: int | None = None,
                   active_set_limit: int = 50, warm_start=None, max_iter: int | None = None) -> QpSolution:
    """Exact minimiser of the working-set QP with KKT residual <= ``tolerance``.

    Working sets up to ``active_set_limit`` constraints go straight to a
    primal active-set solve; larger ones run dual coordinate ascent first and
    hand its point to the active-set method for the exact finish.
    """
    working_set = list(working_set)
    if not nu > 0:
        raise InvalidInputError(f"nu must be > 0, got {nu}")
    if T is None:
        if not working_set:
            raise InvalidInputError("T is required for an empty working set")
        T = working_set[0].a.shape[0]
    G, h, ncut = _constraint_rows(working_set, T)
    nrows = G.shape[0]
    max_iter = max_iter or 50 * (nrows + T + 1)
    method = "active-set"
    w0 = None if warm_start is None else np.clip(np.asarray(warm_start, dtype=np.float64), 0, None)
    if len(working_set) > active_set_limit:
        A = G[:ncut, :T].T
        # a bounded warm start; the active-set pass below makes it exact
        alpha, _ = _dual_coordinate_ascent(A, h[:ncut], nu, max(tolerance, 1e-6), 10 * ncut)
        w0 = np.clip(A @ alpha, 0, None)
        method = "dual-coordinate+active-set"
    if w0 is None:
        w0 = np.zeros(T)
    cut_slack = h[:ncut] - G[:ncut, :T] @ w0
    worst = int(np.argmax(cut_slack))
    xi0 = max(0.0, float(cut_slack[worst]))
    if xi0 == 0.0:
        worst = 0
    x = np.append(w0, xi0)
    W = [worst] + [ncut + t for t in range(T) if w0[t] == 0.0]
    x, lam, iters = _active_set(G, h, ncut, nu, T, x, W, tolerance, max_iter)
    w = np.clip(x[:T], 0, None)
    xi = max(0.0, float(x[T]))
    residual = kkt_residual(working_set, nu, w, xi, lam)
    if residual > tolerance:
        raise ConvergenceError(
            f"inner QP residual {residual:.3g} above tolerance {tolerance:.3g}",
            {"residual": residual, "iterations": iters})
    return QpSolution(WeightVector(w, xi, qp_objective(w, xi, nu)), residual, iters, method, lam)


# --------------------------------------------------------------------------- cutting plane

@dataclass(frozen=True)
class RoundLog:
    iteration: int
    objective: float
    xi: float
    violation: float  # g(S, P_bar, w) for the constraint found this round
    working_set_size: int
    qp_residual: float


@dataclass
class CuttingPlaneResult:
    weights: WeightVector
    rounds: list
    working_set: list
    converged: bool = True
    violation_monotone: bool = True

    @property
    def objective_trace(self):
        return [r.objective for r in self.rounds]


def cutting_plane(table: TripletDistanceTable, config: CuttingPlaneConfig,
                  separate: Callable[[np.ndarray], tuple]) -> CuttingPlaneResult:
    """Generic 1-slack cutting-plane loop.

    ``separate(w)`` returns ``(constraint, key)`` for the most violated
    constraint at ``w``; ``key`` identifies repeats.
    """
    T = table.T
    working, keys = [], set()
    rounds = []
    tol = config.qp_tolerance
    halved = False
    w = np.zeros(T)
    prev_gap = None
    monotone = True
    for it in range(config.max_iterations):
        sol = solve_inner_qp(working, config.nu, tol, T, config.active_set_limit, warm_start=w)
        w, xi = sol.weights.w, sol.weights.xi
        rec, key = separate(w)
        g = rec.delta - float(w @ rec.a)
        rounds.append(RoundLog(it, sol.weights.objective, xi, g, len(working), sol.residual))
        gap = g - xi
        if prev_gap is not None and gap > prev_gap + config.qp_tolerance:
            monotone = False
            log.debug("round %d: violation rose from %.3g to %.3g", it, prev_gap, gap)
        prev_gap = gap
        if g <= xi + config.epsilon:
            return CuttingPlaneResult(sol.weights, rounds, working, True, monotone)
        if key in keys:
            if halved:
                raise ConvergenceError(
                    "most violated constraint repeats while still violated",
                    {"violations": [r.violation for r in rounds], "round": it})
            tol /= 2
            halved = True
            continue
        working.append(rec)
        keys.add(key)
    raise ConvergenceError(
        f"cutting plane hit max_iterations = {config.max_iterations}",
        {"violations": [r.violation for r in rounds], "objectives": [r.objective for r in rounds]})


def run_cmc_top(table: TripletDistanceTable, config: CuttingPlaneConfig) -> CuttingPlaneResult:
    config.check_table(table)

    def separate(w):
        P = most_violated_ordering(table, w, config.k)
        return ordering_constraint(table, P), P.key()

    return cutting_plane(table, config, separate)


def run_cmc_triplet(table: TripletDistanceTable, config: CuttingPlaneConfig) -> CuttingPlaneResult:
    rec = triplet_constraint(table)
    return cutting_plane(table, config, lambda w: (rec, "triplet"))


def fit_cmc_top(table: TripletDistanceTable, config: CuttingPlaneConfig) -> WeightVector:
    """Ensemble weights maximising correct identification among the top ``k`` candidates."""
    return run_cmc_top(table, config).weights


def fit_cmc_triplet(table: TripletDistanceTable, config: CuttingPlaneConfig) -> WeightVector:
    """Ensemble weights from the averaged relative-distance (triplet) constraint."""
    return run_cmc_triplet(table, config).weights


SOLVERS = {"cmc-top": run_cmc_top, "cmc-triplet": run_cmc_triplet}


def fit_ensemble(table: TripletDistanceTable, config: CuttingPlaneConfig, solver: str = "cmc-top"):
    try:
        run = SOLVERS[solver]
    except KeyError:
        raise InvalidInputError(f"unknown solver {solver!r}; expected one of {sorted(SOLVERS)}") from None
    return run(table, config)
