"""Low-rank completion of the interpolated observation matrix.

Both nuclear-norm solvers reduce to

    minimize ||X||_*  subject to  lo_ij <= X_ij <= hi_ij  for (i, j) in Omega

and are solved with ADMM on the split ``X = Z``: a singular value
thresholding step for ``X`` and a closed-form box projection for ``Z``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._rng import as_generator
from .errors import InfeasibleIntervalError, ValidationError
from .errstats import norm_ppf
from .localinterp import ObservationSet

log = logging.getLogger(__name__)

SOLVERS = ("nnm-t", "nnm", "wals", "als")


@dataclass
class SolverParams:
    penalty: float = 1.0
    max_iter: int = 500
    tol: float = 1e-5
    rank: int = 1
    max_sweeps: int = 200
    sweep_tol: float = 1e-10
    seed: int = 0
    weight_cap: float = 1e6

    def __post_init__(self):
        if not self.penalty > 0:
            raise ValidationError("penalty must be positive")
        if not (self.tol > 0 and self.sweep_tol > 0):
            raise ValidationError("tolerances must be positive")
        if self.rank < 1:
            raise ValidationError("rank must be at least 1")


@dataclass
class CompletionProblem:
    N: int
    observations: ObservationSet
    solver: str = "nnm-t"
    params: SolverParams = field(default_factory=SolverParams)
    delta: float = 0.05
    epsilon: float | None = None

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValidationError(f"unknown solver {self.solver!r}")
        if self.observations.N != self.N:
            raise ValidationError("observation set and problem disagree on N")


@dataclass
class CompletionResult:
    H: np.ndarray
    iterations: int
    violation: float
    objective: float
    converged: bool
    history: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)


def svt(X, tau):
    """Singular value thresholding ``U max(S - tau, 0) V^T``."""
    if not tau >= 0:
        raise ValidationError("threshold must be non-negative")
    U, s, Vt = np.linalg.svd(np.asarray(X, dtype=float), full_matrices=False)
    return (U * np.maximum(s - tau, 0.0)) @ Vt


def nuclear_norm(X):
    return float(np.sum(np.linalg.svd(X, compute_uv=False)))


def _violation(X, rows, cols, lo, hi):
    if len(rows) == 0:
        return 0.0
    x = X[rows, cols]
    return float(np.max(np.maximum(lo - x, 0.0) + np.maximum(x - hi, 0.0)))


def box_nnm(N, rows, cols, lo, hi, penalty=1.0, max_iter=500, tol=1e-5, relax=1.6):
    """ADMM for nuclear-norm minimization under per-entry box constraints.

    The penalty is adapted by residual balancing (factor 2 whenever one
    residual exceeds the other tenfold) and the ``X`` update is over-relaxed
    by ``relax``.  Converged means the entrywise split residual ``max|X - Z|``
    and the dual residual ``penalty * max|Z - Z_prev|`` are both below
    ``tol``; because ``Z`` is feasible this bounds the interval violation of
    ``X`` by ``tol``.  On hitting ``max_iter`` the final iterate is returned
    with ``converged=False``.
    """
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InfeasibleIntervalError("empty trust interval")
    rho = float(penalty)
    Z = np.zeros((N, N))
    Z[rows, cols] = 0.5 * (lo + hi)
    U = np.zeros((N, N))
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Uh, s, Vt = np.linalg.svd(Z - U, full_matrices=False)
        s = np.maximum(s - 1.0 / rho, 0.0)
        X = (Uh * s) @ Vt
        Xr = relax * X + (1.0 - relax) * Z
        Zold = Z
        Z = Xr + U
        Z[rows, cols] = np.clip(Z[rows, cols], lo, hi)
        U += Xr - Z
        primal = float(np.max(np.abs(X - Z)))
        dual = rho * float(np.max(np.abs(Z - Zold)))
        history.append((it, float(s.sum()), _violation(X, rows, cols, lo, hi)))
        if primal <= tol and dual <= tol:
            converged = True
            break
        if primal > 10 * dual:
            rho *= 2.0
            U /= 2.0
        elif dual > 10 * primal:
            rho /= 2.0
            U *= 2.0
    if not converged:
        log.info("nuclear-norm ADMM stopped after %d iterations (violation %.3g)", it, history[-1][2])
    _, obj, viol = history[-1]
    return CompletionResult(X, it, viol, obj, converged, history)


def trust_bounds(obs: ObservationSet, delta):
    """Debiased intervals ``H_hat - mu +/- q nu`` for every observed entry."""
    q = float(norm_ppf(1 - delta / 2))
    center = obs.H_hat - obs.mu
    return center - q * obs.nu, center + q * obs.nu


def solve_nnm_t(problem: CompletionProblem, params: SolverParams | None = None) -> CompletionResult:
    """Nuclear-norm completion with trust-region constraints."""
    p = params or problem.params
    obs = problem.observations
    lo, hi = trust_bounds(obs, problem.delta)
    return box_nnm(problem.N, obs.rows, obs.cols, lo, hi, p.penalty, p.max_iter, p.tol)


def solve_nnm(problem: CompletionProblem, epsilon=None, params: SolverParams | None = None):
    """Conventional nuclear-norm completion with ``|X_ij - H_hat_ij| <= epsilon``."""
    p = params or problem.params
    eps = problem.epsilon if epsilon is None else epsilon
    if eps is None or not eps >= 0:
        raise ValidationError("epsilon must be a non-negative number")
    obs = problem.observations
    return box_nnm(problem.N, obs.rows, obs.cols, obs.H_hat - eps, obs.H_hat + eps,
                   p.penalty, p.max_iter, p.tol)


def wals_weights(nu, cap=1e6):
    """Inverse-std weights, capped at ``cap / median(nu)``."""
    nu = np.asarray(nu, dtype=float)
    med = float(np.median(nu)) if len(nu) else 0.0
    if med <= 0:
        if np.all(nu <= 0):
            return np.ones_like(nu)
        med = float(np.median(nu[nu > 0]))
    limit = cap / med
    with np.errstate(divide="ignore"):
        w = np.where(nu > 0, 1.0 / nu, np.inf)
    return np.minimum(w, limit)


def weighted_als(N, rows, cols, y, w, rank=1, max_sweeps=200, tol=1e-10, seed=0, attempts=3):
    """Alternating weighted least squares on ``X = L R``.

    Minimizes ``||w * (y - X[rows, cols])||_2``; repeated ``(row, col)`` pairs
    are allowed.  Rows or columns without observations get zero factors and
    are reported in ``degenerate``.

    A run that exhausts ``max_sweeps`` is usually drifting towards an
    unattained infimum (one factor growing without bound while its partner
    shrinks).  It is restarted from the next draws of the same generator, up
    to ``attempts`` runs in total; the first converged run is returned, or
    failing that the one with the lowest objective.
    """
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if attempts < 1:
        raise ValidationError("need at least one attempt")
    if len(y) < 2 * N * rank:
        log.warning("only %d observations for %d factor parameters", len(y), 2 * N * rank)
    rng = as_generator(seed)
    scale = (np.mean(np.abs(y)) if len(y) else 1.0) / np.sqrt(rank)
    w2 = w * w
    by_row = [np.flatnonzero(rows == i) for i in range(N)]
    by_col = [np.flatnonzero(cols == j) for j in range(N)]
    degenerate = [("row", i) for i in range(N) if len(by_row[i]) == 0]
    degenerate += [("col", j) for j in range(N) if len(by_col[j]) == 0]

    def objective(L, R):
        r = y - np.einsum("nk,kn->n", L[rows], R[:, cols])
        return float(np.sqrt(np.sum(w2 * r * r)))

    def solve(idx, other):
        # other: (n_obs, rank) factor rows paired with the observations
        if len(idx) == 0:
            return np.zeros(rank)
        sw = w[idx]
        A = other * sw[:, None]
        sol, *_ = np.linalg.lstsq(A, y[idx] * sw, rcond=None)
        return sol

    best = None
    for attempt in range(attempts):
        L = rng.standard_normal((N, rank)) * scale
        R = rng.standard_normal((rank, N)) * scale
        history = [(0, objective(L, R), 0.0)]
        converged = False
        sweep = 0
        for sweep in range(1, max_sweeps + 1):
            for i in range(N):
                idx = by_row[i]
                L[i] = solve(idx, R[:, cols[idx]].T)
            for j in range(N):
                idx = by_col[j]
                R[:, j] = solve(idx, L[rows[idx]])
            obj = objective(L, R)
            prev = history[-1][1]
            history.append((sweep, obj, 0.0))
            if abs(prev - obj) <= tol * max(prev, 1e-300):
                converged = True
                break
        result = CompletionResult(L @ R, sweep, 0.0, history[-1][1], converged, history, degenerate)
        if best is None or result.objective < best.objective:
            best = result
        if converged:
            return result
        log.info("ALS attempt %d stopped after %d sweeps; restarting", attempt + 1, sweep)
    return best


def solve_wals(problem: CompletionProblem, params: SolverParams | None = None, weights="inverse-std",
               debias=True) -> CompletionResult:
    """Weighted ALS on ``y = H_hat - mu`` with weights ``1 / nu`` (capped)."""
    p = params or problem.params
    obs = problem.observations
    y = obs.H_hat - obs.mu if debias else obs.H_hat.copy()
    if weights == "unit":
        w = np.ones(len(obs))
    elif weights == "inverse-std":
        w = wals_weights(obs.nu, p.weight_cap)
    else:
        raise ValidationError(f"unknown weighting {weights!r}")
    return weighted_als(problem.N, obs.rows, obs.cols, y, w, p.rank, p.max_sweeps, p.sweep_tol, p.seed)


def solve_als(problem: CompletionProblem, params: SolverParams | None = None) -> CompletionResult:
    """Conventional ALS: raw ``H_hat`` with unit weights."""
    return solve_wals(problem, params, weights="unit", debias=False)


def solve(problem: CompletionProblem) -> CompletionResult:
    if problem.solver == "nnm-t":
        return solve_nnm_t(problem)
    if problem.solver == "nnm":
        return solve_nnm(problem)
    if problem.solver == "wals":
        return solve_wals(problem)
    return solve_als(problem)


def singular_energy(H, K) -> float:
    """Fraction of the singular-value sum carried by the top ``K`` values."""
    s = np.linalg.svd(np.asarray(H, dtype=float), compute_uv=False)
    if not 1 <= K <= len(s):
        raise ValidationError(f"K must lie in [1, {len(s)}]")
    total = s.sum()
    if total == 0:
        return 1.0
    return float(s[:K].sum() / total)
