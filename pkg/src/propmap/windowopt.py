"""Window-size selection for the local interpolation stage.

The analytical objective is the mean of ``mu^2 + nu^2`` over the cells that
are observable at a given window size.  Selection is an exhaustive search
over an evenly spaced grid of ``b`` because the objective jumps whenever a
cell enters or leaves the observation set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GuardExhaustedError, NoFeasibleWindowError, ValidationError
from .errstats import estimate_moments
from .fieldsim import GridSpec, SensorSamples
from .localinterp import N_PARAMS, batch_fit, build_observation_index


@dataclass
class WindowSearchSpec:
    b_min: float
    b_max: float
    points: int = 40
    M0: int = 7
    omega: float | None = None
    C: float = 2.5

    def __post_init__(self):
        if not 0 < self.b_min <= self.b_max:
            raise ValidationError("need 0 < b_min <= b_max")
        if self.points < 2:
            raise ValidationError("the search grid needs at least two points")
        if self.M0 < 1:
            raise ValidationError("M0 must be at least 1")
        if self.omega is not None and not 0 < self.omega <= 1:
            raise ValidationError("omega must lie in (0, 1]")

    def candidates(self) -> np.ndarray:
        return np.linspace(self.b_min, self.b_max, self.points)

    def ratio(self, N) -> float:
        """Required observed fraction; defaults to ``C N log^2 N / N^2`` capped at 1."""
        if self.omega is not None:
            return self.omega
        if N < 2:
            return 1.0
        return min(1.0, self.C * N * math.log(N) ** 2 / (N * N))


@dataclass
class WindowChoice:
    """Selected window: ``b`` is a scalar or a per-cell dict ``(i, j) -> b_ij``."""

    b: float | dict
    trace: list = field(default_factory=list)
    escalations: int = 0


@dataclass
class GuardReport:
    escalations: int
    b_history: list
    rows_covered: int
    cols_covered: int
    N: int

    @property
    def covered(self):
        return self.rows_covered == self.N and self.cols_covered == self.N


def nearest_floor(grid: GridSpec, z, M0, margin=1e-6) -> np.ndarray:
    """Per-cell radius that strictly encloses the ``M0`` nearest sensors."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if len(z) < M0:
        raise ValidationError(f"need at least M0={M0} sensors, have {len(z)}")
    d = np.sqrt(np.sum((grid.flat_centers[:, None, :] - z[None, :, :]) ** 2, axis=-1))
    kth = np.partition(d, M0 - 1, axis=1)[:, M0 - 1]
    return (kth * (1.0 + margin)).reshape(grid.N, grid.N)


def _cells(grid: GridSpec, index):
    rows = np.array([i for i, _ in index], dtype=int)
    cols = np.array([j for _, j in index], dtype=int)
    return rows, cols, grid.centers[rows, cols]


def analytical_mse(b, grid: GridSpec, samples: SensorSamples, order, kernel, sigma, M0=None,
                   index=None, floors=None):
    """Mean of ``mu^2 + nu^2`` over the observable cells at window ``b``.

    Without ``index`` the cells are those with at least ``M0`` sensors
    strictly inside ``b`` (``M0`` defaults to one more than the parameter
    count of the derivative fit).  With ``index`` the given cells are used,
    each at ``max(b, floors[i, j])`` when ``floors`` is supplied.  Cells
    whose fits fail do not count.  Returns ``(objective, size)``, with
    ``(inf, 0)`` when nothing is observable.
    """
    if not b > 0:
        raise ValidationError("window size must be positive")
    if index is None:
        m0 = N_PARAMS[order + 1] if M0 is None else M0
        index = build_observation_index(grid, samples, "sensor-aware", b, m0)
    if len(index) == 0:
        return math.inf, 0
    rows, cols, centers = _cells(grid, index)
    bb = np.full(len(rows), float(b))
    if floors is not None:
        bb = np.maximum(bb, np.asarray(floors)[rows, cols])
    cm = estimate_moments(order, centers, samples, bb, kernel, sigma)
    ok = cm.ok
    if not np.any(ok):
        return math.inf, 0
    return float(np.mean(cm.mu[ok] ** 2 + cm.nu2[ok])), int(ok.sum())


def _argmin_smallest(values):
    """Index of the minimum; the first (smallest ``b``) wins ties."""
    return int(np.argmin(values))


def optimize_window(spec: WindowSearchSpec, grid: GridSpec, samples: SensorSamples, order, kernel,
                    sigma, index=None, floors=None, min_size=None) -> WindowChoice:
    """Global window minimizing :func:`analytical_mse` over the search grid.

    Only ``b`` whose observable set holds at least ``ratio * N^2`` cells
    (or ``min_size`` when given) are eligible.  The trace holds
    ``(b, objective, size)`` for every candidate.
    """
    need = spec.ratio(grid.N) * grid.N ** 2 if min_size is None else min_size
    trace = []
    for b in spec.candidates():
        obj, size = analytical_mse(b, grid, samples, order, kernel, sigma, spec.M0, index, floors)
        trace.append((float(b), obj, size))
    feasible = np.array([size >= need - 1e-9 and math.isfinite(obj) for _, obj, size in trace])
    if not np.any(feasible):
        raise NoFeasibleWindowError(
            f"no window in [{spec.b_min:g}, {spec.b_max:g}] observes {need:.0f} of {grid.N ** 2} cells")
    objs = np.array([obj if ok else np.inf for (_, obj, _), ok in zip(trace, feasible)])
    return WindowChoice(trace[_argmin_smallest(objs)][0], trace)


def loo_cv(b_candidates, samples: SensorSamples, order, kernel, penalty=None):
    """Leave-one-out cross-validation over ``b_candidates``.

    A fold whose held-out fit is not well posed predicts ``penalty`` (the
    default 0 charges the squared reading).  Returns ``(b_cv, scores)``.
    """
    z, gamma = samples.z, samples.gamma
    fill = 0.0 if penalty is None else float(penalty)
    scores = []
    for b in np.asarray(b_candidates, dtype=float):
        fit = batch_fit(order, z, z, b, kernel, exclude_self=True)
        pred = np.where(fit.ok, fit.predict(gamma), fill)
        scores.append(float(np.mean((gamma - pred) ** 2)))
    scores = np.array(scores)
    return float(np.asarray(b_candidates, dtype=float)[_argmin_smallest(scores)]), scores


def coverage(grid: GridSpec, index):
    mask = np.zeros((grid.N, grid.N), dtype=bool)
    for i, j in index:
        mask[i, j] = True
    return int(mask.any(axis=1).sum()), int(mask.any(axis=0).sum())


def identifiability_guard(grid: GridSpec, samples: SensorSamples, b, M0, limit=20):
    """Grow ``b`` by 20% until every row and column has an observed cell.

    Returns ``(b, index, report)``.  Raises :class:`GuardExhaustedError`
    carrying the report when ``limit`` escalations do not suffice.
    """
    if limit < 0:
        raise ValidationError("escalation limit must be non-negative")
    history = [float(b)]
    index = build_observation_index(grid, samples, "sensor-aware", b, M0)
    rows, cols = coverage(grid, index)
    k = 0
    while (rows < grid.N or cols < grid.N) and k < limit:
        b *= 1.2
        k += 1
        history.append(float(b))
        index = build_observation_index(grid, samples, "sensor-aware", b, M0)
        rows, cols = coverage(grid, index)
    report = GuardReport(k, history, rows, cols, grid.N)
    if not report.covered:
        raise GuardExhaustedError(
            f"{grid.N - rows} rows and {grid.N - cols} columns still unobserved after {k} escalations",
            report)
    return float(b), index, report


def per_cell_windows(spec: WindowSearchSpec, grid: GridSpec, index, samples: SensorSamples, order,
                     kernel, sigma, floors=None) -> WindowChoice:
    """Per-cell window minimizing ``mu_ij^2 + nu_ij^2`` over the search grid.

    Each candidate is raised to the cell's floor, the smallest radius
    strictly enclosing ``M0`` sensors.  The trace records the mean objective
    over the cells per candidate.
    """
    if len(index) == 0:
        return WindowChoice({}, [])
    if floors is None:
        floors = nearest_floor(grid, samples.z, spec.M0)
    rows, cols, centers = _cells(grid, index)
    floor = np.asarray(floors)[rows, cols]
    cand = spec.candidates()
    obj = np.full((len(cand), len(rows)), np.inf)
    used = np.empty((len(cand), len(rows)))
    trace = []
    for k, b in enumerate(cand):
        bb = np.maximum(b, floor)
        used[k] = bb
        cm = estimate_moments(order, centers, samples, bb, kernel, sigma)
        obj[k, cm.ok] = cm.mu[cm.ok] ** 2 + cm.nu2[cm.ok]
        fin = np.isfinite(obj[k])
        trace.append((float(b), float(obj[k, fin].mean()) if fin.any() else math.inf, int(fin.sum())))
    best = np.argmin(obj, axis=0)
    chosen = used[best, np.arange(len(rows))]
    # cells where every candidate failed keep the largest window tried
    dead = ~np.isfinite(obj.min(axis=0))
    chosen[dead] = used[-1, dead]
    return WindowChoice({(int(i), int(j)): float(v) for i, j, v in zip(rows, cols, chosen)}, trace)
