"""Synthetic propagation fields, sensor deployments and noisy measurements.

Grid convention: row index ``i`` follows the y axis and column index ``j``
follows the x axis, so ``centers[i, j] == ((j + 0.5) * L / N, (i + 0.5) * L / N)``
with zero-based indices.  Flattened grids are always row-major.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial.distance import cdist

from ._rng import as_generator
from .errors import CholeskyError, ValidationError

log = logging.getLogger(__name__)

MODEL_KINDS = ("power", "exponential", "logdistance", "power_absorption", "underwater")


@dataclass(frozen=True)
class GridSpec:
    """``N x N`` discretization of the ``[0, L]^2`` area."""

    N: int
    L: float

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValidationError(f"grid size must be a positive integer, got {self.N!r}")
        if not self.L > 0:
            raise ValidationError(f"area side must be positive, got {self.L!r}")

    @property
    def spacing(self) -> float:
        return self.L / self.N

    @property
    def coords(self) -> np.ndarray:
        """1-D cell-center coordinates shared by both axes."""
        return (np.arange(self.N) + 0.5) * self.spacing

    @property
    def centers(self) -> np.ndarray:
        """``(N, N, 2)`` array of ``(x, y)`` cell centers."""
        x, y = np.meshgrid(self.coords, self.coords)
        return np.stack([x, y], axis=-1)

    @property
    def flat_centers(self) -> np.ndarray:
        return self.centers.reshape(-1, 2)

    def center(self, i: int, j: int) -> np.ndarray:
        return np.array([(j + 0.5) * self.spacing, (i + 0.5) * self.spacing])

    def cell_of(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Row and column indices of the cells containing ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        j = np.clip(np.floor(pts[:, 0] / self.spacing).astype(int), 0, self.N - 1)
        i = np.clip(np.floor(pts[:, 1] / self.spacing).astype(int), 0, self.N - 1)
        return i, j


def make_grid(N: int, L: float) -> GridSpec:
    return GridSpec(N, L)


@dataclass(frozen=True)
class PathGainModel:
    """Parametric path-gain law ``g(d)`` with ``d`` in model units.

    ``kind`` selects the formula:

    ``power``             alpha * d**-beta
    ``exponential``       alpha * exp(-d**beta)
    ``logdistance``       alpha - beta * log10(d)   (optionally clamped at 0)
    ``power_absorption``  alpha * d**-gamma * beta**-d
    ``underwater``        d**-gamma * beta**-d, with ``beta`` the absorption
                          factor A(f) and the source power as the only scale

    ``unit`` is the number of meters per model distance unit.
    """

    kind: str
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.5
    unit: float = 1.0
    clamp: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"unknown path-gain model {self.kind!r}")
        if not self.beta > 0:
            raise ValidationError("path-gain parameter beta must be positive")
        if self.kind in ("power_absorption", "underwater") and not self.gamma > 0:
            raise ValidationError("path-gain parameter gamma must be positive")
        if self.kind in ("power", "exponential", "power_absorption") and not self.alpha > 0:
            raise ValidationError("path-gain parameter alpha must be positive")
        if not self.unit > 0:
            raise ValidationError("distance unit must be positive")


def underwater_model(absorption=0.8, spreading=1.5, unit=1000.0) -> PathGainModel:
    """Empirical acoustic energy law ``P d^-spreading A^-d`` with ``d`` in km."""
    return PathGainModel("underwater", beta=absorption, gamma=spreading, unit=unit)


# Parameters of the four rank-study models together with their elevation h.
LOWRANK_MODELS = {
    "a": (PathGainModel("power", beta=2.2), 0.09),
    "b": (PathGainModel("exponential", beta=1.8), 0.05),
    "c": (PathGainModel("logdistance", beta=1.8, clamp=True), 0.01),
    "d": (PathGainModel("power_absorption", beta=2.8, gamma=1.5), 0.01),
}


def path_gain(model: PathGainModel, P, d3):
    """Gain ``P * g(d3)`` for 3-D distance ``d3`` given in model units."""
    d = np.asarray(d3, dtype=float)
    if np.any(~(d > 0)):
        raise ValidationError("path_gain needs strictly positive distances")
    P = np.asarray(P, dtype=float)
    a, b, k = model.alpha, model.beta, model.gamma
    if model.kind == "power":
        g = a * d ** -b
    elif model.kind == "exponential":
        g = a * np.exp(-(d ** b))
    elif model.kind == "logdistance":
        g = a - b * np.log10(d)
        if model.clamp:
            g = np.maximum(g, 0.0)
    elif model.kind == "power_absorption":
        g = a * d ** -k * b ** -d
    else:
        g = d ** -k * b ** -d
    out = P * g
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Source:
    location: tuple
    power: float = 1.0


@dataclass(frozen=True)
class Shadowing:
    """Log-normal shadowing parameters.

    ``mode`` is ``"additive"`` (``rho = sum g + zeta``) or ``"multiplicative"``
    (``rho = zeta * sum g``).  ``scale`` picks how the Gaussian field ``X``
    maps to ``zeta``: ``"log10"`` gives ``zeta = 10**X``, ``"dB"`` gives
    ``zeta = 10**(X / 10)``.
    """

    variance: float = 1.0
    corr_distance: float = 200.0
    mode: str = "multiplicative"
    scale: str = "dB"

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValidationError("shadowing variance must be non-negative")
        if not self.corr_distance > 0:
            raise ValidationError("shadowing correlation distance must be positive")
        if self.mode not in ("additive", "multiplicative"):
            raise ValidationError(f"unknown shadowing mode {self.mode!r}")
        if self.scale not in ("log10", "dB"):
            raise ValidationError(f"unknown shadowing scale {self.scale!r}")

    def to_linear(self, x):
        return 10.0 ** (x / 10.0) if self.scale == "dB" else 10.0 ** x


@dataclass(frozen=True)
class FieldSpec:
    sources: tuple
    model: PathGainModel
    elevation: float
    side: float
    shadowing: Shadowing | None = None

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.side > 0:
            raise ValidationError("area side must be positive")
        if not self.elevation >= 0:
            raise ValidationError("elevation must be non-negative")
        for s in self.sources:
            x, y = s.location
            if not (0 <= x <= self.side and 0 <= y <= self.side):
                raise ValidationError(f"source {s.location} lies outside the area")
            if not s.power > 0:
                raise ValidationError("source powers must be positive")

    def mean_field(self, points) -> np.ndarray:
        """Deterministic part ``sum_k g_k(d(s_k, z))`` at ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        total = np.zeros(len(pts))
        for s in self.sources:
            d2 = np.sum((pts - np.asarray(s.location, dtype=float)) ** 2, axis=1)
            d3 = np.sqrt(d2 + self.elevation ** 2) / self.model.unit
            total += path_gain(self.model, s.power, d3)
        return total

    def combine(self, mean, zeta):
        """Apply the shadowing convention to a mean field."""
        if self.shadowing is None:
            return mean
        if self.shadowing.mode == "multiplicative":
            return mean * zeta
        return mean + zeta


def random_sources(S, L, seed=None, rate=1.0, margin=0.0) -> tuple:
    """``S`` sources uniform in the area with powers drawn from Exp(rate)."""
    rng = as_generator(seed)
    locs = rng.uniform(margin, L - margin, size=(S, 2))
    powers = rng.exponential(1.0 / rate, size=S)
    return tuple(Source((float(x), float(y)), float(p)) for (x, y), p in zip(locs, powers))


def exponential_covariance(points, variance, corr_distance):
    pts = np.asarray(points, dtype=float)
    return variance * np.exp(-cdist(pts, pts) / corr_distance)


def sample_gaussian_field(points, variance, corr_distance, seed=None):
    """One zero-mean draw with exponential covariance at ``points``.

    Returns ``(values, jitter)`` where ``jitter`` is the diagonal loading that
    made the Cholesky factorization succeed.
    """
    rng = as_generator(seed)
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if variance == 0 or n == 0:
        return np.zeros(n), 0.0
    cov = exponential_covariance(pts, variance, corr_distance)
    jitter = 1e-10 * variance
    while True:
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            if jitter >= 1e-6 * variance * (1 - 1e-9):
                raise CholeskyError(
                    f"exponential covariance not factorizable at jitter {jitter:.3g}", jitter
                ) from None
            jitter *= 10
    log.debug("shadowing Cholesky succeeded with jitter %.3g", jitter)
    return chol @ rng.standard_normal(n), jitter


def sample_shadowing(grid: GridSpec, variance, corr_distance, seed=None, scale="log10"):
    """Log-normal shadowing factor ``zeta`` on the grid centers."""
    x, _ = sample_gaussian_field(grid.flat_centers, variance, corr_distance, seed)
    sh = Shadowing(variance, corr_distance, scale=scale)
    return sh.to_linear(x).reshape(grid.N, grid.N)


@dataclass
class GroundTruth:
    H: np.ndarray
    zeta: np.ndarray


@dataclass
class FieldRealization:
    """One shadowing realization shared by the grid and a set of extra points."""

    spec: FieldSpec
    grid: GridSpec
    truth: GroundTruth
    points: np.ndarray
    values: np.ndarray
    jitter: float = 0.0

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.spec.shadowing is None or self.spec.shadowing.variance == 0:
            zeta = np.ones(len(pts)) if self.spec.shadowing is not None else None
            return self.spec.combine(self.spec.mean_field(pts), zeta)
        if pts.shape == self.points.shape and np.array_equal(pts, self.points):
            return self.values.copy()
        flat = self.grid.flat_centers
        if pts.shape == flat.shape and np.array_equal(pts, flat):
            return self.truth.H.ravel().copy()
        raise ValidationError(
            "shadowed field is only defined at grid centers and the points it was realized with"
        )


def realize_field(spec: FieldSpec, grid: GridSpec, seed=None, points=None) -> FieldRealization:
    """Draw the ground truth on ``grid`` and, jointly, the field at ``points``."""
    pts = np.zeros((0, 2)) if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    centers = grid.flat_centers
    allpts = np.vstack([centers, pts])
    sh = spec.shadowing
    jitter = 0.0
    if sh is None:
        zeta = np.zeros(len(allpts))
    else:
        x, jitter = sample_gaussian_field(allpts, sh.variance, sh.corr_distance, seed)
        zeta = sh.to_linear(x)
    values = spec.combine(spec.mean_field(allpts), zeta)
    n = len(centers)
    truth = GroundTruth(values[:n].reshape(grid.N, grid.N), zeta[:n].reshape(grid.N, grid.N))
    return FieldRealization(spec, grid, truth, pts, values[n:], jitter)


def ground_truth(spec: FieldSpec, grid: GridSpec, seed=None) -> GroundTruth:
    return realize_field(spec, grid, seed).truth


def normalize_model(model: PathGainModel, grid: GridSpec, source, elevation) -> PathGainModel:
    """Return ``model`` with ``alpha`` chosen so the grid values sum to one."""
    d = np.sqrt(np.sum((grid.flat_centers - np.asarray(source)) ** 2, axis=1) + elevation ** 2)
    d = d / model.unit
    if model.kind == "logdistance":
        logd = np.log10(d)
        if model.clamp:
            total = lambda a: np.maximum(a - model.beta * logd, 0.0).sum() - 1.0
            lo = model.beta * logd.min()
            hi = model.beta * logd.max() + 1.0
            alpha = brentq(total, lo, hi, xtol=1e-15, rtol=1e-15)
        else:
            alpha = (1.0 + model.beta * logd.sum()) / len(d)
        return PathGainModel(model.kind, alpha, model.beta, model.gamma, model.unit, model.clamp)
    unit = PathGainModel(model.kind, 1.0, model.beta, model.gamma, model.unit, model.clamp)
    s = np.sum(path_gain(unit, 1.0, d))
    return PathGainModel(model.kind, 1.0 / s, model.beta, model.gamma, model.unit, model.clamp)


def deploy_sensors(M, density="uniform", L=1.0, seed=None, resolution=201) -> np.ndarray:
    """``M`` i.i.d. sensor locations in ``[0, L]^2``.

    ``density`` is ``"uniform"`` or a vectorized callable ``f(x, y) >= 0``
    (unnormalized).  Custom densities are sampled by rejection against an
    envelope of 1.25 times the maximum of ``f`` on a ``resolution``-point
    lattice.
    """
    if int(M) != M or M < 1:
        raise ValidationError(f"sensor count must be a positive integer, got {M!r}")
    rng = as_generator(seed)
    if isinstance(density, str):
        if density != "uniform":
            raise ValidationError(f"unknown sensor density {density!r}")
        return rng.uniform(0.0, L, size=(M, 2))
    t = np.linspace(0.0, L, resolution)
    gx, gy = np.meshgrid(t, t)
    fv = np.asarray(density(gx, gy), dtype=float)
    if not np.all(np.isfinite(fv)) or np.any(fv < 0) or fv.sum() <= 0:
        raise ValidationError("custom sensor density is not normalizable on the area")
    bound = 1.25 * fv.max()
    out = np.empty((0, 2))
    while len(out) < M:
        cand = rng.uniform(0.0, L, size=(2 * (M - len(out)) + 16, 2))
        u = rng.uniform(0.0, bound, size=len(cand))
        keep = u < np.asarray(density(cand[:, 0], cand[:, 1]), dtype=float)
        out = np.vstack([out, cand[keep]])
    return out[:M]


@dataclass(frozen=True)
class SensorSample:
    location: np.ndarray
    value: float


@dataclass
class SensorSamples:
    """Columnar container of sensor locations ``z`` and measurements ``gamma``."""

    z: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float)).reshape(-1, 2)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(-1)
        if len(self.z) != len(self.gamma):
            raise ValidationError("locations and measurements differ in length")

    def __len__(self):
        return len(self.gamma)

    def __getitem__(self, m):
        return SensorSample(self.z[m].copy(), float(self.gamma[m]))

    def __iter__(self):
        return (self[m] for m in range(len(self)))

    @classmethod
    def from_list(cls, samples: Sequence[SensorSample]) -> "SensorSamples":
        if not samples:
            return cls(np.zeros((0, 2)), np.zeros(0))
        return cls(np.array([s.location for s in samples]), np.array([s.value for s in samples]))


def measure(rho: Callable, sensors, sigma, seed=None) -> SensorSamples:
    """Noisy readings ``gamma_m = rho(z_m) + eps_m`` with Gaussian ``eps``."""
    if not sigma >= 0:
        raise ValidationError("noise standard deviation must be non-negative")
    rng = as_generator(seed)
    z = np.atleast_2d(np.asarray(sensors, dtype=float))
    clean = np.asarray(rho(z), dtype=float)
    noise = rng.normal(0.0, sigma, size=len(z)) if sigma > 0 else np.zeros(len(z))
    return SensorSamples(z, clean + noise)

