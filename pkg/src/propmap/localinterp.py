"""Kernel-weighted local polynomial regression and observation-set construction.

Fits are centered on the target point and use the scaled offsets
``u = (z - c) / b`` internally, so the normal matrix stays well conditioned
regardless of the physical units.  Coefficients are converted back to
physical units before they are returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from ._rng import as_generator
from .errors import SingularFitError, UnderdeterminedError, ValidationError
from .fieldsim import GridSpec, SensorSamples

KERNELS = ("epanechnikov", "gaussian")
N_PARAMS = {0: 1, 1: 3, 2: 6}
COND_LIMIT = 1e12

OK, UNDERDETERMINED, SINGULAR = 0, 1, 2
STATUS_NAMES = {OK: "ok", UNDERDETERMINED: "underdetermined", SINGULAR: "singular"}


class Kernel:
    """Radially symmetric kernel supported on the open unit disk.

    The normalization constant is computed by quadrature so the kernel
    integrates to one over the plane.
    """

    def __init__(self, kind="epanechnikov"):
        if kind not in KERNELS:
            raise ValidationError(f"unknown kernel {kind!r}")
        self.kind = kind
        mass, _ = integrate.quad(lambda r: self.profile(r * r) * 2 * math.pi * r, 0.0, 1.0,
                                 epsabs=1e-13, epsrel=1e-12)
        self.norm = 1.0 / mass

    def profile(self, r2):
        """Unnormalized shape as a function of the squared radius."""
        r2 = np.asarray(r2, dtype=float)
        if self.kind == "epanechnikov":
            shape = 1.0 - r2
        else:
            shape = np.exp(-r2 / 2.0)
        out = np.where(r2 < 1.0, shape, 0.0)
        return out if out.ndim else float(out)

    def from_r2(self, r2):
        return self.norm * self.profile(r2)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.from_r2(np.sum(u * u, axis=-1))

    def __repr__(self):
        return f"Kernel({self.kind!r})"

    def __eq__(self, other):
        return isinstance(other, Kernel) and other.kind == self.kind

    def __hash__(self):
        return hash(("Kernel", self.kind))


def as_kernel(kernel) -> Kernel:
    return kernel if isinstance(kernel, Kernel) else Kernel(kernel)


def kernel_eval(kernel, u):
    return as_kernel(kernel)(u)


def design(order, u):
    """Polynomial basis ``[1, x, y, x^2, xy, y^2]`` truncated to ``order``."""
    x, y = u[..., 0], u[..., 1]
    cols = [np.ones_like(x)]
    if order >= 1:
        cols += [x, y]
    if order >= 2:
        cols += [x * x, x * y, y * y]
    return np.stack(cols, axis=-1)


def _unscale(order, coef, b):
    """Convert coefficients of the scaled basis back to physical units."""
    powers = np.array([0, 1, 1, 2, 2, 2])[: N_PARAMS[order]]
    return coef / np.asarray(b, dtype=float)[..., None] ** powers


@dataclass
class LocalFit:
    order: int
    alpha: float
    beta: np.ndarray | None
    hessian: np.ndarray | None
    center: np.ndarray
    b: float
    indices: np.ndarray
    cond: float = 1.0


def _coef_to_fit(order, coef, c, b, idx, cond):
    beta = coef[1:3].copy() if order >= 1 else None
    hess = None
    if order >= 2:
        axx, axy, ayy = coef[3:6]
        hess = np.array([[2 * axx, axy], [axy, 2 * ayy]])
    return LocalFit(order, float(coef[0]), beta, hess, np.asarray(c, dtype=float), float(b), idx, cond)


def fit_local(order, c, samples: SensorSamples, b, kernel="epanechnikov") -> LocalFit:
    """Weighted least-squares polynomial fit of ``order`` around ``c``.

    Raises
    ------
    UnderdeterminedError
        Fewer in-window samples than coefficients.
    SingularFitError
        Condition number of the (scaled) normal matrix above ``1e12``.
    """
    if order not in N_PARAMS:
        raise ValidationError(f"order must be 0, 1 or 2, got {order!r}")
    if not b > 0:
        raise ValidationError("window size must be positive")
    kern = as_kernel(kernel)
    c = np.asarray(c, dtype=float)
    u = (samples.z - c) / b
    w = kern(u)
    idx = np.flatnonzero(w > 0)
    p = N_PARAMS[order]
    if len(idx) < p:
        raise UnderdeterminedError(f"{len(idx)} weighted samples for {p} coefficients")
    sw = np.sqrt(w[idx])
    X = design(order, u[idx]) * sw[:, None]
    s = np.linalg.svd(X, compute_uv=False)
    cond = (s[0] / s[-1]) ** 2 if s[-1] > 0 else np.inf
    if cond > COND_LIMIT:
        raise SingularFitError(f"normal matrix condition number {cond:.3g}")
    coef, *_ = np.linalg.lstsq(X, samples.gamma[idx] * sw, rcond=None)
    return _coef_to_fit(order, _unscale(order, coef, b), c, b, idx, cond)


@dataclass
class Neighborhood:
    """Padded per-center lists of the samples strictly inside each window.

    ``idx[c, k]`` is a sample index for ``k < count[c]``; padding slots have
    ``valid`` False.  ``offsets`` holds ``z - c`` in physical units.
    """

    idx: np.ndarray
    valid: np.ndarray
    offsets: np.ndarray
    b: np.ndarray
    M: int

    def dense(self, values):
        """Scatter ``(C, K)`` per-slot values into a ``(C, M)`` array."""
        out = np.zeros((len(self.idx), self.M))
        rows = np.broadcast_to(np.arange(len(self.idx))[:, None], self.idx.shape)
        out[rows[self.valid], self.idx[self.valid]] = values[self.valid]
        return out


def neighborhood(centers, z, b, exclude_self=False) -> Neighborhood:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    C, M = len(centers), len(z)
    bb = np.broadcast_to(np.asarray(b, dtype=float), (C,)).copy()
    d2 = np.sum((centers[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    inside = d2 < (bb * bb)[:, None]
    if exclude_self:
        inside[np.arange(C), np.arange(C)] = False
    count = inside.sum(axis=1)
    K = max(1, int(count.max()) if C else 1)
    idx = np.argsort(~inside, axis=1, kind="stable")[:, :K]
    valid = np.arange(K)[None, :] < count[:, None]
    offsets = z[idx] - centers[:, None, :]
    return Neighborhood(idx, valid, offsets, bb, M)


@dataclass
class BatchFit:
    """Local fits at many centers against one sample set.

    ``hat_k[c]`` is the equivalent-kernel row of the intercept over the
    neighborhood slots, so the fitted value at center ``c`` is
    ``hat_k[c] @ gamma[nb.idx[c]]``.  Rows of failed fits are zero.
    """

    order: int
    nb: Neighborhood
    status: np.ndarray
    hat_k: np.ndarray
    coef: np.ndarray | None
    n_active: np.ndarray
    cond: np.ndarray

    @property
    def ok(self):
        return self.status == OK

    @property
    def hat(self):
        return self.nb.dense(self.hat_k)

    def predict(self, gamma):
        return np.sum(self.hat_k * np.asarray(gamma, dtype=float)[self.nb.idx], axis=1)


def fit_neighborhood(order, nb: Neighborhood, kernel="epanechnikov", gamma=None) -> BatchFit:
    """Weighted polynomial fits on precomputed neighborhoods."""
    kern = as_kernel(kernel)
    p = N_PARAMS[order]
    C = len(nb.idx)
    u = nb.offsets / nb.b[:, None, None]
    w = np.where(nb.valid, kern.from_r2(np.sum(u * u, axis=-1)), 0.0)
    n_active = np.count_nonzero(w > 0, axis=1)
    A = design(order, u)
    X = A * w[..., None]
    G = np.matmul(np.swapaxes(X, 1, 2), A)
    status = np.full(C, UNDERDETERMINED, dtype=int)
    cond = np.full(C, np.inf)
    hat_k = np.zeros(w.shape)
    coef = np.zeros((C, p)) if gamma is not None else None
    enough = n_active >= p
    if np.any(enough):
        evals, Q = np.linalg.eigh(G[enough])
        with np.errstate(divide="ignore", invalid="ignore"):
            cn = np.where(evals[:, 0] > 0, evals[:, -1] / evals[:, 0], np.inf)
        cond[enough] = cn
        good_sub = cn <= COND_LIMIT
        status[np.flatnonzero(enough)] = np.where(good_sub, OK, SINGULAR)
        good = np.flatnonzero(enough)[good_sub]
        ev, Q = evals[good_sub], Q[good_sub]
        ginv = np.einsum("cik,cjk->cij", Q / ev[:, None, :], Q)
        hat_k[good] = np.einsum("cj,cmj->cm", ginv[:, 0, :], X[good])
        if gamma is not None:
            g = np.asarray(gamma, dtype=float)[nb.idx[good]]
            rhs = np.einsum("cmj,cm->cj", X[good], g)
            coef[good] = _unscale(order, np.einsum("cij,cj->ci", ginv, rhs), nb.b[good])
    return BatchFit(order, nb, status, hat_k, coef, n_active, cond)


def batch_fit(order, centers, z, b, kernel="epanechnikov", gamma=None, exclude_self=False) -> BatchFit:
    """Vectorized version of :func:`fit_local` over ``centers``.

    ``b`` is a scalar or one window per center.  With ``exclude_self`` the
    ``k``-th sample is dropped from the ``k``-th fit (leave-one-out; the
    centers must then be the sample locations themselves).
    """
    return fit_neighborhood(order, neighborhood(centers, z, b, exclude_self), kernel, gamma)


def hessians_from_coef(coef):
    """``(C, 2, 2)`` Hessians from second-order coefficients."""
    axx, axy, ayy = coef[:, 3], coef[:, 4], coef[:, 5]
    H = np.empty((len(coef), 2, 2))
    H[:, 0, 0] = 2 * axx
    H[:, 1, 1] = 2 * ayy
    H[:, 0, 1] = H[:, 1, 0] = axy
    return H


def window_counts(grid: GridSpec, z, b) -> np.ndarray:
    """Number of sensors strictly within distance ``b`` of each cell center."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    c = grid.flat_centers
    d2 = np.sum((c[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    bb = np.broadcast_to(np.asarray(b, dtype=float).reshape(-1), (len(c),)) if np.ndim(b) else b
    if np.ndim(b):
        inside = d2 < bb[:, None] ** 2
    else:
        inside = d2 < b * b
    return inside.sum(axis=1).reshape(grid.N, grid.N)


def uniform_sample_size(N, C) -> int:
    return min(N * N, math.ceil(C * N * math.log(N) ** 2)) if N > 1 else 1


def build_observation_index(grid: GridSpec, sensors, mode="sensor-aware", b=None, M0=1, C=1.6,
                            seed=None) -> list:
    """Cells forming the observation set, in row-major order.

    ``uniform`` draws ``ceil(C N log^2 N)`` distinct cells at random (capped at
    ``N^2``); ``sensor-aware`` keeps the cells with at least ``M0`` sensors
    strictly inside radius ``b`` of the center.
    """
    if mode == "uniform":
        n = uniform_sample_size(grid.N, C)
        rng = as_generator(seed)
        flat = np.sort(rng.choice(grid.N * grid.N, size=n, replace=False))
        return [(int(k // grid.N), int(k % grid.N)) for k in flat]
    if mode != "sensor-aware":
        raise ValidationError(f"unknown sampling mode {mode!r}")
    if b is None or not b > 0:
        raise ValidationError("sensor-aware sampling needs a positive window size")
    if M0 < 1:
        raise ValidationError("M0 must be at least 1")
    z = sensors.z if isinstance(sensors, SensorSamples) else sensors
    counts = window_counts(grid, z, b)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(counts >= M0))]


@dataclass
class ObservationSet:
    """Interpolated matrix entries with their error statistics."""

    rows: np.ndarray
    cols: np.ndarray
    H_hat: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    b: np.ndarray
    N: int
    mode: str = "uniform"
    dropped: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=int)
        self.cols = np.asarray(self.cols, dtype=int)
        n = len(self.rows)
        self.H_hat = np.asarray(self.H_hat, dtype=float).reshape(n)
        self.mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (n,)).copy()
        self.nu = np.broadcast_to(np.asarray(self.nu, dtype=float), (n,)).copy()
        self.b = np.broadcast_to(np.asarray(self.b, dtype=float), (n,)).copy()
        if n and (self.rows.min() < 0 or self.cols.min() < 0
                  or self.rows.max() >= self.N or self.cols.max() >= self.N):
            raise ValidationError("observation index outside the grid")
        if len(set(zip(self.rows.tolist(), self.cols.tolist()))) != n:
            raise ValidationError("duplicate observation entries")
        if np.any(self.nu < 0):
            raise ValidationError("standard deviations must be non-negative")

    def __len__(self):
        return len(self.rows)

    @property
    def index(self):
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def mask(self) -> np.ndarray:
        m = np.zeros((self.N, self.N), dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def subset(self, keep) -> "ObservationSet":
        keep = np.asarray(keep, dtype=bool)
        return ObservationSet(self.rows[keep], self.cols[keep], self.H_hat[keep], self.mu[keep],
                              self.nu[keep], self.b[keep], self.N, self.mode, list(self.dropped))

    def matrix(self, fill=np.nan) -> np.ndarray:
        out = np.full((self.N, self.N), fill, dtype=float)
        out[self.rows, self.cols] = self.H_hat
        return out


def _windows_for(index, window):
    """Per-entry windows from a scalar, an ``N x N`` array or a mapping."""
    if np.ndim(window) == 0 and not isinstance(window, dict):
        return np.full(len(index), float(window))
    if isinstance(window, dict):
        return np.array([window[ij] for ij in index], dtype=float)
    arr = np.asarray(window, dtype=float)
    return np.array([arr[i, j] for i, j in index], dtype=float)


def interpolate_entries(grid: GridSpec, index, samples: SensorSamples, window, order=1,
                        kernel="epanechnikov", mode="uniform") -> ObservationSet:
    """Estimate ``H_hat`` at each indexed cell; unfittable cells are dropped.

    ``window`` is a global ``b``, an ``N x N`` array or a ``{(i, j): b}`` map.
    """
    index = [tuple(ij) for ij in index]
    bvec = _windows_for(index, window)
    if len(index) == 0:
        return ObservationSet([], [], [], 0.0, 0.0, 0.0, grid.N, mode)
    centers = np.array([grid.center(i, j) for i, j in index])
    fit = batch_fit(order, centers, samples.z, bvec, kernel)
    h = fit.predict(samples.gamma)
    keep = fit.ok
    dropped = [(i, j, STATUS_NAMES[s]) for (i, j), s in zip(index, fit.status) if s != OK]
    rows = np.array([ij[0] for ij in index])[keep]
    cols = np.array([ij[1] for ij in index])[keep]
    return ObservationSet(rows, cols, h[keep], 0.0, 0.0, bvec[keep], grid.N, mode, dropped)
