"""Bias and variance of the local interpolation error.

Finite-sample moments are written in terms of the equivalent-kernel row
``h`` of the intercept (``H_hat = h @ gamma``).  For the zeroth-order fit
``h`` is the normalized kernel weight vector; for the first-order fit it is
the first row of ``(D W D^T)^-1 D W``.  The bias is then ``h`` applied to the
next Taylor term and the variance is ``sigma^2 * ||h||^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtri

from .errors import SingularFitError, UnderdeterminedError, ValidationError, ZeroWeightSumError
from .fieldsim import GridSpec, SensorSamples
from .localinterp import (
    OK,
    SINGULAR,
    STATUS_NAMES,
    UNDERDETERMINED,
    ObservationSet,
    as_kernel,
    batch_fit,
    fit_neighborhood,
    hessians_from_coef,
    neighborhood,
)


@dataclass
class ErrorMoments:
    mu: float
    nu2: float
    order: int
    cell: tuple | None = None

    @property
    def nu(self) -> float:
        return math.sqrt(self.nu2)


@dataclass
class AsymptoticPrediction:
    bias: float
    variance: float
    C0: float
    C1: float
    density: float
    theta2: float
    theta1: float | None = None


@dataclass
class TrustInterval:
    lower: float
    upper: float
    confidence: float

    def __contains__(self, x):
        return self.lower <= x <= self.upper

    @property
    def width(self):
        return self.upper - self.lower


def _raise_for(status, what):
    if status == UNDERDETERMINED:
        raise UnderdeterminedError(f"{what}: too few weighted samples")
    if status == SINGULAR:
        raise SingularFitError(f"{what}: normal matrix is singular")


def moments_zeroth(c, samples: SensorSamples, b, kernel, sigma, beta) -> ErrorMoments:
    """Zeroth-order moments with gradient ``beta`` (true or estimated)."""
    kern = as_kernel(kernel)
    c = np.asarray(c, dtype=float)
    w = kern((samples.z - c) / b)
    total = w.sum()
    if not total > 0:
        raise ZeroWeightSumError("no sample inside the window")
    wbar = w / total
    mu = float(np.sum(wbar * ((samples.z - c) @ np.asarray(beta, dtype=float))))
    return ErrorMoments(mu, float(sigma ** 2 * np.sum(wbar ** 2)), 0)


def moments_first(c, samples: SensorSamples, b, kernel, sigma, hessian) -> ErrorMoments:
    """First-order moments with Hessian ``hessian`` (true or estimated)."""
    c = np.asarray(c, dtype=float)
    fit = batch_fit(1, c[None], samples.z, b, kernel)
    _raise_for(fit.status[0], "first-order fit")
    h = fit.hat[0]
    D = samples.z - c
    q = np.einsum("mi,ij,mj->m", D, np.asarray(hessian, dtype=float), D)
    return ErrorMoments(float(0.5 * h @ q), float(sigma ** 2 * h @ h), 1)


@dataclass
class CellMoments:
    """Vectorized interpolation output and moments at many centers."""

    H_hat: np.ndarray
    mu: np.ndarray
    nu2: np.ndarray
    status: np.ndarray
    fit: object

    @property
    def ok(self):
        return self.status == OK

    @property
    def nu(self):
        return np.sqrt(self.nu2)


def estimate_moments(order, centers, samples: SensorSamples, b, kernel, sigma) -> CellMoments:
    """Interpolate at ``centers`` and plug in derivatives from an order+1 fit.

    A center is usable only when both the order-``r`` and the order-``r+1``
    fits are well posed; otherwise its status carries the first failure.
    """
    if order not in (0, 1):
        raise ValidationError("error moments are available for orders 0 and 1")
    nb = neighborhood(centers, samples.z, b)
    fit = fit_neighborhood(order, nb, kernel)
    deriv = fit_neighborhood(order + 1, nb, kernel, gamma=samples.gamma)
    status = np.where(fit.status != OK, fit.status, deriv.status)
    h = fit.hat_k
    D = nb.offsets
    if order == 0:
        t = np.einsum("cmi,ci->cm", D, deriv.coef[:, 1:3])
        mu = np.sum(h * t, axis=1)
    else:
        q = np.einsum("cmi,cij,cmj->cm", D, hessians_from_coef(deriv.coef), D)
        mu = 0.5 * np.sum(h * q, axis=1)
    nu2 = sigma ** 2 * np.sum(h * h, axis=1)
    bad = status != OK
    mu[bad] = 0.0
    nu2[bad] = 0.0
    return CellMoments(fit.predict(samples.gamma), mu, nu2, status, fit)


def fill_moments(obs: ObservationSet, grid: GridSpec, samples: SensorSamples, order, kernel,
                 sigma) -> ObservationSet:
    """Fill ``mu`` and ``nu``; entries whose plug-in fit fails are dropped."""
    if len(obs) == 0:
        return obs
    centers = grid.flat_centers.reshape(grid.N, grid.N, 2)[obs.rows, obs.cols]
    cm = estimate_moments(order, centers, samples, obs.b, kernel, sigma)
    out = obs.subset(cm.ok)
    out.mu = cm.mu[cm.ok]
    out.nu = cm.nu[cm.ok]
    out.dropped += [(int(i), int(j), "derivative fit " + STATUS_NAMES[s])
                    for i, j, s in zip(obs.rows, obs.cols, cm.status) if s != OK]
    return out


def kernel_constants(kernel, tol=1e-10):
    """``C0 = int u_x^2 K(u) du`` and ``C1 = int K(u)^2 du`` over the unit disk."""
    kern = as_kernel(kernel)
    lo = lambda x: -math.sqrt(max(0.0, 1.0 - x * x))
    hi = lambda x: math.sqrt(max(0.0, 1.0 - x * x))
    k = lambda y, x: kern.from_r2(x * x + y * y)
    C0, e0 = integrate.dblquad(lambda y, x: x * x * k(y, x), -1, 1, lo, hi, epsabs=tol, epsrel=tol)
    C1, e1 = integrate.dblquad(lambda y, x: k(y, x) ** 2, -1, 1, lo, hi, epsabs=tol, epsrel=tol)
    if max(e0, e1) > 1e-8:
        raise ArithmeticError(f"kernel constant quadrature did not converge (err {max(e0, e1):.2g})")
    return C0, C1


def asymptotic_error(order, c, f, grad_f, grad_rho, hess_rho, b, M, sigma, kernel):
    """Large-``M`` bias and variance of the interpolation error at ``c``.

    ``f`` is the sensor density at ``c`` (per unit area), ``grad_f`` its
    gradient; ``grad_rho`` and ``hess_rho`` are derivatives of the field.
    """
    if not f > 0:
        raise ValidationError("sensor density at the target must be positive")
    if not b > 0 or M < 1:
        raise ValidationError("need b > 0 and M >= 1")
    C0, C1 = kernel_constants(kernel)
    hess = np.asarray(hess_rho, dtype=float)
    theta2 = float(hess[0, 0] + hess[1, 1])
    variance = C1 * sigma ** 2 / (M * b * b * f)
    if order == 0:
        theta1 = float(np.dot(grad_f, grad_rho))
        bias = b * b * C0 * (theta1 / f + 0.5 * theta2)
        return AsymptoticPrediction(bias, variance, C0, C1, f, theta2, theta1)
    if order == 1:
        return AsymptoticPrediction(0.5 * b * b * C0 * theta2, variance, C0, C1, f, theta2)
    raise ValidationError("asymptotic predictions exist for orders 0 and 1")


def norm_ppf(p):
    """Standard normal quantile (Cephes ``ndtri``; abs error well below 1e-12)."""
    return ndtri(p)


def trust_interval(mu, nu, delta) -> TrustInterval:
    """``(mu - q nu, mu + q nu)`` with ``q`` the ``1 - delta/2`` normal quantile."""
    if not 0 < delta < 1:
        raise ValidationError(f"delta must lie in (0, 1), got {delta!r}")
    if not nu >= 0:
        raise ValidationError("nu must be non-negative")
    q = float(norm_ppf(1 - delta / 2))
    return TrustInterval(mu - q * nu, mu + q * nu, 1 - delta)
