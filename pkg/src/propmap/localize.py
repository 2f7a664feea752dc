"""Single-source localization from a reconstructed map or raw readings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError, ZeroMatrixError, ZeroWeightSumError
from .fieldsim import GridSpec, SensorSamples


@dataclass
class LocationEstimate:
    s: np.ndarray
    method: str

    def error(self, truth) -> float:
        return float(np.linalg.norm(self.s - np.asarray(truth, dtype=float)))


def _orient(vec):
    """Flip ``vec`` so its largest-magnitude entry is positive."""
    k = int(np.argmax(np.abs(vec)))
    return vec if vec[k] >= 0 else -vec


def localize_svd(H, grid: GridSpec) -> LocationEstimate:
    """Peak of the dominant left/right singular vectors mapped to a cell center.

    Rows follow y and columns follow x, so the row peak of ``u`` gives the
    y coordinate and the column peak of ``v`` the x coordinate.
    """
    H = np.asarray(H, dtype=float)
    if not np.any(H):
        raise ZeroMatrixError("cannot localize on an all-zero map")
    U, _, Vt = np.linalg.svd(H)
    u = _orient(U[:, 0])
    v = _orient(Vt[0])
    i, j = int(np.argmax(u)), int(np.argmax(v))
    return LocationEstimate(grid.center(i, j), "svd-peak")


def localize_wcl(samples: SensorSamples) -> LocationEstimate:
    """Weighted centroid of sensor locations with the readings as weights."""
    w = samples.gamma
    total = w.sum()
    if total == 0:
        raise ZeroWeightSumError("measurements sum to zero")
    return LocationEstimate((w[:, None] * samples.z).sum(axis=0) / total, "wcl")


def localize_naive(samples: SensorSamples) -> LocationEstimate:
    """Location of the strongest reading (lowest index wins ties)."""
    if len(samples) == 0:
        raise ValidationError("no samples to localize from")
    m = int(np.argmax(samples.gamma))
    return LocationEstimate(samples.z[m].copy(), "naive")
