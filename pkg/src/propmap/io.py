"""CSV import and export for maps, observation sets, traces and readings."""

from __future__ import annotations

import csv
import math

import numpy as np

from .errors import OutOfAreaError, ParseError
from .fieldsim import GridSpec, SensorSamples
from .localinterp import ObservationSet

FLOAT = "%.17g"


def write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([FLOAT % v if isinstance(v, (float, np.floating)) else v for v in r])


def _read(path, header):
    """Rows of a CSV with exactly ``header``, as ``(line number, fields)``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text ({exc.reason})") from None
    if not lines:
        raise ParseError("empty file, header required", 1)
    got = [h.strip() for h in lines[0]]
    if got != list(header):
        raise ParseError(f"expected header {','.join(header)!r}, got {','.join(got)!r}", 1)
    out = []
    for k, fields in enumerate(lines[1:], start=2):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(fields)}", k)
        out.append((k, fields))
    return out


def _float(text, line, name):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"{name}={text!r} is not a number", line) from None
    if not math.isfinite(v):
        raise ParseError(f"{name} must be finite", line)
    return v


def _int(text, line, name):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{name}={text!r} is not an integer", line) from None


def write_matrix(path, H, grid: GridSpec):
    """``i,j,x,y,value`` in row-major order (row ``i`` follows ``y``)."""
    H = np.asarray(H, dtype=float)
    rows = []
    for i in range(grid.N):
        for j in range(grid.N):
            x, y = grid.center(i, j)
            rows.append((i, j, float(x), float(y), float(H[i, j])))
    write_rows(path, ("i", "j", "x", "y", "value"), rows)


def read_matrix(path, N) -> np.ndarray:
    H = np.full((N, N), np.nan)
    for line, f in _read(path, ("i", "j", "x", "y", "value")):
        i, j = _int(f[0], line, "i"), _int(f[1], line, "j")
        if not (0 <= i < N and 0 <= j < N):
            raise ParseError(f"cell ({i}, {j}) outside a {N}x{N} grid", line)
        H[i, j] = _float(f[4], line, "value")
    return H


OBS_HEADER = ("i", "j", "H_hat", "mu", "nu", "b")


def write_observations(path, obs: ObservationSet):
    write_rows(path, OBS_HEADER, [(int(i), int(j), float(h), float(m), float(n), float(b))
                                  for i, j, h, m, n, b in zip(obs.rows, obs.cols, obs.H_hat, obs.mu,
                                                              obs.nu, obs.b)])


def read_observations(path, N, mode="uniform") -> ObservationSet:
    """Load an observation set, e.g. one produced by an external interpolator."""
    cols = [[] for _ in OBS_HEADER]
    for line, f in _read(path, OBS_HEADER):
        cols[0].append(_int(f[0], line, "i"))
        cols[1].append(_int(f[1], line, "j"))
        for k in range(2, 6):
            cols[k].append(_float(f[k], line, OBS_HEADER[k]))
    return ObservationSet(*[np.array(c) for c in cols], N=N, mode=mode)


def write_trace(path, trace):
    """Window search trace as ``b,objective,omega_size``."""
    write_rows(path, ("b", "objective", "omega_size"), [(float(b), float(o), int(n)) for b, o, n in trace])


def write_history(path, history):
    """Solver diagnostics as ``iter,objective,feasibility``."""
    write_rows(path, ("iter", "objective", "feasibility"),
               [(int(k), float(o), float(v)) for k, o, v in history])


def write_locations(path, rows):
    """Localization results as ``method,x,y,error``; ``rows`` holds 4-tuples."""
    write_rows(path, ("method", "x", "y", "error"), [(m, float(x), float(y), float(e)) for m, x, y, e in rows])


def write_samples(path, samples: SensorSamples):
    write_rows(path, ("x", "y", "gamma"),
               [(float(x), float(y), float(g)) for (x, y), g in zip(samples.z, samples.gamma)])


def ingest_measurements(path, L) -> SensorSamples:
    """Read ``x,y,gamma`` readings and check every location lies in ``[0, L]^2``."""
    z, g = [], []
    for line, f in _read(path, ("x", "y", "gamma")):
        x, y = _float(f[0], line, "x"), _float(f[1], line, "y")
        gamma = _float(f[2], line, "gamma")
        if not (0 <= x <= L and 0 <= y <= L):
            raise OutOfAreaError(f"location ({x:g}, {y:g}) outside [0, {L:g}]^2: {','.join(f)}", line)
        z.append((x, y))
        g.append(gamma)
    return SensorSamples(np.array(z).reshape(-1, 2), np.array(g))
