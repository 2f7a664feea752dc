"""End-to-end reconstruction: scene, interpolation stage, completion, metrics.

A *method* pairs an interpolation preset with a solver:

``uniform``
    ``ceil(C N log^2 N)`` random cells, one global window chosen by the
    analytical objective, each cell's window floored at the radius holding
    its ``M0`` nearest sensors.
``sensor``
    sensor-aware cells at one global optimized window, widened by the
    identifiability guard.
``adaptive``
    sensor-aware cells at the optimized window, identifiability guard, then
    a per-cell window for every observed cell.
``dense``
    every cell interpolated at the analytically optimized global window,
    floored per cell as in ``uniform``; no completion.
``dense-adaptive``
    every cell interpolated with its own per-cell window; no completion.

Seeds are derived with :class:`numpy.random.SeedSequence` from integer
tuples, so adding trials, sensor counts or methods to a sweep never
changes the numbers of existing ones.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .completion import CompletionProblem, CompletionResult, SolverParams, solve
from .config import ExperimentConfig
from .errors import PropmapError, ValidationError
from .errstats import fill_moments
from .fieldsim import (
    LOWRANK_MODELS,
    FieldSpec,
    GridSpec,
    GroundTruth,
    SensorSamples,
    Shadowing,
    Source,
    deploy_sensors,
    make_grid,
    measure,
    normalize_model,
    path_gain,
    random_sources,
    realize_field,
    underwater_model,
)
from .localinterp import ObservationSet, build_observation_index, interpolate_entries
from .localize import localize_naive, localize_svd, localize_wcl
from .completion import singular_energy
from .windowopt import (
    WindowChoice,
    WindowSearchSpec,
    identifiability_guard,
    nearest_floor,
    optimize_window,
    per_cell_windows,
)

log = logging.getLogger(__name__)

METHODS = {
    "nnm-t": ("uniform", "nnm-t"),
    "nnm": ("uniform", "nnm"),
    "wals": ("uniform", "wals"),
    "als": ("uniform", "als"),
    "nnm-t-sensor": ("sensor", "nnm-t"),
    "nnm-t-adaptive": ("adaptive", "nnm-t"),
    "wals-adaptive": ("adaptive", "wals"),
    "interp": ("dense", None),
    "interp-adaptive": ("dense-adaptive", None),
}


class StageError(PropmapError):
    """A module error annotated with the pipeline stage that raised it."""

    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.cause = exc


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from non-negative integers."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def method_code(method) -> int:
    return zlib.crc32(method.encode("utf-8"))


def scene_seed(master, M, trial) -> int:
    return derive_seed(master, M, trial)


def solver_seed(master, M, method, trial) -> int:
    return derive_seed(master, M, method_code(method), trial)


def mse(H_bar, H) -> float:
    """``||H_bar - H||_F^2 / N^2``."""
    A = np.asarray(H_bar, dtype=float)
    B = np.asarray(H, dtype=float)
    if A.shape != B.shape:
        raise ValidationError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.mean((A - B) ** 2))


@dataclass
class Scene:
    field: FieldSpec
    grid: GridSpec
    truth: GroundTruth
    samples: SensorSamples
    jitter: float
    omega_seed: int


def field_spec(cfg: ExperimentConfig, seed) -> FieldSpec:
    f = cfg.field
    if f.locations is not None:
        sources = tuple(Source((float(x), float(y)), float(p)) for x, y, p in f.locations)
    else:
        sources = random_sources(f.sources, cfg.grid.L, seed, rate=f.power_rate)
    sh = None
    if f.shadowing is not None:
        s = f.shadowing
        sh = Shadowing(s.variance, s.corr_distance, s.mode, s.scale)
    model = underwater_model(f.absorption, f.spreading, f.unit)
    return FieldSpec(sources, model, f.depth(), cfg.grid.L, sh)


def make_scene(cfg: ExperimentConfig, M, seed) -> Scene:
    """Sources, shadowing, sensors and readings for one trial."""
    src, sens, shade, noise, omega = np.random.SeedSequence(int(seed)).spawn(5)
    spec = field_spec(cfg, np.random.default_rng(src))
    grid = make_grid(cfg.grid.N, cfg.grid.L)
    z = deploy_sensors(M, "uniform", cfg.grid.L, np.random.default_rng(sens))
    real = realize_field(spec, grid, np.random.default_rng(shade), z)
    samples = measure(real, z, cfg.sensors.sigma, np.random.default_rng(noise))
    return Scene(spec, grid, real.truth, samples, real.jitter,
                 int(omega.generate_state(1, np.uint64)[0] >> np.uint64(1)))


@dataclass
class Interpolation:
    obs: ObservationSet
    window: WindowChoice
    preset: str
    guard: object = None


def _search(cfg: ExperimentConfig, C) -> WindowSearchSpec:
    lo, hi = cfg.b_range()
    return WindowSearchSpec(lo, hi, cfg.window.points, cfg.sampling.m0(cfg.interp.order),
                            cfg.sampling.omega, C)


def interpolation_stage(cfg: ExperimentConfig, scene: Scene, preset) -> Interpolation:
    """Observation set with ``H_hat``, ``mu`` and ``nu`` for one preset."""
    grid, samples = scene.grid, scene.samples
    order, kernel, sigma = cfg.interp.order, cfg.interp.kernel, cfg.sensors.sigma
    M0 = cfg.sampling.m0(order)
    if preset in ("uniform", "dense"):
        spec = _search(cfg, cfg.sampling.C_uniform)
        if preset == "uniform":
            index = build_observation_index(grid, samples, "uniform", C=cfg.sampling.C_uniform,
                                            seed=scene.omega_seed)
        else:
            index = [(i, j) for i in range(grid.N) for j in range(grid.N)]
        floors = nearest_floor(grid, samples.z, M0)
        if cfg.window.fixed_b is not None:
            choice = WindowChoice(float(cfg.window.fixed_b))
        else:
            choice = optimize_window(spec, grid, samples, order, kernel, sigma, index, floors,
                                     min_size=0)
        window = np.maximum(choice.b, floors)
        guard = None
    elif preset in ("sensor", "adaptive"):
        spec = _search(cfg, cfg.sampling.C_adaptive)
        if cfg.window.fixed_b is not None:
            choice = WindowChoice(float(cfg.window.fixed_b))
        else:
            choice = optimize_window(spec, grid, samples, order, kernel, sigma)
        b, index, guard = identifiability_guard(grid, samples, choice.b, M0, cfg.window.guard_limit)
        window = b
        if preset == "adaptive":
            floors = nearest_floor(grid, samples.z, M0)
            window = per_cell_windows(spec, grid, index, samples, order, kernel, sigma, floors).b
        choice = WindowChoice(window, choice.trace, guard.escalations)
    elif preset == "dense-adaptive":
        spec = _search(cfg, cfg.sampling.C_adaptive)
        index = [(i, j) for i in range(grid.N) for j in range(grid.N)]
        floors = nearest_floor(grid, samples.z, M0)
        choice = per_cell_windows(spec, grid, index, samples, order, kernel, sigma, floors)
        window = choice.b
        guard = None
    else:
        raise ValidationError(f"unknown interpolation preset {preset!r}")
    mode = "sensor-aware" if preset in ("sensor", "adaptive") else "uniform"
    obs = interpolate_entries(grid, index, samples, window, order, kernel, mode)
    obs = fill_moments(obs, grid, samples, order, kernel, sigma)
    return Interpolation(obs, choice, preset, guard)


def completion_stage(cfg: ExperimentConfig, interp: Interpolation, solver, M, seed) -> CompletionResult:
    s = cfg.solver
    params = SolverParams(s.penalty, s.max_iter, s.tol, s.rank, s.max_sweeps, s.sweep_tol, int(seed),
                          s.weight_cap)
    eps = 2.0 / M if s.epsilon is None else s.epsilon
    problem = CompletionProblem(interp.obs.N, interp.obs, solver, params, s.delta, eps)
    return solve(problem)


def dense_map(interp: Interpolation) -> np.ndarray:
    """The interpolated map itself; cells that could not be fitted take the mean."""
    H = interp.obs.matrix()
    H[np.isnan(H)] = float(np.mean(interp.obs.H_hat)) if len(interp.obs) else 0.0
    return H


@dataclass
class PipelineResult:
    H: np.ndarray
    observations: ObservationSet
    window: WindowChoice
    completion: CompletionResult | None
    scene: Scene
    method: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def mse(self) -> float:
        return mse(self.H, self.scene.truth.H)


def run_method(cfg, scene, method, M, seed_solver, cache=None) -> PipelineResult:
    preset, solver = METHODS[method]
    t0 = time.perf_counter()
    if cache is not None and preset in cache:
        interp = cache[preset]
    else:
        try:
            interp = interpolation_stage(cfg, scene, preset)
        except PropmapError as exc:
            raise StageError("interpolation", exc) from exc
        if cache is not None:
            cache[preset] = interp
    t1 = time.perf_counter()
    comp = None
    if solver is None:
        H = dense_map(interp)
    else:
        try:
            comp = completion_stage(cfg, interp, solver, M, seed_solver)
        except PropmapError as exc:
            raise StageError("completion", exc) from exc
        H = comp.H
    t2 = time.perf_counter()
    w = interp.window.b
    diag = {
        "b": float(w) if np.ndim(w) == 0 and not isinstance(w, dict) else float(np.median(list(w.values()))),
        "omega_size": len(interp.obs),
        "dropped": len(interp.obs.dropped),
        "escalations": interp.window.escalations,
        "iterations": comp.iterations if comp else 0,
        "converged": comp.converged if comp else True,
        "violation": comp.violation if comp else 0.0,
        "shadow_jitter": scene.jitter,
        "interp_seconds": t1 - t0,
        "solve_seconds": t2 - t1,
    }
    return PipelineResult(H, interp.obs, interp.window, comp, scene, method, diag)


def reconstruct_pipeline(cfg: ExperimentConfig, seed, method=None, M=None) -> PipelineResult:
    """One run of the full reconstruction for the trial seed ``seed``."""
    method = cfg.method if method is None else method
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}")
    M = cfg.M_list[0] if M is None else M
    scene = make_scene(cfg, M, seed)
    return run_method(cfg, scene, method, M, derive_seed(seed, method_code(method)))


@dataclass
class ExperimentReport:
    records: list
    summary: list

    def table(self, metric="mse"):
        """``{(M, method): mean}`` of ``metric`` over successful trials."""
        return {(s["M"], s["method"]): s[metric + "_mean"] for s in self.summary}


def summarize(records, metrics=("mse",)) -> list:
    groups = {}
    for r in records:
        groups.setdefault((r["M"], r["method"]), []).append(r)
    out = []
    for (M, method), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        ok = [r for r in rs if r["status"] == "ok"]
        row = {"M": M, "method": method, "trials": len(rs), "failed": len(rs) - len(ok)}
        for m in metrics:
            v = np.array([r[m] for r in ok], dtype=float)
            row[m + "_mean"] = float(v.mean()) if len(v) else math.nan
            row[m + "_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append(row)
    return out


def run_sweep(cfg: ExperimentConfig, methods=None, M_list=None, trials=None, progress=None) -> ExperimentReport:
    """Every (M, method, trial) combination; methods within a trial share the scene.

    Methods that share an interpolation preset also share its observation
    set, so solver comparisons are made on identical inputs.  Failing trials
    are recorded with ``status`` set to the error message.
    """
    methods = list(cfg.methods if methods is None else methods)
    M_list = list(cfg.M_list if M_list is None else M_list)
    trials = cfg.trials if trials is None else trials
    records = []
    for M in M_list:
        for t in range(trials):
            seed = scene_seed(cfg.seed, M, t)
            try:
                scene = make_scene(cfg, M, seed)
            except PropmapError as exc:
                for method in methods:
                    records.append(_failed(M, method, t, seed, f"scene: {exc}"))
                continue
            cache = {}
            for method in methods:
                try:
                    res = run_method(cfg, scene, method, M, solver_seed(cfg.seed, M, method, t), cache)
                except StageError as exc:
                    records.append(_failed(M, method, t, seed, str(exc)))
                    continue
                rec = {"M": M, "method": method, "trial": t, "seed": seed, "status": "ok",
                       "mse": res.mse}
                rec.update(res.diagnostics)
                records.append(rec)
            if progress:
                progress(M, t)
    return ExperimentReport(records, summarize(records))


def _failed(M, method, trial, seed, msg):
    return {"M": M, "method": method, "trial": trial, "seed": seed, "status": msg, "mse": math.nan}


def run_localization(cfg: ExperimentConfig, M=None, trials=None, method=None, progress=None) -> ExperimentReport:
    """Single-source localization: svd peak on the reconstruction versus WCL and naive."""
    M = cfg.M_list[0] if M is None else M
    trials = cfg.trials if trials is None else trials
    method = cfg.method if method is None else method
    records = []
    for t in range(trials):
        seed = scene_seed(cfg.seed, M, t)
        scene = make_scene(cfg, M, seed)
        if len(scene.field.sources) != 1:
            raise ValidationError("localization needs exactly one source")
        truth = np.asarray(scene.field.sources[0].location)
        estimates = [localize_wcl(scene.samples), localize_naive(scene.samples)]
        try:
            res = run_method(cfg, scene, method, M, solver_seed(cfg.seed, M, method, t))
            estimates.insert(0, localize_svd(res.H, scene.grid))
        except PropmapError as exc:
            records.append({"M": M, "method": "svd-peak", "trial": t, "seed": seed,
                            "status": str(exc), "error": math.nan, "x": math.nan, "y": math.nan})
        for est in estimates:
            records.append({"M": M, "method": est.method, "trial": t, "seed": seed, "status": "ok",
                            "x": float(est.s[0]), "y": float(est.s[1]), "error": est.error(truth)})
        if progress:
            progress(M, t)
    summary = summarize(records, ("error",))
    for row in summary:
        errs = np.array([r["error"] for r in records
                         if r["method"] == row["method"] and r["status"] == "ok"])
        row["rmse"] = float(np.sqrt(np.mean(errs ** 2))) if len(errs) else math.nan
    return ExperimentReport(records, summary)


def spectrum_map(model_key, N=100, S=1, seed=0, L=1.0, locations=None) -> np.ndarray:
    """Noise-free map of one of the rank-study models on an ``N x N`` grid.

    Each source's gain map is normalized to unit total energy before being
    weighted by its Exp(1) power.
    """
    if model_key not in LOWRANK_MODELS:
        raise ValidationError(f"unknown model {model_key!r}; choose from {sorted(LOWRANK_MODELS)}")
    model, h = LOWRANK_MODELS[model_key]
    grid = make_grid(N, L)
    rng = np.random.default_rng(seed)
    if locations is None:
        locations = rng.uniform(0.0, L, size=(S, 2))
        powers = rng.exponential(1.0, size=S) if S > 1 else np.ones(S)
    else:
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        powers = np.ones(len(locations))
    H = np.zeros(N * N)
    for loc, P in zip(locations, powers):
        m = normalize_model(model, grid, loc, h)
        d = np.sqrt(np.sum((grid.flat_centers - loc) ** 2, axis=1) + h * h) / m.unit
        H += path_gain(m, P, d)
    return H.reshape(N, N)


def spectrum_study(N=100, S=1, K=5, seeds=(0,), models=None) -> dict:
    """Top-``K`` singular-value fraction per model, one value per seed."""
    models = sorted(LOWRANK_MODELS) if models is None else models
    return {m: [singular_energy(spectrum_map(m, N, S, s), K) for s in seeds] for m in models}
