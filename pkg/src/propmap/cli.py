"""Command-line entry point: ``propmap <command> [options]``.

Exit codes: 0 on success, 1 for invalid input (configuration, flags or
data files) and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import io
from .config import ExperimentConfig, dump_config, from_dict, load_config
from .errors import ParseError, PropmapError, ValidationError
from .fieldsim import LOWRANK_MODELS, GroundTruth, make_grid
from .pipeline import (
    METHODS,
    Interpolation,
    Scene,
    run_method,
    completion_stage,
    derive_seed,
    make_scene,
    method_code,
    reconstruct_pipeline,
    run_localization,
    run_sweep,
    scene_seed,
    spectrum_study,
)
from .windowopt import WindowChoice

log = logging.getLogger("propmap")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--method", choices=sorted(METHODS), help="reconstruction method")
    common.add_argument("--trials", type=int, help="trials per configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="propmap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write ground truth and measurements")
    r = sub.add_parser("reconstruct", parents=[common], help="one reconstruction run")
    r.add_argument("--measurements", help="x,y,gamma CSV to reconstruct from instead of a simulated scene")
    r.add_argument("--observations", help="i,j,H_hat,mu,nu,b CSV to complete directly")
    sub.add_parser("sweep", parents=[common], help="methods x sensor counts x trials")
    sub.add_parser("localize", parents=[common], help="single-source localization study")
    s = sub.add_parser("spectrum", parents=[common], help="singular-value energy of the rank-study models")
    s.add_argument("--N", type=int, default=100)
    s.add_argument("--sources", type=int, default=1)
    s.add_argument("--K", type=int, default=5)
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    over = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.method is not None:
        over["method"] = args.method
    if args.trials is not None:
        over["trials"] = args.trials
    return cfg.replace(**over) if over else cfg


def _outdir(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=float)
        fh.write("\n")


def _write_records(path, records):
    keys = sorted({k for r in records for k in r}, key=lambda k: (k not in ("M", "method", "trial"), k))
    io.write_rows(path, keys, [[r.get(k, "") for k in keys] for r in records])


def cmd_simulate(cfg, args):
    out = _outdir(cfg)
    M = cfg.M_list[0]
    scene = make_scene(cfg, M, scene_seed(cfg.seed, M, 0))
    io.write_matrix(os.path.join(out, "ground_truth.csv"), scene.truth.H, scene.grid)
    io.write_matrix(os.path.join(out, "shadowing.csv"), scene.truth.zeta, scene.grid)
    io.write_samples(os.path.join(out, "measurements.csv"), scene.samples)
    _write_json(os.path.join(out, "sources.json"),
                [{"x": s.location[0], "y": s.location[1], "power": s.power} for s in scene.field.sources])
    print(f"wrote ground truth ({cfg.grid.N}x{cfg.grid.N}) and {M} measurements to {out}")


def cmd_reconstruct(cfg, args):
    out = _outdir(cfg)
    grid = make_grid(cfg.grid.N, cfg.grid.L)
    method = cfg.method
    if args.observations:
        obs = io.read_observations(args.observations, cfg.grid.N)
        solver = METHODS[method][1]
        if solver is None:
            raise ValidationError(f"method {method!r} has no completion stage")
        M = cfg.M_list[0]
        comp = completion_stage(cfg, Interpolation(obs, WindowChoice(float("nan")), "external"), solver, M,
                                derive_seed(cfg.seed, method_code(method)))
        io.write_matrix(os.path.join(out, "reconstruction.csv"), comp.H, grid)
        io.write_history(os.path.join(out, "solver.csv"), comp.history)
        print(f"completed {len(obs)} observations with {solver}: converged={comp.converged}")
        return
    if args.measurements:
        samples = io.ingest_measurements(args.measurements, cfg.grid.L)
        n = len(samples)
        nan = np.full((grid.N, grid.N), np.nan)
        scene = Scene(None, grid, GroundTruth(nan, nan), samples, 0.0,
                      derive_seed(cfg.seed, 1))
        res = run_method(cfg, scene, method, n, derive_seed(cfg.seed, method_code(method)))
        score = None
    else:
        M = cfg.M_list[0]
        res = reconstruct_pipeline(cfg, scene_seed(cfg.seed, M, 0), method, M)
        score = res.mse
    io.write_matrix(os.path.join(out, "reconstruction.csv"), res.H, grid)
    io.write_observations(os.path.join(out, "observations.csv"), res.observations)
    if res.window.trace:
        io.write_trace(os.path.join(out, "window_trace.csv"), res.window.trace)
    if res.completion is not None:
        io.write_history(os.path.join(out, "solver.csv"), res.completion.history)
    diag = dict(res.diagnostics, method=method, mse=score)
    _write_json(os.path.join(out, "diagnostics.json"), diag)
    msg = f"{method}: |Omega|={len(res.observations)}"
    if score is not None:
        msg += f", MSE={score:.6g}"
    print(msg)


def _progress(args):
    if not args.verbose:
        return None
    return lambda M, t: print(f"  M={M} trial {t}", file=sys.stderr)


def cmd_sweep(cfg, args):
    out = _outdir(cfg)
    methods = [cfg.method] if args.method else cfg.methods
    rep = run_sweep(cfg, methods=methods, progress=_progress(args))
    _write_records(os.path.join(out, "records.csv"), rep.records)
    _write_json(os.path.join(out, "summary.json"), rep.summary)
    dump_config(cfg, os.path.join(out, "config.json"))
    for s in rep.summary:
        print(f"M={s['M']:>4} {s['method']:<15} MSE {s['mse_mean']:.6g} +/- {s['mse_std']:.3g}"
              f" ({s['failed']} failed)")


def cmd_localize(cfg, args):
    out = _outdir(cfg)
    rep = run_localization(cfg, progress=_progress(args))
    io.write_locations(os.path.join(out, "locations.csv"),
                       [(r["method"], r["x"], r["y"], r["error"]) for r in rep.records])
    _write_json(os.path.join(out, "summary.json"), rep.summary)
    for s in rep.summary:
        print(f"{s['method']:<9} RMSE {s['rmse']:.4g} m over {s['trials'] - s['failed']} trials")


def cmd_spectrum(cfg, args):
    out = _outdir(cfg)
    seeds = range(cfg.trials if args.trials else 1)
    res = spectrum_study(args.N, args.sources, args.K, seeds=[cfg.seed + s for s in seeds])
    _write_json(os.path.join(out, "spectrum.json"),
                {"N": args.N, "S": args.sources, "K": args.K, "fractions": res})
    for m in sorted(LOWRANK_MODELS):
        v = np.array(res[m])
        print(f"model ({m}): top-{args.K} fraction {v.mean():.4f} (min {v.min():.4f})")


def cmd_config(cfg, args):
    json.dump(cfg.to_dict(), sys.stdout, indent=2)
    print()


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "localize": cmd_localize,
    "spectrum": cmd_spectrum,
    "config": cmd_config,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except (ValidationError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PropmapError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
