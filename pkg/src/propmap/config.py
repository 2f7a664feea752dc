"""Experiment configuration: nested sections loaded from JSON.

Every key is optional; omitted keys take the defaults below.  Unknown keys
are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ValidationError
from .localinterp import KERNELS


@dataclass
class ShadowingConfig:
    variance: float = 1.0
    corr_distance: float = 200.0
    mode: str = "multiplicative"
    scale: str = "dB"


@dataclass
class FieldConfig:
    sources: int = 1
    power_rate: float = 1.0
    # explicit [[x, y, P], ...]; overrides the random draw when given
    locations: list | None = None
    absorption: float = 0.8
    spreading: float = 1.5
    unit: float = 1000.0
    # None picks 1000 m for one source and 400 m otherwise
    elevation: float | None = None
    shadowing: ShadowingConfig | None = field(default_factory=ShadowingConfig)

    def depth(self) -> float:
        if self.elevation is not None:
            return self.elevation
        n = len(self.locations) if self.locations is not None else self.sources
        return 1000.0 if n == 1 else 400.0


@dataclass
class GridConfig:
    N: int = 30
    L: float = 2000.0


@dataclass
class SensorConfig:
    M: int | list = 200
    sigma: float = 0.02


@dataclass
class SamplingConfig:
    C_uniform: float = 1.6
    C_adaptive: float = 2.5
    # None picks 7 for order 1 and 4 for order 0
    M0: int | None = None
    omega: float | None = None

    def m0(self, order) -> int:
        if self.M0 is not None:
            return self.M0
        return 7 if order >= 1 else 4


@dataclass
class InterpConfig:
    order: int = 1
    kernel: str = "epanechnikov"


@dataclass
class WindowConfig:
    # b_min defaults to one grid spacing, b_max to 0.35 L
    b_min: float | None = None
    b_max: float | None = None
    points: int = 40
    fixed_b: float | None = None
    guard_limit: int = 20


@dataclass
class SolverConfig:
    penalty: float = 1.0
    max_iter: int = 500
    tol: float = 1e-5
    rank: int = 1
    max_sweeps: int = 200
    sweep_tol: float = 1e-10
    weight_cap: float = 1e6
    # None means 2 / M
    epsilon: float | None = None
    delta: float = 0.05


@dataclass
class ExperimentConfig:
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    grid: GridConfig = dataclasses.field(default_factory=GridConfig)
    sensors: SensorConfig = dataclasses.field(default_factory=SensorConfig)
    sampling: SamplingConfig = dataclasses.field(default_factory=SamplingConfig)
    interp: InterpConfig = dataclasses.field(default_factory=InterpConfig)
    window: WindowConfig = dataclasses.field(default_factory=WindowConfig)
    solver: SolverConfig = dataclasses.field(default_factory=SolverConfig)
    method: str = "nnm-t"
    methods: list = dataclasses.field(default_factory=lambda: ["nnm-t", "nnm", "wals", "als"])
    trials: int = 100
    seed: int = 0
    out: str = "out"

    def __post_init__(self):
        self.validate()

    @property
    def M_list(self) -> list:
        M = self.sensors.M
        return list(M) if isinstance(M, (list, tuple)) else [M]

    def b_range(self):
        g, w = self.grid, self.window
        lo = g.L / g.N if w.b_min is None else w.b_min
        hi = 0.35 * g.L if w.b_max is None else w.b_max
        return lo, hi

    def validate(self):
        from .pipeline import METHODS

        g = self.grid
        if int(g.N) != g.N or g.N < 1 or not g.L > 0:
            raise ValidationError("grid needs integer N >= 1 and L > 0")
        if any(int(m) != m or m < 1 for m in self.M_list):
            raise ValidationError("sensor counts must be positive integers")
        if not self.sensors.sigma >= 0:
            raise ValidationError("sigma must be non-negative")
        if self.interp.order not in (0, 1):
            raise ValidationError("interpolation order must be 0 or 1")
        if self.interp.kernel not in KERNELS:
            raise ValidationError(f"kernel must be one of {KERNELS}")
        lo, hi = self.b_range()
        if not 0 < lo <= hi:
            raise ValidationError("need 0 < b_min <= b_max")
        if self.window.points < 2:
            raise ValidationError("window search needs at least two points")
        if self.window.fixed_b is not None and not self.window.fixed_b > 0:
            raise ValidationError("fixed_b must be positive")
        if not 0 < self.solver.delta < 1:
            raise ValidationError("delta must lie in (0, 1)")
        if self.trials < 1:
            raise ValidationError("trials must be at least 1")
        for m in [self.method, *self.methods]:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}; choose from {sorted(METHODS)}")
        f = self.field
        if f.locations is None and f.sources < 0:
            raise ValidationError("source count must be non-negative")
        if f.locations is not None:
            for loc in f.locations:
                if len(loc) != 3:
                    raise ValidationError("each explicit source needs [x, y, power]")
        if f.shadowing is not None:
            s = f.shadowing
            if not s.variance >= 0 or not s.corr_distance > 0:
                raise ValidationError("shadowing needs variance >= 0 and corr_distance > 0")
            if s.mode not in ("additive", "multiplicative") or s.scale not in ("log10", "dB"):
                raise ValidationError("shadowing mode/scale not recognized")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with top-level keys or ``section={key: value}`` overrides merged in."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return from_dict(d)


_SECTIONS = {
    "field": FieldConfig,
    "grid": GridConfig,
    "sensors": SensorConfig,
    "sampling": SamplingConfig,
    "interp": InterpConfig,
    "window": WindowConfig,
    "solver": SolverConfig,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValidationError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return cls(**data)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ValidationError("configuration must be a JSON object")
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name not in data:
            continue
        sec = data.pop(name)
        if not isinstance(sec, dict):
            raise ValidationError(f"{name} must be an object")
        sec = dict(sec)
        if cls is FieldConfig and "shadowing" in sec and sec["shadowing"] is not None:
            sec["shadowing"] = _build(ShadowingConfig, sec["shadowing"], "field.shadowing")
        kwargs[name] = _build(cls, sec, name)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(data) - top
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs.update(data)
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
