"""Run configuration: a versioned JSON document validated into dataclasses.

Example::

    {
      "version": 1,
      "model": {"mu1": 0.01, "mu2": 0.10, "sigma1": 0.25, "sigma2": 0.25,
                "lambda1": 0.05, "lambda2": 0.05, "r": 0.08, "C": 20, "K": 5},
      "solver": {"n": 4000, "method": "policy-iteration"},
      "mc": {"n_paths": 200000, "seed": 7}
    }

A general grid problem may be given under ``"problem"`` instead of
``"model"``; its coefficient and payoff functions are affine,
``c[0] + c[1] * y``, one pair per regime.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import NonGenerator, ParseError, PreconditionViolated, ValidationError
from .model import ExtractionModel

COMMANDS = ("classify", "roots", "solve", "pde", "simulate", "verify", "plot-q")
VERSION = 1


@dataclass(frozen=True)
class SolverOptions:
    n: int = 4000
    method: str = "policy-iteration"
    tol: float = 1e-8
    max_iter: int | None = None
    omega: float = 1.5
    domain: tuple = (0.01, 200.0)


@dataclass(frozen=True)
class MCOptions:
    n_paths: int = 200_000
    horizon: float | None = None
    dt_obs: float = 1.0 / 365.0
    seed: int = 0
    p0: tuple = (0.5, 1.5, 5.0, 10.0, 50.0)
    start: tuple = (0, 1)
    thresholds: tuple | None = None
    antithetic: bool = True
    estimator: str | None = None


@dataclass(frozen=True)
class GridOptions:
    """Price grid for value-function tables."""

    p_min: float = 0.01
    p_max: float = 100.0
    n: int = 200


@dataclass(frozen=True)
class PlotOptions:
    z_min: float | None = None
    z_max: float | None = None
    n: int = 401


@dataclass(frozen=True)
class OutputOptions:
    path: str | None = None
    format: str | None = None


@dataclass(frozen=True)
class ProblemSpec:
    """Affine m-regime grid problem as read from the configuration."""

    generator: tuple
    r: float
    drift: tuple
    vol: tuple
    running: tuple
    stop: tuple
    domain: tuple
    grid: str = "uniform"
    left: dict = field(default_factory=lambda: {"kind": "value_at_zero"})
    right: dict = field(default_factory=lambda: {"kind": "extrapolate"})

    def build(self):
        from .vi import Boundary, StoppingProblem

        def affine(c):
            c0, c1 = float(c[0]), float(c[1])
            return lambda y: c0 + c1 * np.asarray(y, dtype=float)

        def bc(d):
            return Boundary(d["kind"], d.get("value"))

        return StoppingProblem(
            gen=np.array(self.generator, dtype=float), r=self.r,
            alpha=tuple(affine(c) for c in self.drift), beta=tuple(affine(c) for c in self.vol),
            f=tuple(affine(c) for c in self.running), g=tuple(affine(c) for c in self.stop),
            domain=tuple(self.domain), left=bc(self.left), right=bc(self.right), grid=self.grid)


@dataclass(frozen=True)
class RunConfig:
    command: str | None
    model: ExtractionModel | None
    problem: ProblemSpec | None
    solver: SolverOptions
    mc: MCOptions
    grid: GridOptions
    plot: PlotOptions
    output: OutputOptions
    version: int = VERSION

    def meta(self) -> dict:
        """Fully resolved settings, defaults included, for echoing with results."""
        out = {"version": self.version, "command": self.command}
        if self.model is not None:
            out["model"] = self.model.to_dict()
        if self.problem is not None:
            out["problem"] = asdict(self.problem)
        for name in ("solver", "mc", "grid", "plot", "output"):
            out[name] = asdict(getattr(self, name))
        return out


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} is not allowed")


def _load(text: str):
    if not text or not text.strip():
        raise ParseError("empty configuration document", 1, 1)
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    except ValueError as exc:
        raise ParseError(str(exc), 0, 0) from exc


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _number(v, path, *, positive=False, nonneg=False, integer=False, allow_none=False):
    if v is None and allow_none:
        return None
    if not _is_number(v):
        raise ValidationError(path, "must be a finite number")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise ValidationError(path, "must be an integer")
        v = int(v)
    if positive and not v > 0:
        raise ValidationError(path, "must be positive")
    if nonneg and not v >= 0:
        raise ValidationError(path, "must be non-negative")
    return v


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ValidationError(path or "<root>", "must be an object")
    for k in d:
        if k not in allowed:
            raise ValidationError(f"{path}.{k}" if path else k, "unknown key")


def _number_list(v, path, length=None, **kw):
    if not isinstance(v, list) or (length is not None and len(v) != length):
        raise ValidationError(path, f"must be a list of {length or 'one or more'} numbers")
    return tuple(_number(x, f"{path}[{i}]", **kw) for i, x in enumerate(v))


def _model(d) -> ExtractionModel:
    names = [f.name for f in fields(ExtractionModel)]
    _check_keys(d, names, "model")
    for k in names:
        if k not in d:
            raise ValidationError(f"model.{k}", "is required")
        _number(d[k], f"model.{k}")
    for k in ("sigma1", "sigma2", "lambda1", "lambda2", "r", "C"):
        if not d[k] > 0:
            raise ValidationError(f"model.{k}", "must be positive")
    try:
        return ExtractionModel(**{k: float(d[k]) for k in names})
    except PreconditionViolated as exc:
        raise ValidationError("model", str(exc)) from exc


def _problem(d) -> ProblemSpec:
    keys = [f.name for f in fields(ProblemSpec)]
    _check_keys(d, keys, "problem")
    for k in ("generator", "r", "drift", "vol", "running", "stop", "domain"):
        if k not in d:
            raise ValidationError(f"problem.{k}", "is required")
    gen = d["generator"]
    if not isinstance(gen, list) or not gen:
        raise ValidationError("problem.generator", "must be a square matrix")
    m = len(gen)
    rows = tuple(_number_list(row, f"problem.generator[{i}]", m) for i, row in enumerate(gen))
    from .regime import validate_generator

    try:
        validate_generator(np.array(rows))
    except NonGenerator as exc:
        raise ValidationError("problem.generator", str(exc)) from exc
    out = {"generator": rows, "r": _number(d["r"], "problem.r", positive=True)}
    for k in ("drift", "vol", "running", "stop"):
        v = d[k]
        if not isinstance(v, list) or len(v) != m:
            raise ValidationError(f"problem.{k}", f"needs {m} coefficient pairs")
        out[k] = tuple(_number_list(c, f"problem.{k}[{i}]", 2) for i, c in enumerate(v))
    dom = _number_list(d["domain"], "problem.domain", 2)
    if not dom[0] < dom[1]:
        raise ValidationError("problem.domain", "left end must be below right end")
    out["domain"] = dom
    grid = d.get("grid", "uniform")
    if grid not in ("uniform", "log"):
        raise ValidationError("problem.grid", "must be 'uniform' or 'log'")
    if grid == "log" and dom[0] <= 0:
        raise ValidationError("problem.domain", "log grid needs a positive left end")
    out["grid"] = grid
    for side in ("left", "right"):
        bc = d.get(side, {"kind": "value_at_zero" if side == "left" else "extrapolate"})
        _check_keys(bc, ("kind", "value"), f"problem.{side}")
        if bc.get("kind") not in ("dirichlet", "value_at_zero", "extrapolate"):
            raise ValidationError(f"problem.{side}.kind", "must be dirichlet, value_at_zero or extrapolate")
        if bc["kind"] == "dirichlet":
            if "value" not in bc:
                raise ValidationError(f"problem.{side}.value", "is required for dirichlet")
            bc = {"kind": "dirichlet", "value": list(_number_list(bc["value"], f"problem.{side}.value", m))}
        out[side] = dict(bc)
    for i, (c0, c1) in enumerate(out["vol"]):
        lo, hi = dom
        if not (c0 + c1 * lo > 0 and c0 + c1 * hi > 0):
            raise ValidationError(f"problem.vol[{i}]", "volatility must be positive on the domain")
    return ProblemSpec(**out)


def _options(cls, d, path, checks):
    names = [f.name for f in fields(cls)]
    _check_keys(d, names, path)
    vals = {}
    for k, v in d.items():
        vals[k] = checks[k](v, f"{path}.{k}")
    return cls(**vals)


def _choice(options):
    def check(v, path):
        if v not in options:
            raise ValidationError(path, f"must be one of {list(options)}")
        return v
    return check


def _bool(v, path):
    if not isinstance(v, bool):
        raise ValidationError(path, "must be true or false")
    return v


def _domain(v, path):
    lo, hi = _number_list(v, path, 2, positive=True)
    if not lo < hi:
        raise ValidationError(path, "left end must be below right end")
    return (lo, hi)


def _thresholds(v, path):
    if v is None:
        return None
    return _number_list(v, path, 2, nonneg=True)


def _starts(v, path):
    if not isinstance(v, list) or not v:
        raise ValidationError(path, "must be a non-empty list of regime indices")
    out = []
    for i, x in enumerate(v):
        x = _number(x, f"{path}[{i}]", integer=True, nonneg=True)
        if x > 1:
            raise ValidationError(f"{path}[{i}]", "regime index must be 0 or 1")
        out.append(x)
    return tuple(out)


_SOLVER = {
    "n": lambda v, p: _ge(_number(v, p, integer=True), 16, p),
    "method": _choice(("policy-iteration", "psor")),
    "tol": lambda v, p: _number(v, p, positive=True),
    "max_iter": lambda v, p: _number(v, p, positive=True, integer=True, allow_none=True),
    "omega": lambda v, p: _open(_number(v, p), 0.0, 2.0, p),
    "domain": _domain,
}
_MC = {
    "n_paths": lambda v, p: _ge(_number(v, p, integer=True), 2, p),
    "horizon": lambda v, p: _number(v, p, positive=True, allow_none=True),
    "dt_obs": lambda v, p: _number(v, p, positive=True),
    "seed": lambda v, p: _number(v, p, integer=True, nonneg=True),
    "p0": lambda v, p: _number_list(v if isinstance(v, list) else [v], p, positive=True),
    "start": lambda v, p: _starts(v if isinstance(v, list) else [v], p),
    "thresholds": _thresholds,
    "antithetic": _bool,
    "estimator": lambda v, p: None if v is None else _choice(("martingale", "direct", "conditional"))(v, p),
}
_GRID = {
    "p_min": lambda v, p: _number(v, p, positive=True),
    "p_max": lambda v, p: _number(v, p, positive=True),
    "n": lambda v, p: _ge(_number(v, p, integer=True), 2, p),
}
_PLOT = {
    "z_min": lambda v, p: _number(v, p, allow_none=True),
    "z_max": lambda v, p: _number(v, p, allow_none=True),
    "n": lambda v, p: _ge(_number(v, p, integer=True), 2, p),
}
_OUTPUT = {
    "path": lambda v, p: _string(v, p),
    "format": lambda v, p: None if v is None else _choice(("json", "csv"))(v, p),
}


def _ge(v, lo, path):
    if v < lo:
        raise ValidationError(path, f"must be at least {lo}")
    return v


def _open(v, lo, hi, path):
    if not lo < v < hi:
        raise ValidationError(path, f"must lie strictly between {lo} and {hi}")
    return v


def _string(v, path):
    if v is not None and not isinstance(v, str):
        raise ValidationError(path, "must be a string")
    return v


TOP_KEYS = ("version", "command", "model", "problem", "solver", "mc", "grid", "plot", "output")


def parse_config(text: str, command: str | None = None) -> RunConfig:
    """Parse and validate a JSON configuration.

    ``command`` (from the command line) overrides the document's ``command``.
    """
    d = _load(text)
    _check_keys(d, TOP_KEYS, "")
    version = d.get("version", VERSION)
    if version != VERSION:
        raise ValidationError("version", f"unsupported version {version!r}; expected {VERSION}")
    cmd = command if command is not None else d.get("command")
    if cmd is not None and cmd not in COMMANDS:
        raise ValidationError("command", f"must be one of {list(COMMANDS)}")
    if "model" in d and "problem" in d:
        raise ValidationError("problem", "give either model or problem, not both")
    model = _model(d["model"]) if "model" in d else None
    problem = _problem(d["problem"]) if "problem" in d else None
    if model is None and problem is None:
        raise ValidationError("model", "is required")
    if problem is not None and cmd not in (None, "pde"):
        raise ValidationError("problem", f"general problems are only supported by 'pde', not {cmd!r}")
    solver = _options(SolverOptions, d.get("solver", {}), "solver", _SOLVER)
    mc = _options(MCOptions, d.get("mc", {}), "mc", _MC)
    grid = _options(GridOptions, d.get("grid", {}), "grid", _GRID)
    if not grid.p_min < grid.p_max:
        raise ValidationError("grid.p_max", "must exceed grid.p_min")
    plot = _options(PlotOptions, d.get("plot", {}), "plot", _PLOT)
    if plot.z_min is not None and plot.z_max is not None and not plot.z_min < plot.z_max:
        raise ValidationError("plot.z_max", "must exceed plot.z_min")
    output = _options(OutputOptions, d.get("output", {}), "output", _OUTPUT)
    return RunConfig(cmd, model, problem, solver, mc, grid, plot, output, version)


def load_config(path: str, command: str | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError("--config", f"cannot read {path!r}: {exc.strerror}") from exc
    return parse_config(text, command)
