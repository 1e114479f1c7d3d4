"""Command-line front end.

Exit codes: 0 success, 1 solver error, 2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import extraction as ex
from . import mc
from .config import COMMANDS, load_config
from .errors import ConfigError, RegimeStopError
from .regime import x_roots
from .vi import extract_stopping_sets, extraction_problem, solve_vi

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3


class _Out:
    def __init__(self, args):
        self.path = args.out
        self.quiet = args.quiet

    def info(self, msg):
        if not self.quiet:
            print(msg, file=sys.stderr)

    def emit(self, text, path=None):
        path = path or self.path
        if path:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)

    def side_path(self, suffix):
        if not self.path:
            return None
        stem, _ = os.path.splitext(self.path)
        return stem + suffix


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def _table(rows) -> str:
    width = max(len(r[0]) for r in rows)
    return "".join(f"{k:<{width}}  {v}\n" for k, v in rows)


def _g4(x):
    return f"{x:.4g}"


def cmd_classify(cfg, fmt, out):
    m = cfg.model
    x1, x2 = x_roots(m)
    cls = ex.classify(m)
    data = {"classification": cls.value, "x1": x1, "x2": x2, "r": m.r, "C": m.C, "rK": m.r * m.K}
    if fmt == "json":
        out.emit(_json(data))
    elif fmt == "csv":
        out.emit(_csv(list(data), [list(data.values())]))
    else:
        out.emit(f"{cls.value}  x2={_g4(x2)}  r={_g4(m.r)}  C={_g4(m.C)}  rK={_g4(m.r * m.K)}\n")
    return EXIT_OK


def cmd_roots(cfg, fmt, out):
    m = cfg.model
    x1, x2 = x_roots(m)
    rows = [("x1", x1), ("x2", x2)]
    try:
        zs = ex.quartic_roots(m)
        rows += [(k, getattr(zs, k)) for k in ("z1", "z2", "z3", "z4", "y1", "y2", "ybar1", "ybar2", "b1", "b2")]
    except RegimeStopError as exc:
        out.info(f"quartic roots unavailable: {exc}")
    if fmt == "json":
        out.emit(_json({k: float(v) for k, v in rows}))
    elif fmt == "csv":
        out.emit(_csv(["name", "value"], [(k, float(v)) for k, v in rows]))
    else:
        out.emit(_table([(k, _g4(v)) for k, v in rows]))
    return EXIT_OK


def _value_rows(sol, grid):
    p = np.geomspace(grid.p_min, grid.p_max, grid.n)
    th = sol.thresholds or (0.0, 0.0)
    J = [ex.evaluate_value(sol, i, p) for i in (0, 1)]
    for k, pk in enumerate(p):
        yield [float(pk), float(J[0][k]), float(J[1][k]), int(pk <= th[0]), int(pk <= th[1])]


def cmd_solve(cfg, fmt, out):
    sol = ex.solve(cfg.model)
    header = ["p", "J1", "J2", "stopped1", "stopped2"]
    if fmt == "csv":
        if sol.classification is ex.Classification.INFINITE_VALUE:
            raise ex.PreconditionViolated("value is infinite; no value-function table")
        out.emit(_csv(header, _value_rows(sol, cfg.grid)))
        return EXIT_OK
    doc = sol.to_dict()
    doc["meta"] = cfg.meta()
    out.emit(_json(doc))
    side = out.side_path("_values.csv")
    if side and sol.classification is not ex.Classification.INFINITE_VALUE:
        out.emit(_csv(header, _value_rows(sol, cfg.grid)), side)
        out.info(f"value table written to {side}")
    if sol.case:
        out.info(f"{sol.classification.value} {sol.case.value} thresholds "
                 f"({_g4(sol.thresholds[0])}, {_g4(sol.thresholds[1])})")
    return EXIT_OK


def cmd_pde(cfg, fmt, out):
    s = cfg.solver
    problem = cfg.problem.build() if cfg.problem is not None else extraction_problem(cfg.model, s.domain)
    sol = solve_vi(problem, s.n, s.method, s.tol, s.max_iter, s.omega)
    sets = extract_stopping_sets(sol)
    iv = {"thresholds": list(sol.thresholds), "residual": sol.residual, "iterations": sol.iterations,
          "stopping_sets": [{"intervals": [list(x) for x in st.intervals], "connected": bool(st.connected),
                             "left_form": bool(st.left_form), "right_form": bool(st.right_form)} for st in sets],
          "meta": {**sol.meta, "config": cfg.meta()}}
    m = sol.m
    header = ["y", *(f"V{i + 1}" for i in range(m)), *(f"stopped{i + 1}" for i in range(m))]
    if fmt == "json":
        out.emit(_json(iv))
    else:
        out.emit(_csv(header, sol.to_rows()))
        side = out.side_path("_intervals.json")
        if side:
            out.emit(_json(iv), side)
        for i, st in enumerate(sets):
            out.info(f"regime {i + 1}: " + (", ".join(f"[{a:.6g}, {b:.6g}]" for a, b in st.intervals) or "never stops"))
    return EXIT_OK


def cmd_simulate(cfg, fmt, out):
    m, o = cfg.model, cfg.mc
    sol = ex.solve(m)
    if sol.classification is ex.Classification.INFINITE_VALUE:
        raise ex.PreconditionViolated("value is infinite (r <= x2): Monte Carlo estimates diverge")
    th = o.thresholds if o.thresholds is not None else (sol.thresholds or (0.0, 0.0))
    pol = mc.ThresholdPolicy(th)
    results = []
    for p0 in o.p0:
        for i in o.start:
            est = mc.estimate_policy_value(m, p0, i, pol, o.n_paths, o.horizon, o.seed, o.dt_obs,
                                           o.antithetic, o.estimator)
            d = est.to_dict()
            d["closed_form"] = float(ex.evaluate_value(sol, i, p0))
            results.append(d)
    if fmt == "csv":
        out.emit(_csv(["p0", "start", "mean", "stderr", "n_paths", "horizon", "truncation_bias_bound", "closed_form"],
                      [[r["meta"]["p0"], r["meta"]["start"], r["mean"], r["stderr"], r["n_paths"], r["horizon"],
                        r["truncation_bias_bound"], r["closed_form"]] for r in results]))
    else:
        out.emit(_json({"policy": list(pol.thresholds), "estimates": results, "meta": cfg.meta()}))
    return EXIT_OK


def cmd_verify(cfg, fmt, out):
    from .verify import cross_validate

    rep = cross_validate(cfg.model, cfg.solver, cfg.mc)
    if fmt == "json":
        out.emit(_json(rep.to_dict()))
    elif fmt == "csv":
        out.emit(_csv(["check", "passed", "detail", "seconds"],
                      [[c.name, int(c.passed), c.detail, c.seconds] for c in rep.checks]))
    else:
        w = max(len(c.name) for c in rep.checks)
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{w}}  {c.detail}\n" for c in rep.checks]
        lines.append(f"{'all checks passed' if rep.passed else 'verification FAILED'}\n")
        out.emit("".join(lines))
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_plot_q(cfg, fmt, out):
    m = cfg.model
    zs = ex.quartic_roots(m)
    span = zs.z4 - zs.z1
    lo = cfg.plot.z_min if cfg.plot.z_min is not None else zs.z1 - 0.1 * span
    hi = cfg.plot.z_max if cfg.plot.z_max is not None else zs.z4 + 0.1 * span
    z = np.linspace(lo, hi, cfg.plot.n)
    q = ex.quartic(m, z)
    if fmt == "json":
        out.emit(_json({"z": z.tolist(), "Q": q.tolist(), "roots": list(zs.z)}))
    else:
        out.emit(_csv(["z", "Q"], zip(z.tolist(), q.tolist())))
    return EXIT_OK


HANDLERS = {"classify": cmd_classify, "roots": cmd_roots, "solve": cmd_solve, "pde": cmd_pde,
            "simulate": cmd_simulate, "verify": cmd_verify, "plot-q": cmd_plot_q}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regime-stop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config_path", nargs="?", help="configuration file (same as --config)")
        sp.add_argument("--config", help="path to a JSON configuration")
        sp.add_argument("--out", help="write results to this file instead of standard output")
        sp.add_argument("--seed", type=int, help="override mc.seed")
        sp.add_argument("--format", choices=("json", "csv"), help="machine-readable output format")
        sp.add_argument("--quiet", action="store_true", help="suppress informational messages")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    out = _Out(args)
    path = args.config or args.config_path
    try:
        if not path:
            raise ConfigError("a configuration file is required (positional or --config)")
        if args.config and args.config_path and args.config != args.config_path:
            raise ConfigError("conflicting configuration paths")
        cfg = load_config(path, args.command)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            from dataclasses import replace

            cfg = replace(cfg, mc=replace(cfg.mc, seed=args.seed))
        if cfg.model is None and args.command != "pde":
            raise ConfigError(f"'{args.command}' needs an extraction model")
        fmt = args.format or cfg.output.format
        if args.out is None and cfg.output.path:
            out.path = cfg.output.path
        return HANDLERS[args.command](cfg, fmt, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RegimeStopError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
