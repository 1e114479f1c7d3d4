"""Cross-validation of the closed form against the grid solver and Monte Carlo."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import extraction as ex
from . import mc
from .config import MCOptions, SolverOptions
from .errors import PreconditionViolated
from .model import ExtractionModel
from .regime import expected_exp_drift_integral, x_roots
from .rng import stream
from .vi import extraction_problem, solve_vi


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name, passed, detail, seconds=0.0):
        self.checks.append(Check(name, bool(passed), detail, seconds))

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail,
                            "seconds": c.seconds} for c in self.checks]}


def interior_mask(grid: np.ndarray, domain) -> np.ndarray:
    """Nodes away from both truncation boundaries: ``[10 lo, hi / 2]``."""
    lo, hi = domain
    return (grid >= 10 * lo) & (grid <= 0.5 * hi)


def local_spacing(grid: np.ndarray, y: float) -> float:
    k = int(np.clip(np.searchsorted(grid, y), 1, grid.size - 1))
    return float(grid[k] - grid[k - 1])


def closed_form_invariants(sol: ex.ClosedFormSolution, n: int = 1000) -> list[str]:
    """Violations of the obstacle, monotonicity, convexity and threshold-bound properties."""
    m = sol.model
    bad = []
    top = max(50.0, 20 * max(sol.thresholds or (1.0,)))
    p = np.geomspace(1e-3, top, n)
    for i in (0, 1):
        v = ex.evaluate_value(sol, i, p)
        if np.any(v < -m.K - 1e-9 * (1 + m.K)):
            bad.append(f"obstacle violated in regime {i}")
        if np.any(np.diff(v) < -1e-9 * (1 + np.abs(v[1:]))):
            bad.append(f"not nondecreasing in regime {i}")
        # second divided differences on the nonuniform grid
        d1 = np.diff(v) / np.diff(p)
        d2 = np.diff(d1) / (0.5 * (p[2:] - p[:-2]))
        if np.any(d2 < -1e-8 * (1 + np.abs(v[1:-1]))):
            bad.append(f"not convex in regime {i}")
        if sol.thresholds is not None:
            th = sol.thresholds[i]
            if not 0 < th <= (m.C - m.r * m.K) * (1 + 1e-9):
                bad.append(f"threshold {th} outside (0, C - rK]")
            stopped = v <= -m.K + 1e-12 * (1 + m.K)
            if np.any(stopped != (p <= th)):
                bad.append(f"stopping set is not (0, p*] in regime {i}")
    return bad


def cross_validate(model: ExtractionModel, solver: SolverOptions | None = None,
                   mc_opts: MCOptions | None = None, dominance: bool = True) -> VerifyReport:
    solver = solver or SolverOptions()
    mc_opts = mc_opts or MCOptions()
    rep = VerifyReport()
    t0 = time.perf_counter()
    sol = ex.solve(model)
    cls = sol.classification
    rep.add("closed form", True,
            f"{cls.value}" + (f" {sol.case.value} thresholds={_fmt(sol.thresholds)}" if sol.case else ""),
            time.perf_counter() - t0)

    if cls is ex.Classification.INFINITE_VALUE:
        _, x2 = x_roots(model)
        try:
            mc.estimate_policy_value(model, 1.0, 0, mc.ThresholdPolicy.never(), 4, seed=mc_opts.seed)
            rep.add("mc rejects infinite value", False, "estimator accepted an infinite-value model")
        except PreconditionViolated:
            rep.add("mc rejects infinite value", True, f"r={model.r} <= x2={x2:.4g}")
        return rep

    t0 = time.perf_counter()
    zs = ex.quartic_roots(model)
    scale = zs.residual_scale()
    res = max(abs(ex.quartic(model, z)) for z in zs.z)
    ok = res <= ex.ROOT_TOL * scale and zs.z1 < zs.z2 < 0 < zs.z3 < zs.z4 and zs.z3 > 1
    rep.add("quartic roots", ok, f"max residual {res:.2e}, z3={zs.z3:.4f}", time.perf_counter() - t0)

    if cls is ex.Classification.THRESHOLD:
        bad = closed_form_invariants(sol)
        rep.add("closed-form invariants", not bad, "; ".join(bad) or "obstacle, monotone, convex, left intervals")

    t0 = time.perf_counter()
    problem = extraction_problem(model, solver.domain)
    grid = solve_vi(problem, solver.n, solver.method, solver.tol, solver.max_iter, solver.omega)
    dt = time.perf_counter() - t0
    y = grid.grid
    inner = interior_mask(y, solver.domain)
    if cls is ex.Classification.THRESHOLD:
        gaps = []
        for i in (0, 1):
            gt = grid.thresholds[i]
            h = local_spacing(y, sol.thresholds[i])
            gaps.append((gt, abs(gt - sol.thresholds[i]) if gt is not None else np.inf, h))
        rep.add("grid thresholds", all(g <= h for _, g, h in gaps),
                ", ".join(f"{gt:.4f} (gap {g:.1e}, h {h:.1e})" for gt, g, h in gaps), dt)
    else:
        rep.add("grid never stops", not grid.stopping_mask[:, inner].any(),
                f"{int(grid.stopping_mask[:, inner].sum())} interior nodes stopped", dt)
    errs = []
    for i in (0, 1):
        exact = ex.evaluate_value(sol, i, y[inner])
        errs.append(float(np.max(np.abs(grid.v[i, inner] - exact) / (1 + np.abs(exact)))))
    rep.add("grid values", max(errs) <= 1e-2, f"max relative error {max(errs):.2e}")

    pol = mc.ThresholdPolicy(mc_opts.thresholds if mc_opts.thresholds is not None
                             else (sol.thresholds if sol.thresholds else (0.0, 0.0)))
    for p0 in mc_opts.p0:
        for i in mc_opts.start:
            t0 = time.perf_counter()
            est = mc.estimate_policy_value(model, p0, i, pol, mc_opts.n_paths, mc_opts.horizon,
                                           mc_opts.seed, mc_opts.dt_obs, mc_opts.antithetic,
                                           mc_opts.estimator)
            exact = ex.evaluate_value(sol, i, p0)
            z = (est.mean - exact) / est.stderr if est.stderr > 0 else 0.0
            rep.add(f"mc value p0={p0:g} regime={i + 1}", est.agrees_with(exact),
                    f"{est.mean:.4f} vs {exact:.4f} ({z:+.2f} se, bias <= {est.truncation_bias_bound:.1e})",
                    time.perf_counter() - t0)

    for i in (0, 1):
        for t in (0.5, 1.0, 2.0):
            x = mc.terminal_prices(model, 1.0, i, t, max(mc_opts.n_paths, 2), stream(mc_opts.seed, 99, i, int(t * 10)))
            exact = expected_exp_drift_integral(model, i, t)
            se = x.std(ddof=1) / np.sqrt(x.size)
            rep.add(f"expectation t={t:g} regime={i + 1}", abs(x.mean() - exact) <= 3 * se,
                    f"{x.mean():.5f} vs {exact:.5f} ({(x.mean() - exact) / se:+.2f} se)")

    if dominance and cls is ex.Classification.THRESHOLD:
        t0 = time.perf_counter()
        base = mc.ThresholdPolicy(sol.thresholds)
        perts = [(1.25, 1.0), (0.75, 1.0), (1.0, 1.25), (1.0, 0.75), mc.ThresholdPolicy.never()]
        dr = mc.policy_dominance_check(model, 3.0, 0, base, perts, mc_opts.n_paths, seed=mc_opts.seed,
                                       dt_obs=mc_opts.dt_obs)
        rep.add("policy dominance p0=3", dr.passed,
                ", ".join(f"{c.diff:+.3f}±{c.paired_stderr:.3f}" for c in dr.comparisons),
                time.perf_counter() - t0)
    return rep


def _fmt(xs):
    return "(" + ", ".join(f"{x:.4f}" for x in xs) + ")"
