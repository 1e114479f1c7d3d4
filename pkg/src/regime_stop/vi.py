"""Finite-difference solver for coupled obstacle problems with regime switching.

For regimes ``i = 0..m-1`` on a truncated interval the solver finds ``V`` with

    min{ r V_i - L_i V_i - sum_q a[q, i] V_q - f_i ,  V_i - g_i } = 0,
    L_i = 0.5 beta_i(y)^2 d^2/dy^2 + alpha_i(y) d/dy .

Unknowns are ordered by (node, regime) so that the coupled matrix is banded.
Every PDE row of the assembled matrix sums to ``r`` (the coupling columns sum
to zero), which makes the scheme an M-matrix with ``||A^-1||_inf <= 1/r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.linalg import solve_banded

from .errors import MaxIterExceeded, NonMonotoneScheme, PreconditionViolated, SingularMatrix
from .model import ExtractionModel
from .regime import GeneratorMatrix, validate_generator, x_roots

_SCHEMES = ("central-upwind", "central", "upwind")


@dataclass(frozen=True)
class Boundary:
    """Boundary treatment on one side of the truncated domain.

    ``kind`` is ``"dirichlet"`` (``value`` is an m-vector or a callable
    ``y -> m-vector``), ``"value_at_zero"`` (Dirichlet data from
    :func:`boundary_value_at_zero`) or ``"extrapolate"`` (zero second
    difference).
    """

    kind: str = "extrapolate"
    value: object = None

    def __post_init__(self):
        if self.kind not in ("dirichlet", "value_at_zero", "extrapolate"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "dirichlet" and self.value is None:
            raise ValueError("dirichlet boundary needs a value")


@dataclass(frozen=True)
class StoppingProblem:
    gen: GeneratorMatrix
    r: float
    alpha: tuple
    beta: tuple
    f: tuple
    g: tuple
    domain: tuple
    left: Boundary = field(default_factory=lambda: Boundary("value_at_zero"))
    right: Boundary = field(default_factory=Boundary)
    grid: str = "uniform"

    def __post_init__(self):
        if not isinstance(self.gen, GeneratorMatrix):
            object.__setattr__(self, "gen", validate_generator(self.gen))
        m = self.gen.m
        for name in ("alpha", "beta", "f", "g"):
            fns = tuple(getattr(self, name))
            if len(fns) != m:
                raise PreconditionViolated(f"{name} needs {m} functions, got {len(fns)}")
            object.__setattr__(self, name, fns)
        lo, hi = map(float, self.domain)
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise PreconditionViolated(f"domain must be a finite interval, got {self.domain}")
        if self.grid not in ("uniform", "log"):
            raise PreconditionViolated(f"grid must be 'uniform' or 'log', got {self.grid!r}")
        if self.grid == "log" and lo <= 0:
            raise PreconditionViolated("log grid needs a positive left end")
        if not self.r > 0:
            raise PreconditionViolated("discount rate must be positive")
        object.__setattr__(self, "domain", (lo, hi))

    @property
    def m(self) -> int:
        return self.gen.m

    def nodes(self, n: int) -> np.ndarray:
        lo, hi = self.domain
        return np.geomspace(lo, hi, n) if self.grid == "log" else np.linspace(lo, hi, n)


def _eval(fn: Callable, y: np.ndarray) -> np.ndarray:
    out = np.asarray(fn(y), dtype=float)
    out = np.broadcast_to(out, y.shape).astype(float)
    if not np.all(np.isfinite(out)):
        raise PreconditionViolated("coefficient or payoff function returned non-finite values")
    return out


def _const(c):
    return lambda y: np.full_like(np.asarray(y, dtype=float), c)


def extraction_problem(model: ExtractionModel, domain=(0.01, 200.0), right="asymptote",
                       left: str = "asymptote") -> StoppingProblem:
    """Extraction model as a grid problem in the price variable on a log grid.

    ``"asymptote"`` boundaries use ``max(k' p - C/r, -K)``: stop-now or
    never-stop, whichever is larger.  On the left this is exact whenever
    ``domain[0]`` lies below both thresholds (and always for NeverStop
    models), whereas ``left="value_at_zero"`` carries an ``O(k' p_lo)`` error.
    ``right="extrapolate"`` imposes a zero second difference instead, and a
    :class:`Boundary` instance is used as given.  The asymptote's right-hand
    truncation error scales like ``(domain[1] / p*)^z2`` with ``z2`` the
    negative quartic root nearest zero, so slowly decaying models need a wide
    domain or exact boundary data.
    """
    from .extraction import k_coefficients

    if not isinstance(right, Boundary) and right not in ("asymptote", "extrapolate"):
        raise ValueError(f"unknown right boundary {right!r}")
    if left not in ("asymptote", "value_at_zero"):
        raise ValueError(f"unknown left boundary {left!r}")
    mu, sig, C, K, r = model.mu, model.sigma, model.C, model.K, model.r
    asym = None
    if left == "asymptote" or right == "asymptote":
        _, x2 = x_roots(model)
        if r <= x2:
            raise PreconditionViolated(f"value is infinite (r={r} <= x2={x2})")
        k1, k2 = k_coefficients(model)
        slopes = np.array([k2, k1])
        asym = Boundary("dirichlet", lambda y: np.maximum(slopes * y - C / r, -K))
    return StoppingProblem(
        gen=model.generator(),
        r=r,
        alpha=tuple((lambda y, a=a: a * y) for a in mu),
        beta=tuple((lambda y, s=s: s * y) for s in sig),
        f=(lambda y: y - C,) * 2,
        g=(_const(-K),) * 2,
        domain=domain,
        left=asym if left == "asymptote" else Boundary("value_at_zero"),
        right=right if isinstance(right, Boundary) else asym if right == "asymptote" else Boundary("extrapolate"),
        grid="log",
    )


def single_regime_problem(mu: float, sigma: float, r: float, C: float, K: float,
                          domain=(0.01, 200.0)) -> StoppingProblem:
    """One GBM regime, encoded as two identical regimes (switching is then inert)."""
    return extraction_problem(ExtractionModel(mu, mu, sigma, sigma, 1.0, 1.0, r, C, K), domain)


def boundary_value_at_zero(problem: StoppingProblem) -> np.ndarray:
    """``max((rI - A)^-T f(0), g(0))`` componentwise.

    At ``y = 0`` the diffusion vanishes for coefficients of linear growth, so
    the value solves the pure chain equation ``r V_i - sum_q a[q, i] V_q = f_i(0)``.
    """
    m = problem.m
    z = np.zeros(1)
    f0 = np.array([_eval(fn, z)[0] for fn in problem.f])
    g0 = np.array([_eval(fn, z)[0] for fn in problem.g])
    M = problem.r * np.eye(m) - problem.gen.a.T
    try:
        v = np.linalg.solve(M, f0)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc
    if not np.all(np.isfinite(v)) or np.linalg.cond(M) > 1e14:
        raise SingularMatrix("rI - A is numerically singular")
    return np.maximum(v, g0)


@dataclass(frozen=True)
class DiscreteOperator:
    """Assembled obstacle problem ``min(A v - f, v - g) = 0`` on the fixed rows' complement."""

    grid: np.ndarray
    m: int
    matrix: sp.csr_matrix
    rhs: np.ndarray
    obstacle: np.ndarray
    fixed: np.ndarray  # boundary rows, excluded from the complementarity
    margin: np.ndarray  # row dominance margin, r on PDE rows and 1 on boundary rows
    upwind_nodes: tuple
    scheme: str

    @property
    def n(self) -> int:
        return self.grid.size

    def index(self, regime: int, node: int) -> int:
        return node * self.m + regime


def _boundary_values(problem, bc, y):
    if bc.kind == "value_at_zero":
        return boundary_value_at_zero(problem)
    v = bc.value(np.array(y)) if callable(bc.value) else bc.value
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size == 1:
        v = np.full(problem.m, v[0])
    if v.size != problem.m or not np.all(np.isfinite(v)):
        raise PreconditionViolated("dirichlet value must be a finite m-vector")
    return v


def discretize(problem: StoppingProblem, n: int, scheme: str = "central-upwind") -> DiscreteOperator:
    """Monotone finite-difference discretisation of the coupled operator.

    Central differences are kept where both off-diagonals stay nonnegative;
    otherwise the drift is upwinded at that node (recorded in
    ``upwind_nodes``).  ``scheme="central"`` forbids the fallback.
    """
    if n < 16:
        raise PreconditionViolated("need at least 16 nodes")
    if scheme not in _SCHEMES:
        raise ValueError(f"scheme must be one of {_SCHEMES}")
    m, r, a = problem.m, problem.r, problem.gen.a
    y = problem.nodes(n)
    hm = np.diff(y)[:-1]
    hp = np.diff(y)[1:]
    H = hm + hp
    yi = y[1:-1]
    rows, cols, vals = [], [], []
    rhs = np.empty(m * n)
    obst = np.empty(m * n)
    fixed = np.zeros(m * n, dtype=bool)
    margin = np.full(m * n, float(r))
    upwind = []
    k_int = np.arange(1, n - 1)

    for i in range(m):
        al = _eval(problem.alpha[i], yi)
        b2 = _eval(problem.beta[i], yi) ** 2
        if np.any(b2 <= 0):
            raise PreconditionViolated(f"beta_{i} must be positive on the domain")
        lo = b2 / (hm * H) - al * hp / (hm * H)
        up = b2 / (hp * H) + al * hm / (hp * H)
        bad = (lo < 0) | (up < 0)
        if scheme == "upwind":
            bad = np.ones_like(bad)
        if np.any(bad):
            if scheme == "central":
                k = int(k_int[np.argmax(bad)])
                raise NonMonotoneScheme(
                    f"central stencil not monotone at node {k} (y={y[k]:.6g}) in regime {i}; refine the grid")
            lo = np.where(bad, b2 / (hm * H) + np.maximum(-al, 0.0) / hm, lo)
            up = np.where(bad, b2 / (hp * H) + np.maximum(al, 0.0) / hp, up)
            upwind.extend((i, int(k)) for k in k_int[bad])
        idx = k_int * m + i
        rows += [idx, idx, idx]
        cols += [idx - m, idx, idx + m]
        vals += [-lo, r - a[i, i] + lo + up, -up]
        for q in range(m):
            if q != i and a[q, i] != 0:
                rows.append(idx)
                cols.append(k_int * m + q)
                vals.append(np.full(idx.size, -a[q, i]))
        rhs[idx] = _eval(problem.f[i], yi)
        obst[k_int * m + i] = _eval(problem.g[i], yi)
        obst[i] = _eval(problem.g[i], y[:1])[0]
        obst[(n - 1) * m + i] = _eval(problem.g[i], y[-1:])[0]

    for side, bc in (("left", problem.left), ("right", problem.right)):
        node = 0 if side == "left" else n - 1
        idx = node * m + np.arange(m)
        fixed[idx] = True
        margin[idx] = 1.0
        if bc.kind == "extrapolate":
            if side == "left":
                n1, n2 = 1, 2
                rho = (y[1] - y[0]) / (y[2] - y[1])
            else:
                n1, n2 = n - 2, n - 3
                rho = (y[-1] - y[-2]) / (y[-2] - y[-3])
            rows += [idx, idx, idx]
            cols += [idx, n1 * m + np.arange(m), n2 * m + np.arange(m)]
            vals += [np.ones(m), np.full(m, -(1 + rho)), np.full(m, rho)]
            rhs[idx] = 0.0
        else:
            rows.append(idx)
            cols.append(idx)
            vals.append(np.ones(m))
            rhs[idx] = _boundary_values(problem, bc, y[node])

    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m * n, m * n))
    A.sum_duplicates()
    _assert_m_matrix(A, fixed, m)
    return DiscreteOperator(y, m, A, rhs, obst, fixed, margin, tuple(upwind), scheme)


def _assert_m_matrix(A: sp.csr_matrix, fixed: np.ndarray, m: int):
    diag = A.diagonal()
    off = A - sp.diags(diag)
    off_max = off.max(axis=1).toarray().ravel()
    off_abs = abs(off).sum(axis=1).A.ravel()
    free = ~fixed
    scale = np.maximum(diag, 1.0)
    bad = free & ((off_max > 1e-14 * scale) | (diag - off_abs < -1e-12 * scale))
    if np.any(bad):
        j = int(np.argmax(bad))
        raise NonMonotoneScheme(f"row for node {j // m}, regime {j % m} is not an M-matrix row")


@dataclass(frozen=True)
class GridSolution:
    grid: np.ndarray
    v: np.ndarray
    stopping_mask: np.ndarray
    residual: float
    iterations: int
    meta: dict
    obstacle: np.ndarray

    @property
    def m(self) -> int:
        return self.v.shape[0]

    @property
    def thresholds(self) -> tuple:
        """Per-regime left-interval threshold, or None if the regime never stops.

        A stopped run starting at the left end is closed at the midpoint to the
        first continued node; a fully stopped regime reports the right end.
        """
        out = []
        for mask in self.stopping_mask:
            if not mask[0] and not mask[1]:
                out.append(None)
                continue
            cont = np.flatnonzero(~mask[1:]) + 1
            k = int(cont[0]) if cont.size else None
            out.append(float(self.grid[-1]) if k is None else 0.5 * float(self.grid[k - 1] + self.grid[k]))
        return tuple(out)

    def to_rows(self):
        """CSV-ready rows: y, V per regime, stopped flag per regime."""
        for k, y in enumerate(self.grid):
            yield [float(y), *map(float, self.v[:, k]), *(int(b) for b in self.stopping_mask[:, k])]


def _mask(v, g):
    return v - g <= 1e-7 * (1.0 + np.abs(g))


def complementarity_residual(op: DiscreteOperator, v: np.ndarray) -> float:
    pde = (op.matrix @ v - op.rhs) / op.margin
    res = np.where(op.fixed, np.abs(pde), np.abs(np.minimum(pde, v - op.obstacle)))
    # pointwise scale: a global max|v| would swamp small values on wide domains
    return float((res / (1.0 + np.abs(v))).max())


def _to_banded(A: sp.csr_matrix):
    coo = A.tocoo()
    off = coo.col - coo.row
    u = int(max(off.max(), 0))
    l = int(max(-off.min(), 0))
    ab = np.zeros((l + u + 1, A.shape[0]))
    ab[u + coo.row - coo.col, coo.col] = coo.data
    return ab, l, u


def _policy_iteration(op: DiscreteOperator, max_iter: int, tol: float, stop0=None):
    A = op.matrix
    ab0, l, u = _to_banded(A)
    N = A.shape[0]
    free = ~op.fixed
    diag = A.diagonal().copy()
    stop = np.zeros(N, dtype=bool) if stop0 is None else stop0 & free
    v = None
    for it in range(1, max_iter + 1):
        ab = ab0.copy()
        rows = np.flatnonzero(stop)
        for off in range(-l, u + 1):
            col = rows + off
            ok = (col >= 0) & (col < N)
            ab[u - off, col[ok]] = 0.0
        # stopped rows carry the PDE diagonal so banded pivoting does not mix scales
        ab[u, rows] = diag[rows]
        b = np.where(stop, diag * op.obstacle, op.rhs)
        try:
            v = solve_banded((l, u), ab, b, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix(str(exc)) from exc
        pde = (A @ v - op.rhs) / op.margin
        gap = v - op.obstacle
        # hysteresis: a node switches only on a violation above the roundoff of A v
        eps = 0.1 * tol * (1.0 + np.abs(v))
        new_stop = free & np.where(stop, pde >= gap - eps, pde > gap + eps)
        if np.array_equal(new_stop, stop):
            return v, it
        stop = new_stop
    raise MaxIterExceeded("policy iteration did not stabilise", complementarity_residual(op, v), max_iter)


@njit(cache=True)
def _psor_kernel(indptr, indices, data, diag, rhs, obst, fixed, margin, order, v, omega, tol, max_iter):
    N = v.size
    res = np.inf
    for sweep in range(1, max_iter + 1):
        for t in range(N):
            j = order[t]
            s = rhs[j]
            for p in range(indptr[j], indptr[j + 1]):
                c = indices[p]
                if c != j:
                    s -= data[p] * v[c]
            gs = s / diag[j]
            if fixed[j]:
                v[j] = gs
            else:
                x = v[j] + omega * (gs - v[j])
                v[j] = x if x > obst[j] else obst[j]
        if sweep % 10 == 0 or sweep == max_iter:
            res = 0.0
            for j in range(N):
                s = -rhs[j]
                for p in range(indptr[j], indptr[j + 1]):
                    s += data[p] * v[indices[p]]
                s /= margin[j]
                if fixed[j]:
                    e = abs(s)
                else:
                    d = v[j] - obst[j]
                    e = abs(s if s < d else d)
                e /= 1.0 + abs(v[j])
                if e > res:
                    res = e
            if res <= tol:
                return sweep, res
    return max_iter, res


def _psor(op: DiscreteOperator, omega: float, tol: float, max_iter: int, v0=None):
    if not 0 < omega < 2:
        raise PreconditionViolated("PSOR relaxation factor must lie in (0, 2)")
    A = op.matrix
    m, n = op.m, op.n
    order = (np.arange(n)[None, :] * m + np.arange(m)[:, None]).ravel()  # regime-major
    v = np.array(op.obstacle if v0 is None else v0, dtype=float)
    dir_rows = op.fixed & (A.getnnz(axis=1) == 1)
    v[dir_rows] = op.rhs[dir_rows] / A.diagonal()[dir_rows]
    it, res = _psor_kernel(A.indptr, A.indices, A.data, A.diagonal(), op.rhs, op.obstacle,
                           op.fixed, op.margin, order, v, float(omega), float(tol), int(max_iter))
    if res > tol:
        raise MaxIterExceeded(f"PSOR residual {res:.3e} above tolerance after {it} sweeps", res, it)
    return v, it


_WARM_START_N = 1000


def _coarse_policy(problem, op, tol, scheme):
    """Stopping set interpolated from a quarter-resolution solve, or None on small grids.

    From a poor initial policy the free boundary moves one node per policy
    iteration, so large grids would need O(n) iterations without this.
    """
    n = op.n
    if n < 4 * _WARM_START_N:
        return None
    coarse = solve_vi(problem, n // 4, "policy-iteration", tol, None, 1.5, scheme)
    stop = np.empty((n, op.m), dtype=bool)
    for i in range(op.m):
        stop[:, i] = np.interp(op.grid, coarse.grid, coarse.stopping_mask[i].astype(float)) > 0.5
    return stop.ravel()


def solve_vi(problem: StoppingProblem, n: int = 2000, method: str = "policy-iteration",
             tol: float = 1e-8, max_iter: int | None = None, omega: float = 1.5,
             scheme: str = "central-upwind") -> GridSolution:
    """Solve the discrete obstacle problem by policy iteration or PSOR.

    ``tol`` bounds the complementarity residual in value units relative to
    ``1 + max|v|`` (PDE rows are divided by their dominance margin ``r``, so
    this also bounds the relative error of the discrete solution).
    """
    if not tol > 0:
        raise PreconditionViolated("tol must be positive")
    op = discretize(problem, n, scheme)
    if method == "policy-iteration":
        v, it = _policy_iteration(op, max_iter or 500, tol, _coarse_policy(problem, op, tol, scheme))
    elif method == "psor":
        v, it = _psor(op, omega, tol, max_iter or 2_000_000)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = complementarity_residual(op, v)
    if res > tol:
        raise MaxIterExceeded(f"final residual {res:.3e} above tolerance", res, it)
    m = op.m
    V = v.reshape(n, m).T.copy()
    G = op.obstacle.reshape(n, m).T.copy()
    meta = {"n": n, "method": method, "tol": tol, "scheme": scheme, "grid": problem.grid,
            "domain": list(problem.domain), "upwind_nodes": len(op.upwind_nodes)}
    if method == "psor":
        meta["omega"] = omega
    return GridSolution(op.grid, V, _mask(V, G), res, it, meta, G)


@dataclass(frozen=True)
class StoppingSet:
    intervals: tuple
    connected: bool
    left_form: bool
    right_form: bool


def extract_stopping_sets(sol: GridSolution) -> list[StoppingSet]:
    """Maximal runs of stopped nodes as closed intervals ``(y_a, y_b)`` per regime."""
    out = []
    y = sol.grid
    for mask in sol.stopping_mask:
        padded = np.concatenate([[False], mask, [False]]).astype(int)
        d = np.diff(padded)
        starts = np.flatnonzero(d == 1)
        ends = np.flatnonzero(d == -1) - 1
        iv = tuple((float(y[s]), float(y[e])) for s, e in zip(starts, ends))
        one = len(iv) == 1
        out.append(StoppingSet(iv, len(iv) <= 1,
                               one and starts[0] == 0,
                               one and ends[0] == y.size - 1))
    return out


@dataclass(frozen=True)
class RichardsonResult:
    estimate: tuple
    spread: tuple
    raw: np.ndarray
    n_sequence: tuple


def richardson_threshold(problem: StoppingProblem, n_sequence: Sequence[int],
                         method: str = "policy-iteration", tol: float = 1e-8) -> RichardsonResult:
    """Extrapolate grid thresholds assuming an O(1/n) localisation error.

    The estimate combines the two finest grids.  Midpoint thresholds move in
    jumps of one node rather than smoothly in ``n``, so the spread is the
    larger of the change against the estimate from the next-coarser pair and
    half the finest local spacing at the estimate (interior thresholds only).
    """
    ns = tuple(int(n) for n in n_sequence)
    if len(ns) < 3 or any(b <= a for a, b in zip(ns, ns[1:])):
        raise PreconditionViolated("n_sequence must be increasing with at least three entries")
    raw = np.array([[np.nan if t is None else t for t in solve_vi(problem, n, method, tol).thresholds]
                    for n in ns])

    def extrap(i, j):
        return (ns[j] * raw[j] - ns[i] * raw[i]) / (ns[j] - ns[i])

    k = len(ns)
    est = extrap(k - 2, k - 1)
    spread = np.abs(est - extrap(k - 3, k - 2))
    y = problem.nodes(ns[-1])
    for i, e in enumerate(est):
        # a fully stopped regime reports the domain end, which has no localisation error
        if np.isfinite(e) and np.all(raw[:, i] < y[-1]):
            j = int(np.clip(np.searchsorted(y, e), 1, y.size - 1))
            spread[i] = max(spread[i], 0.5 * (y[j] - y[j - 1]))
    return RichardsonResult(tuple(map(float, est)), tuple(map(float, spread)), raw, ns)
