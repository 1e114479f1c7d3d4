"""Markov-chain modulation: generator matrices, chain paths and uniqueness checks.

Generator convention
--------------------
Rate matrices follow the *column* convention: ``a[j, i]`` is the rate of
jumping from regime ``i`` to regime ``j`` and every column sums to zero.  The
coupling term of the variational inequality for regime ``i`` is therefore
``sum_q a[q, i] V_q``.  Most textbooks use the transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InternalError, NonGenerator, PreconditionViolated
from .model import ExtractionModel

GENERATOR_ATOL = 1e-12


@dataclass(frozen=True)
class GeneratorMatrix:
    a: NDArray[np.float64]

    @property
    def m(self) -> int:
        return self.a.shape[0]

    def leave_rate(self, i: int) -> float:
        return -float(self.a[i, i])

    def jump_probabilities(self, i: int) -> NDArray[np.float64]:
        """Distribution of the destination when leaving regime ``i``."""
        p = self.a[:, i].copy()
        p[i] = 0.0
        return p / -self.a[i, i]

    def stationary_distribution(self) -> NDArray[np.float64]:
        """Solve ``A pi = 0`` with ``sum(pi) = 1`` (column convention)."""
        m = self.m
        lhs = np.vstack([self.a, np.ones(m)])
        rhs = np.zeros(m + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        return pi


def validate_generator(a: ArrayLike) -> GeneratorMatrix:
    """Check the three rate-matrix invariants and freeze the matrix.

    Raises
    ------
    NonGenerator
        naming the first violated invariant and the offending indices.
    """
    arr = np.array(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise NonGenerator(f"generator must be a non-empty square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        i, j = np.argwhere(~np.isfinite(arr))[0]
        raise NonGenerator(f"entry a[{i}][{j}] is not finite")
    m = arr.shape[0]
    for i in range(m):
        if not arr[i, i] < 0.0:
            raise NonGenerator(f"diagonal not negative: a[{i}][{i}] = {arr[i, i]}")
    for i in range(m):
        for j in range(m):
            if i != j and arr[i, j] < 0.0:
                raise NonGenerator(f"negative off-diagonal rate: a[{i}][{j}] = {arr[i, j]}")
    scale = np.abs(arr).max()
    colsum = arr.sum(axis=0)
    for j in range(m):
        if abs(colsum[j]) > GENERATOR_ATOL * max(1.0, scale):
            raise NonGenerator(f"column {j} sums to {colsum[j]}, expected 0")
    arr.setflags(write=False)
    return GeneratorMatrix(arr)


@dataclass(frozen=True)
class ChainPath:
    """One realisation of the modulating chain on ``[0, horizon]``.

    ``states[k]`` is the regime on ``[jump_times[k-1], jump_times[k])`` with
    ``jump_times[-1] := 0`` and the last state lasting until ``horizon``.
    """

    jump_times: NDArray[np.float64]
    states: NDArray[np.int64]
    horizon: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        st = np.asarray(self.states, dtype=np.int64)
        if len(st) != len(jt) + 1:
            raise ValueError("need exactly one more state than jump times")
        if len(jt) and (jt[0] <= 0.0 or jt[-1] > self.horizon or np.any(np.diff(jt) <= 0.0)):
            raise ValueError("jump times must be strictly increasing in (0, horizon]")
        if np.any(st[1:] == st[:-1]):
            raise ValueError("consecutive states must differ")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)

    @property
    def segment_bounds(self) -> NDArray[np.float64]:
        return np.concatenate([[0.0], self.jump_times, [self.horizon]])

    def state_at(self, t: float) -> int:
        """Regime at time ``t`` (right-continuous)."""
        return int(self.states[np.searchsorted(self.jump_times, t, side="right")])

    def occupation_times(self, m: int) -> NDArray[np.float64]:
        occ = np.zeros(m)
        np.add.at(occ, self.states, np.diff(self.segment_bounds))
        return occ


@dataclass(frozen=True)
class GrowthEnvelope:
    """Per-regime linear growth rates of drift (``mu``) and volatility (``sigma``)."""

    mu: NDArray[np.float64]
    sigma: NDArray[np.float64]

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ValueError("mu and sigma must be vectors of equal length")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive in every regime")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_model(cls, model: ExtractionModel) -> "GrowthEnvelope":
        return cls(model.mu, model.sigma)


def simulate_chain(gen: GeneratorMatrix, start: int, horizon: float,
                   rng: np.random.Generator) -> ChainPath:
    """Exact simulation: exponential holding times, jumps by column ``a[:, i]``."""
    if not horizon > 0:
        raise PreconditionViolated(f"horizon must be positive, got {horizon}")
    if not 0 <= start < gen.m:
        raise PreconditionViolated(f"start regime {start} out of range")
    times, states = [], [int(start)]
    t, i = 0.0, int(start)
    while True:
        t += rng.exponential(1.0 / gen.leave_rate(i))
        if t > horizon:
            break
        i = int(rng.choice(gen.m, p=gen.jump_probabilities(i))) if gen.m > 2 else 1 - i
        times.append(t)
        states.append(i)
    return ChainPath(np.array(times), np.array(states), float(horizon))


def sample_occupation_times(gen: GeneratorMatrix, start: int, horizon: float, n_paths: int,
                            rng: np.random.Generator) -> NDArray[np.float64]:
    """Time spent in each regime on ``[0, horizon]`` for ``n_paths`` independent chains.

    Vectorised counterpart of :func:`simulate_chain` when only occupation
    times matter.  Returns an ``(n_paths, m)`` array.
    """
    m = gen.m
    occ = np.zeros((n_paths, m))
    t = np.zeros(n_paths)
    state = np.full(n_paths, int(start))
    rates = -np.diag(gen.a)
    cum = np.cumsum(np.stack([gen.jump_probabilities(i) for i in range(m)]), axis=1)
    live = np.arange(n_paths)
    while live.size:
        s = state[live]
        hold = rng.exponential(1.0, live.size) / rates[s]
        seg = np.minimum(hold, horizon - t[live])
        occ[live, s] += seg
        t[live] += hold
        cont = t[live] < horizon
        live = live[cont]
        u = rng.random(live.size)
        state[live] = np.minimum((u[:, None] > cum[state[live]]).sum(axis=1), m - 1)
    return occ


def x_roots(model: ExtractionModel) -> tuple[float, float]:
    """Roots ``x1 < x2`` of x^2 + (l1-m1+l2-m2) x + (l1-m1)(l2-m2) - l1 l2 = 0.

    The largest root is the growth rate of ``E exp(int mu(X) ds)``.
    """
    m1, m2, l1, l2 = model.mu1, model.mu2, model.lambda1, model.lambda2
    b = l1 - m1 + l2 - m2
    c = (l1 - m1) * (l2 - m2) - l1 * l2
    # b^2 - 4c rewritten as a sum of squares; positive whenever l1 l2 > 0
    disc = ((l1 - m1) - (l2 - m2)) ** 2 + 4.0 * l1 * l2
    if not disc > 0:
        raise InternalError(f"non-positive discriminant {disc}")
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    r1, r2 = q, c / q
    x1, x2 = min(r1, r2), max(r1, r2)
    for x in (x1, x2):
        scale = max(x * x, abs(b * x), abs(c), 1e-300)
        if abs(x * x + b * x + c) > 1e-12 * scale:
            raise InternalError(f"x-root residual too large at x={x}")
    return x1, x2


def _expec_weights(model: ExtractionModel, start: int) -> tuple[float, float, float, float]:
    x1, x2 = x_roots(model)
    mu_i = model.mu[start]
    return (x2 - mu_i) / (x2 - x1), (mu_i - x1) / (x2 - x1), x1, x2


def expected_exp_drift_integral(model: ExtractionModel, start: int, t):
    """``E[exp(int_0^t mu(X(s)) ds) | X(0) = start]`` in closed form."""
    c1, c2, x1, x2 = _expec_weights(model, start)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise PreconditionViolated("t must be non-negative")
    out = c1 * np.exp(x1 * t) + c2 * np.exp(x2 * t)
    out = np.where(t == 0.0, 1.0, out)
    return float(out) if out.ndim == 0 else out


def discounted_price_integral(model: ExtractionModel, start: int, tail_from: float = 0.0) -> float:
    """``int_T^inf exp(-r t) E[exp(int_0^t mu(X) ds)] dt``, the never-stop price slope.

    With ``tail_from = 0`` this is the expected discounted revenue per unit of
    initial price when extraction never stops.  Requires ``r > x2``.
    """
    c1, c2, x1, x2 = _expec_weights(model, start)
    r = model.r
    if r <= x2:
        raise PreconditionViolated(f"r={r} <= x2={x2}: discounted revenue is infinite")
    T = float(tail_from)
    return c1 * math.exp((x1 - r) * T) / (r - x1) + c2 * math.exp((x2 - r) * T) / (r - x2)


def check_uniqueness_simple(model_or_env, r: float | None = None) -> bool:
    """True iff the discount rate strictly exceeds every regime's drift growth."""
    if isinstance(model_or_env, ExtractionModel):
        mu = model_or_env.mu
        r = model_or_env.r if r is None else r
    else:
        mu = np.asarray(model_or_env.mu if hasattr(model_or_env, "mu") else model_or_env, dtype=float)
    if r is None:
        raise PreconditionViolated("discount rate required")
    return bool(r > np.max(mu))


@dataclass(frozen=True)
class H1Witness:
    lambda_bar: float
    b: NDArray[np.float64]


def default_lambda_grid() -> NDArray[np.float64]:
    """17 log-spaced exponents in (1, 5]."""
    return 1.0 + np.logspace(-3, math.log10(4.0), 17)


def h_matrix(gen: GeneratorMatrix, env: GrowthEnvelope, r: float, lam: float) -> NDArray[np.float64]:
    a = gen.a
    H = -a.copy()
    w = r - np.diag(a) - env.mu * lam - 0.5 * env.sigma ** 2 * lam * (lam - 1.0)
    np.fill_diagonal(H, w)
    return H


def _verify_witness(H: NDArray[np.float64], b: NDArray[np.float64]) -> bool:
    return bool(np.all(b > 0) and np.all(b @ H >= -1e-12 * max(1.0, np.abs(H).max())))


def _candidates_m2(H: NDArray[np.float64]):
    # b = (1, t): h11 + t h21 >= 0 and h12 + t h22 >= 0 with h21, h12 <= 0
    lo, hi = 0.0, math.inf
    for c0, c1 in ((H[0, 0], H[1, 0]), (H[0, 1], H[1, 1])):
        if c1 > 0:
            lo = max(lo, -c0 / c1)
        elif c1 < 0:
            hi = min(hi, -c0 / c1)
        elif c0 < 0:
            return
    if hi < lo or hi <= 0:
        return
    if math.isinf(hi):
        yield np.array([1.0, max(2.0 * lo, 1.0)])
    else:
        yield np.array([1.0, 0.5 * (lo + hi)])
        if lo > 0:
            yield np.array([1.0, math.sqrt(lo * hi)])


def _simplex_grid(m: int, res: int = 20):
    def rec(k, left):
        if k == 1:
            yield (left,)
            return
        for v in range(1, left - k + 2):
            for rest in rec(k - 1, left - v):
                yield (v,) + rest
    for pt in rec(m, res):
        yield np.array(pt, dtype=float) / res


def check_hypothesis_h1(gen: GeneratorMatrix, env: GrowthEnvelope, r: float,
                        lambda_grid: Sequence[float] | None = None) -> H1Witness | None:
    """Search for ``lambda_bar > 1`` and ``b > 0`` with ``b^T H(lambda_bar) >= 0``.

    Tries ``b = 1`` first, then the exact feasible interval for two regimes or
    a coarse simplex grid otherwise.  ``None`` means no witness on the grid,
    which does not refute the hypothesis.
    """
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if np.any(grid <= 1.0):
        raise PreconditionViolated("lambda grid values must exceed 1")
    m = gen.m
    for lam in grid:
        H = h_matrix(gen, env, r, float(lam))
        cands = [np.ones(m)]
        cands += list(_candidates_m2(H)) if m == 2 else list(_simplex_grid(m))
        for b in cands:
            if _verify_witness(H, b):
                return H1Witness(float(lam), b)
    return None
