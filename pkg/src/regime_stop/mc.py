"""Monte Carlo evaluation of threshold policies for the extraction model.

Between chain jumps the price is a GBM with the current regime's constants,
so log-increments are sampled exactly; thresholds are checked only at
observation nodes (a ``dt_obs`` lattice plus every chain jump).

Two estimators of ``E[int_0^tau e^{-rt} f(P) dt - e^{-r tau} K]`` with the
linear running payoff ``f(p) = a p + b`` are available for threshold policies:

``"martingale"`` (default)
    Uses the never-stop value ``phi_i(p) = a k'_i p + b / r`` as a control:
    the strong Markov property gives
    ``J = phi_{X0}(p0) - E[e^{-r tau} (phi_{X_tau}(P_tau) + K)]``, whose
    integrand is bounded because ``P_tau`` lies below a threshold.  Paths that
    drift far above every threshold are retired early: ``e^{-rt} u_X P^{z2}``
    is a martingale (``z2`` the larger negative quartic root), which bounds
    the discounted probability of ever stopping and hence the bias of
    dropping the path.
``"direct"``
    Per-step trapezoid integration of the discounted running payoff on the
    observation lattice up to ``horizon``.  Its variance is infinite when
    ``r`` is close to the growth rate ``x2``; a prefix-variance guard raises
    :class:`DivergentEstimate` in that case.

The never-stop policy is evaluated by conditioning on the chain: given the
chain path ``E[P_t] = p0 exp(int_0^t mu(X))`` integrates in closed form per
segment, and the tail beyond the horizon is the exact conditional
expectation from the two-state expectation formula.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DivergentEstimate, PreconditionViolated
from .model import ExtractionModel
from .regime import ChainPath, discounted_price_integral, x_roots
from .rng import stream

BLOCK = 4096  # antithetic pairs per random stream; fixed so results do not depend on thread count
KAPPA = 6.0
DEFAULT_DT_OBS = 1.0 / 365.0


@dataclass(frozen=True)
class ThresholdPolicy:
    """Stop at the first observation node with ``P <= thresholds[X]``.

    A threshold of 0 means the regime never stops.
    """

    thresholds: tuple

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if any(not (t >= 0 and math.isfinite(t)) for t in th):
            raise PreconditionViolated(f"thresholds must be finite and non-negative, got {th}")
        object.__setattr__(self, "thresholds", th)

    @property
    def never_stops(self) -> bool:
        return all(t == 0 for t in self.thresholds)

    @classmethod
    def never(cls, m: int = 2) -> "ThresholdPolicy":
        return cls((0.0,) * m)

    def scaled(self, factors) -> "ThresholdPolicy":
        return ThresholdPolicy(tuple(t * f for t, f in zip(self.thresholds, factors)))


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int
    horizon: float
    truncation_bias_bound: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stderr < 0 or self.n_paths < 2:
            raise PreconditionViolated("stderr must be >= 0 and n_paths >= 2")

    def agrees_with(self, value: float, n_sigma: float = 3.0) -> bool:
        return abs(self.mean - value) <= n_sigma * self.stderr + self.truncation_bias_bound

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths,
                "horizon": self.horizon, "truncation_bias_bound": self.truncation_bias_bound,
                "meta": dict(self.meta)}


@dataclass(frozen=True)
class PricePath:
    times: np.ndarray
    prices: np.ndarray
    states: np.ndarray  # regime in force at each node (right-continuous)


def thread_count() -> int:
    """Worker threads for block-parallel simulation, capped by ``REGIME_STOP_THREADS``."""
    n = os.cpu_count() or 1
    cap = os.environ.get("REGIME_STOP_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def simulate_price_path(model: ExtractionModel, p0: float, chain: ChainPath, dt_obs: float,
                        rng: np.random.Generator) -> PricePath:
    """Exact price samples on the union of the ``dt_obs`` lattice and the chain's jump times."""
    if not p0 > 0 or not dt_obs > 0:
        raise PreconditionViolated("p0 and dt_obs must be positive")
    T = chain.horizon
    lattice = np.arange(0.0, T, dt_obs)
    times = np.union1d(np.append(lattice, T), chain.jump_times)
    states = chain.states[np.searchsorted(chain.jump_times, times, side="right")]
    dt = np.diff(times)
    seg = states[:-1]  # regime on each interval (left endpoint, right-continuous chain)
    mu, sig = model.mu[seg], model.sigma[seg]
    z = rng.standard_normal(dt.size)
    incr = (mu - 0.5 * sig * sig) * dt + sig * np.sqrt(dt) * z
    logp = math.log(p0) + np.concatenate([[0.0], np.cumsum(incr)])
    return PricePath(times, np.exp(logp), states)


def terminal_prices(model: ExtractionModel, p0: float, start: int, t: float, n_paths: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Exact samples of ``P(t)``: given occupation times the log-price is Gaussian."""
    from .regime import sample_occupation_times

    occ = sample_occupation_times(model.generator(), start, t, n_paths, rng)
    nu = model.mu - 0.5 * model.sigma ** 2
    mean = occ @ nu
    var = occ @ (model.sigma ** 2)
    return p0 * np.exp(mean + np.sqrt(var) * rng.standard_normal(n_paths))


# --------------------------------------------------------------------------- #
# Threshold policies
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class _Setup:
    model: ExtractionModel
    p0: float
    start: int
    thr: np.ndarray  # (L, 2)
    a: float
    b: float
    K: float
    kprime: np.ndarray  # never-stop price slope per regime
    z2: float
    u: np.ndarray
    dt_obs: float
    horizon: float
    retire_tol: float
    antithetic: bool
    estimator: str


def _kprime(model):
    return np.array([discounted_price_integral(model, i) for i in (0, 1)])


def _default_horizon(model, scale_ratio=1e3):
    _, x2 = x_roots(model)
    return math.log(scale_ratio) / (model.r - x2)


def _phi(s: _Setup, i, p):
    return s.a * s.kprime[i] * p + s.b / s.model.r


def _stop_bound(s: _Setup):
    """Largest |phi_i(P) + K| over stop prices ``P`` in ``[0, thr_i]``, per policy."""
    out = []
    for th in s.thr:
        vals = [abs(_phi(s, i, 0.0) + s.K) for i in (0, 1)]
        vals += [abs(_phi(s, i, th[i]) + s.K) for i in (0, 1)]
        out.append(max(vals))
    return np.array(out)


@njit(nogil=True, cache=True)
def _path_kernel(u, n_units, init, X, t, nxt, logP, fprev, status, tau, Pst, Xst, bias, integ, immediate,
                 normals, exps, start, lp0, rates, nu, sig, logthr, logb, Mb, u_ratio, z2, a, b, K,
                 kprime, r, dt_obs, horizon, retire_tol, direct, kappa):
    """Advance units ``u, u+1, ...`` until done or a random buffer runs out.

    All per-unit state lives in the arrays, so a call can resume exactly
    where the previous one stopped.  Returns ``(next unit, normals used, exponentials used)``.
    """
    M2, L = logP.shape[1], logb.size
    pn = 0
    pe = 0
    lpn = np.empty(M2)
    while u < n_units:
        if not init[u]:
            if pe >= exps.size:
                return u, pn, pe
            X[u] = start
            t[u] = 0.0
            nxt[u] = exps[pe] / rates[start]
            pe += 1
            for m in range(M2):
                logP[u, m] = lp0
                fprev[u, m] = a * math.exp(lp0) + b
                for j in range(L):
                    if not math.isfinite(logb[j]):
                        status[u, m, j] = 2
                    elif lp0 <= logthr[j, start]:
                        status[u, m, j] = 1
                        immediate[u, m, j] = True
            init[u] = True
        while True:
            dist = math.inf
            for m in range(M2):
                for j in range(L):
                    if status[u, m, j] == 0:
                        dd = logP[u, m] - logb[j]
                        if dd < dist:
                            dist = dd
            if dist == math.inf:
                break
            if pn >= normals.size or pe >= exps.size:
                return u, pn, pe
            x = X[u]
            k = 1.0
            if not direct:
                d = dist if dist > 0.0 else 0.0
                sg = sig[x]
                nv = abs(nu[x])
                if nv > 0.0:
                    root = (-kappa * sg + math.sqrt(kappa * kappa * sg * sg + 4.0 * nv * d)) / (2.0 * nv)
                else:
                    root = d / (kappa * sg)
                k = max(1.0, math.floor(root * root / dt_obs))
            tu = t[u]
            lat = (math.floor(tu / dt_obs + 1e-9) + k) * dt_obs
            tn = min(lat, nxt[u], horizon)
            dt = tn - tu
            z = normals[pn]
            pn += 1
            sq = sig[x] * math.sqrt(dt) * z
            for m in range(M2):
                lpn[m] = logP[u, m] + nu[x] * dt + (sq if m == 0 else -sq)
            if direct:
                d0 = math.exp(-r * tu)
                d1 = math.exp(-r * tn)
                for m in range(M2):
                    fn = a * math.exp(lpn[m]) + b
                    area = 0.5 * dt * (d0 * fprev[u, m] + d1 * fn)
                    for j in range(L):
                        if status[u, m, j] == 0:
                            integ[u, m, j] += area
                    fprev[u, m] = fn
            xn = x
            if tn == nxt[u]:
                xn = 1 - x
                nxt[u] = tn + exps[pe] / rates[xn]
                pe += 1
            X[u] = xn
            t[u] = tn
            at_end = tn >= horizon
            disc = math.exp(-r * tn)
            for m in range(M2):
                logP[u, m] = lpn[m]
                for j in range(L):
                    if status[u, m, j] != 0:
                        continue
                    if lpn[m] <= logthr[j, xn]:
                        status[u, m, j] = 1
                        tau[u, m, j] = tn
                        Pst[u, m, j] = math.exp(lpn[m])
                        Xst[u, m, j] = xn
                        continue
                    if direct:
                        bnd = disc * (abs(a) * kprime[xn] * math.exp(lpn[m]) + abs(b) / r)
                        retire = at_end
                    else:
                        ratio = u_ratio[xn] * math.exp(z2 * (lpn[m] - logb[j]))
                        bnd = disc * Mb[j] * min(1.0, ratio)
                        retire = at_end or bnd < retire_tol
                    if retire:
                        status[u, m, j] = 2
                        bias[u, m, j] = bnd
        u += 1
    return u, pn, pe


_NORMAL_BUF = 1 << 18
_EXP_BUF = 1 << 15


def _simulate_block(s: _Setup, n_units: int, rng: np.random.Generator):
    """Joint simulation of all policies on common paths; returns per-unit payoffs and bias bounds."""
    model, r = s.model, s.model.r
    L = s.thr.shape[0]
    M2 = 2 if s.antithetic else 1
    with np.errstate(divide="ignore"):
        logthr = np.log(s.thr)  # -inf where a regime never stops
    logb = logthr.max(axis=1)
    direct = s.estimator == "direct"
    nu = model.mu - 0.5 * model.sigma ** 2
    shape = (n_units, M2, L)
    init = np.zeros(n_units, dtype=np.bool_)
    X = np.zeros(n_units, dtype=np.int64)
    t = np.zeros(n_units)
    nxt = np.zeros(n_units)
    logP = np.zeros((n_units, M2))
    fprev = np.zeros((n_units, M2))
    status = np.zeros(shape, dtype=np.int8)
    tau, Pst, bias, integ = (np.zeros(shape) for _ in range(4))
    Xst = np.zeros(shape, dtype=np.int64)
    immediate = np.zeros(shape, dtype=np.bool_)
    u = 0
    while u < n_units:
        normals = rng.standard_normal(_NORMAL_BUF)
        exps = rng.standard_exponential(_EXP_BUF)
        u, _, _ = _path_kernel(
            u, n_units, init, X, t, nxt, logP, fprev, status, tau, Pst, Xst, bias, integ, immediate,
            normals, exps, s.start, math.log(s.p0), model.rates, nu, model.sigma, logthr, logb,
            _stop_bound(s), s.u / s.u.min(), s.z2, s.a, s.b, s.K, s.kprime, r, s.dt_obs, s.horizon,
            s.retire_tol, direct, KAPPA)
    stopped = status == 1
    disc = np.exp(-r * tau)
    if direct:
        Y = integ - np.where(stopped, disc * s.K, 0.0)
    else:
        phi0 = _phi(s, s.start, s.p0)
        phist = s.a * s.kprime[Xst] * Pst + s.b / r
        Y = phi0 - np.where(stopped, disc * (phist + s.K), 0.0)
    Y = np.where(immediate, -s.K, Y)
    return Y.mean(axis=1), bias.mean(axis=1)


def _setup(model, p0, start, policies, dt_obs, horizon, retire_tol, antithetic, estimator,
           running, stop_cost):
    if not p0 > 0:
        raise PreconditionViolated("p0 must be positive")
    _, x2 = x_roots(model)
    if model.r <= x2:
        raise PreconditionViolated(
            f"r={model.r} <= x2={x2}: the expected discounted payoff is infinite for every policy")
    from .extraction import quartic_roots, w

    a, b = running if running is not None else (1.0, -model.C)
    K = model.K if stop_cost is None else float(stop_cost)
    thr = np.array([p.thresholds for p in policies], dtype=float)
    if thr.ndim != 2 or thr.shape[1] != 2:
        raise PreconditionViolated("policies need one threshold per regime")
    ex = quartic_roots(model)
    u = np.array([1.0, w(model, 0, ex.z2) / model.lambda1])
    kp = _kprime(model)
    T = _default_horizon(model) if horizon is None else float(horizon)
    if retire_tol is None:
        retire_tol = 1e-6 * (abs(b) / model.r + abs(K) + abs(a) * kp.max() * p0)
    return _Setup(model, float(p0), int(start), thr, float(a), float(b), K, kp, float(ex.z2), u,
                  float(dt_obs), T, float(retire_tol), bool(antithetic), estimator)


def _run_blocks(fn, n_units, seed, key):
    n_blocks = -(-n_units // BLOCK)
    sizes = [min(BLOCK, n_units - i * BLOCK) for i in range(n_blocks)]
    jobs = [(i, sizes[i]) for i in range(n_blocks)]
    workers = min(thread_count(), n_blocks)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda j: fn(j[1], stream(seed, *key, j[0])), jobs))
    else:
        parts = [fn(n, stream(seed, *key, i)) for i, n in jobs]
    return [np.concatenate(x) for x in zip(*parts)]


def _divergence_guard(y: np.ndarray):
    n = y.size
    if n < 64:
        return
    v = [np.var(y[: n // d]) for d in (8, 4, 2, 1)]
    if all(b > a for a, b in zip(v, v[1:])) and v[-1] > 8 * max(v[0], 1e-300):
        raise DivergentEstimate(
            f"sample variance grows with sample size ({v[0]:.3g} -> {v[-1]:.3g}); "
            "the estimator likely has infinite variance")


def _start_key(p0, start):
    # stable per-(p0, start) key so different starting points use different paths
    bits = int(np.float64(p0).view(np.uint64))
    return (int(start), bits >> 32, bits & 0xFFFFFFFF)


def estimate_policy_values(model: ExtractionModel, p0: float, start: int, policies, n_paths: int,
                           horizon: float | None = None, seed: int = 0,
                           dt_obs: float = DEFAULT_DT_OBS, antithetic: bool = True,
                           estimator: str = "martingale", retire_tol: float | None = None,
                           running=None, stop_cost=None):
    """Evaluate several policies on common random numbers.

    Returns ``(Y, bias, setup)`` where ``Y`` and ``bias`` have shape
    ``(n_units, n_policies)``; a unit is an antithetic pair when enabled.
    """
    if estimator not in ("martingale", "direct"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if n_paths < 2:
        raise PreconditionViolated("need at least two paths")
    s = _setup(model, p0, start, list(policies), dt_obs, horizon, retire_tol, antithetic,
               estimator, running, stop_cost)
    n_units = n_paths // 2 if antithetic else n_paths
    Y, bias = _run_blocks(lambda n, g: _simulate_block(s, n, g), n_units, seed, _start_key(p0, start))
    return Y, bias, s


def _never_stop_block(model, p0, start, T, a, b, n, rng):
    r = model.r
    mu, rates = model.mu, model.rates
    kp = _kprime(model)
    X = np.full(n, start, dtype=np.int64)
    t = np.zeros(n)
    A = np.zeros(n)  # int_0^t (mu(X) - r) ds
    integ = np.zeros(n)
    act = np.arange(n)
    while act.size:
        Xa = X[act]
        hold = rng.exponential(1.0, act.size) / rates[Xa]
        dt = np.minimum(hold, T - t[act])
        c = mu[Xa] - r
        seg = np.where(np.abs(c * dt) > 1e-12, np.expm1(c * dt) / np.where(c == 0, 1.0, c), dt)
        integ[act] += np.exp(A[act]) * seg
        A[act] += c * dt
        t[act] += dt
        done = t[act] >= T
        X[act[~done]] = 1 - Xa[~done]
        act = act[~done]
    tail = np.exp(A) * kp[X]
    return (a * p0 * (integ + tail) + b / r,)


def estimate_policy_value(model: ExtractionModel, p0: float, start: int, policy: ThresholdPolicy,
                          n_paths: int, horizon: float | None = None, seed: int = 0,
                          dt_obs: float = DEFAULT_DT_OBS, antithetic: bool = True,
                          estimator: str | None = None, retire_tol: float | None = None,
                          running=None, stop_cost=None) -> MCEstimate:
    """Monte Carlo value of ``policy`` started in regime ``start`` at price ``p0``.

    ``running = (a, b)`` sets the running payoff ``a p + b`` (default
    ``p - C``) and ``stop_cost`` the charge ``K`` at stopping.  The estimator
    defaults to ``"martingale"`` for threshold policies and ``"conditional"``
    (chain-only, exact given the chain) for the never-stop policy.
    """
    if estimator is None:
        estimator = "conditional" if policy.never_stops else "martingale"
    meta = {"estimator": estimator, "dt_obs": dt_obs, "seed": seed, "antithetic": antithetic,
            "p0": p0, "start": start, "thresholds": list(policy.thresholds)}
    if estimator == "conditional":
        if not policy.never_stops:
            raise PreconditionViolated("the conditional estimator only applies to the never-stop policy")
        if not p0 > 0:
            raise PreconditionViolated("p0 must be positive")
        _, x2 = x_roots(model)
        if model.r <= x2:
            raise PreconditionViolated(f"r={model.r} <= x2={x2}: value is infinite")
        T = _default_horizon(model, 10.0) if horizon is None else float(horizon)
        a, b = running if running is not None else (1.0, -model.C)
        (Y,) = _run_blocks(lambda n, g: _never_stop_block(model, p0, start, T, a, b, n, g),
                           n_paths, seed, _start_key(p0, start))
        return MCEstimate(float(np.mean(Y)), float(np.std(Y, ddof=1) / math.sqrt(Y.size)),
                          int(n_paths), T, 0.0, meta)
    Y, bias, s = estimate_policy_values(model, p0, start, [policy], n_paths, horizon, seed, dt_obs,
                                        antithetic, estimator, retire_tol, running, stop_cost)
    y = Y[:, 0]
    if estimator == "direct":
        _divergence_guard(y)
    n_units = y.size
    se = float(np.std(y, ddof=1) / math.sqrt(n_units)) if n_units > 1 else 0.0
    meta["retire_tol"] = s.retire_tol
    return MCEstimate(float(np.mean(y)), se, int(n_units * (2 if antithetic else 1)), s.horizon,
                      float(np.mean(bias[:, 0])), meta)


@dataclass(frozen=True)
class Comparison:
    policy: ThresholdPolicy
    mean: float
    diff: float  # base minus perturbed
    paired_stderr: float
    bias_bound: float
    passed: bool
    strict: bool  # base better by more than 3 paired standard errors


@dataclass(frozen=True)
class DominanceReport:
    base: ThresholdPolicy
    base_mean: float
    comparisons: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.comparisons)

    def to_dict(self) -> dict:
        return {"base": list(self.base.thresholds), "base_mean": self.base_mean, "passed": self.passed,
                "comparisons": [{"thresholds": list(c.policy.thresholds), "mean": c.mean, "diff": c.diff,
                                 "paired_stderr": c.paired_stderr, "bias_bound": c.bias_bound,
                                 "passed": c.passed, "strict": c.strict} for c in self.comparisons]}


def policy_dominance_check(model: ExtractionModel, p0: float, start: int, base: ThresholdPolicy,
                           perturbations, n_paths: int, seed: int = 0, n_sigma: float = 3.0,
                           **kwargs) -> DominanceReport:
    """Paired comparison of ``base`` against each alternative policy on common paths.

    ``perturbations`` holds either policies or per-regime scale factors for
    the base thresholds.  A comparison passes when
    ``base >= alternative - n_sigma * paired_stderr - bias bounds``.
    """
    from .extraction import Classification, classify

    if classify(model) is not Classification.THRESHOLD:
        raise PreconditionViolated("dominance check needs a model with optimal thresholds")
    alts = [p if isinstance(p, ThresholdPolicy) else base.scaled(p) for p in perturbations]
    Y, bias, _ = estimate_policy_values(model, p0, start, [base, *alts], n_paths, seed=seed, **kwargs)
    out = []
    for j, pol in enumerate(alts, start=1):
        d = Y[:, 0] - Y[:, j]
        se = float(np.std(d, ddof=1) / math.sqrt(d.size)) if np.any(d != d[0]) else 0.0
        bb = float(np.mean(bias[:, 0]) + np.mean(bias[:, j]))
        dm = float(np.mean(d))
        out.append(Comparison(pol, float(np.mean(Y[:, j])), dm, se, bb,
                              dm >= -n_sigma * se - bb, dm > n_sigma * se + bb))
    return DominanceReport(base, float(np.mean(Y[:, 0])), tuple(out))
