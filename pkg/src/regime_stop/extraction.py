"""Closed-form solution of the two-regime extraction problem.

Each value function ``J_i`` is piecewise of the form

    slope * p + intercept + sum_j coef_j * p ** exponent_j ,

with a flat ``-K`` piece on the stopping interval ``(0, p_i*]``.  The
thresholds solve the smooth-pasting (value matching plus C^1) conditions.
When both thresholds differ, the regime with the lower threshold keeps
producing on a middle band where the other regime has already stopped; its
value there is built from the roots of that regime's own quadratic ``w_i``.
Above the larger threshold both regimes continue and the homogeneous part
uses the two negative roots of the quartic ``w_1(z) w_2(z) = lambda1 lambda2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .errors import (
    AmbiguousCase,
    InternalError,
    NoCaseConverged,
    PreconditionViolated,
    RootBracketingFailed,
)
from .model import ExtractionModel
from .regime import x_roots


class Classification(str, Enum):
    INFINITE_VALUE = "InfiniteValue"
    NEVER_STOP = "NeverStop"
    THRESHOLD = "Threshold"


class Case(str, Enum):
    CASE1 = "Case1"  # regime 1 stops at a lower price than regime 2
    CASE2 = "Case2"
    CASE3 = "Case3"  # common threshold


ROOT_TOL = 1e-10
SYSTEM_TOL = 1e-8
CASE3_TOL = 1e-8


# --------------------------------------------------------------------------- #
# Exponents
# --------------------------------------------------------------------------- #

def w(model: ExtractionModel, regime: int, z):
    """w_i(z) = r + lambda_i - mu_i z - sigma_i^2 z (z - 1) / 2."""
    lam, mu, sig = model.rates[regime], model.mu[regime], model.sigma[regime]
    return model.r + lam - mu * z - 0.5 * sig * sig * z * (z - 1.0)


def quartic_coefficients(model: ExtractionModel) -> np.ndarray:
    """Coefficients of Q(z) = w_1(z) w_2(z) - lambda1 lambda2, lowest degree first."""
    polys = []
    for i in (0, 1):
        half = 0.5 * model.sigma[i] ** 2
        polys.append(np.polynomial.Polynomial([model.r + model.rates[i], half - model.mu[i], -half]))
    q = polys[0] * polys[1] - model.lambda1 * model.lambda2
    return q.coef


def quartic(model: ExtractionModel, z):
    return w(model, 0, z) * w(model, 1, z) - model.lambda1 * model.lambda2


def _quartic_prime(model, z):
    d = []
    for i in (0, 1):
        sig2 = model.sigma[i] ** 2
        d.append(-model.mu[i] - sig2 * z + 0.5 * sig2)
    return d[0] * w(model, 1, z) + w(model, 0, z) * d[1]


def _quadratic_roots(a: float, b: float, c: float) -> tuple[float, float]:
    disc = b * b - 4.0 * a * c
    if disc <= 0:
        raise InternalError(f"quadratic has no distinct real roots (disc={disc})")
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    r1, r2 = q / a, c / q
    return min(r1, r2), max(r1, r2)


def w_roots(model: ExtractionModel, regime: int) -> tuple[float, float]:
    """Both roots of ``w_i``; one negative and one positive since ``r + lambda_i > 0``."""
    half = 0.5 * model.sigma[regime] ** 2
    return _quadratic_roots(-half, half - model.mu[regime], model.r + model.rates[regime])


@dataclass(frozen=True)
class ExponentSet:
    z1: float
    z2: float
    z3: float
    z4: float
    y1: float
    y2: float
    ybar1: float
    ybar2: float
    b1: float
    b2: float
    quartic_coef: tuple

    @property
    def z(self) -> tuple[float, float, float, float]:
        return (self.z1, self.z2, self.z3, self.z4)

    def residual_scale(self) -> float:
        return max(1.0, max(abs(c) for c in self.quartic_coef))


def _polish(model, z, lo, hi):
    for _ in range(3):
        d = _quartic_prime(model, z)
        if d == 0:
            break
        z_new = z - quartic(model, z) / d
        if not lo < z_new < hi or abs(quartic(model, z_new)) > abs(quartic(model, z)):
            break
        z = z_new
    return z


def quartic_roots(model: ExtractionModel) -> ExponentSet:
    """Four real roots of Q with ``z1 < z2 < 0 < z3 < z4``.

    The roots of ``w_1`` make Q negative while Q(0) > 0 and Q grows without
    bound on both sides, which yields four sign-change brackets.

    Raises
    ------
    PreconditionViolated
        when ``r <= x2``.
    """
    _, x2 = x_roots(model)
    if model.r <= x2:
        raise PreconditionViolated(f"r={model.r} <= x2={x2}: value is infinite")
    y1, y2 = w_roots(model, 0)
    yb1, yb2 = w_roots(model, 1)
    if not quartic(model, 0.0) > 0:
        raise RootBracketingFailed("Q(0) is not positive")
    if not (quartic(model, y1) < 0 and quartic(model, y2) < 0):
        raise RootBracketingFailed("Q is not negative at the roots of w_1 (lambda1*lambda2 = 0?)")
    lo, step = y1, max(1.0, abs(y1))
    for _ in range(200):
        lo -= step
        step *= 2.0
        if quartic(model, lo) > 0:
            break
    else:
        raise RootBracketingFailed("no sign change left of the first root of w_1")
    hi, step = y2, max(1.0, abs(y2))
    for _ in range(200):
        hi += step
        step *= 2.0
        if quartic(model, hi) > 0:
            break
    else:
        raise RootBracketingFailed("no sign change right of the second root of w_1")
    f = lambda z: quartic(model, z)
    brackets = [(lo, y1), (y1, 0.0), (0.0, y2), (y2, hi)]
    zs = []
    for a, b in brackets:
        z = brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        zs.append(_polish(model, z, a, b))
    coef = quartic_coefficients(model)
    scale = max(1.0, float(np.abs(coef).max()))
    for z in zs:
        if abs(quartic(model, z)) > ROOT_TOL * scale:
            raise InternalError(f"quartic residual {quartic(model, z):.3e} at z={z}")
    z1, z2, z3, z4 = zs
    if not z1 < z2 < 0 < z3 < z4:
        raise InternalError(f"root ordering violated: {zs}")
    return ExponentSet(z1, z2, z3, z4, y1, y2, yb1, yb2,
                       b1=1.0, b2=float(w(model, 0, z3) / model.lambda1),
                       quartic_coef=tuple(float(c) for c in coef))


# --------------------------------------------------------------------------- #
# Classification and never-stop values
# --------------------------------------------------------------------------- #

def classify(model: ExtractionModel) -> Classification:
    """Boundary r == x2 counts as InfiniteValue and C == rK as NeverStop."""
    _, x2 = x_roots(model)
    if model.r <= x2:
        return Classification.INFINITE_VALUE
    if model.C <= model.r * model.K:
        return Classification.NEVER_STOP
    return Classification.THRESHOLD


def k_coefficients(model: ExtractionModel) -> tuple[float, float]:
    """Never-stop price slopes ``(k1, k2)``; regime 1 earns ``k2`` per unit price.

    ``k_i = (r + l1 + l2 - mu_i) / ((r + l1 - mu1)(r + l2 - mu2) - l1 l2)``.
    """
    _, x2 = x_roots(model)
    if model.r <= x2:
        raise PreconditionViolated(f"r={model.r} <= x2={x2}")
    r, l1, l2, m1, m2 = model.r, model.lambda1, model.lambda2, model.mu1, model.mu2
    den = (r + l1 - m1) * (r + l2 - m2) - l1 * l2
    return (r + l1 + l2 - m1) / den, (r + l1 + l2 - m2) / den


def lipschitz_bound(model: ExtractionModel, regime: int) -> float:
    """Lipschitz constant of ``J_regime`` from the expected discounted price."""
    x1, x2 = x_roots(model)
    r = model.r
    if r <= x2:
        raise PreconditionViolated(f"r={r} <= x2={x2}")
    mu = model.mu[regime]
    return ((x2 - mu) / (r - x1) + (mu - x1) / (r - x2)) / (x2 - x1)


# --------------------------------------------------------------------------- #
# Piecewise value functions
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Piece:
    """``slope * p + intercept + sum(coef * p ** exponent)`` on ``(lo, hi]``.

    An unbounded piece has ``hi = inf``, serialised as ``null``.
    """

    lo: float
    hi: float
    slope: float
    intercept: float
    coefs: tuple = ()
    exponents: tuple = ()
    kind: str = "continue"

    def value(self, p):
        out = self.slope * p + self.intercept
        for c, e in zip(self.coefs, self.exponents):
            out = out + c * np.exp(e * np.log(p))
        return out

    def derivative(self, p):
        out = self.slope + 0.0 * p
        for c, e in zip(self.coefs, self.exponents):
            out = out + c * e * np.exp((e - 1.0) * np.log(p))
        return out

    def second_derivative(self, p):
        out = 0.0 * p
        for c, e in zip(self.coefs, self.exponents):
            out = out + c * e * (e - 1.0) * np.exp((e - 2.0) * np.log(p))
        return out

    def to_dict(self) -> dict:
        return {
            "lo": self.lo, "hi": None if math.isinf(self.hi) else self.hi,
            "slope": self.slope, "intercept": self.intercept,
            "coefs": list(self.coefs), "exponents": list(self.exponents), "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Piece":
        hi = math.inf if d["hi"] is None else float(d["hi"])
        return cls(float(d["lo"]), hi, float(d["slope"]), float(d["intercept"]),
                   tuple(float(c) for c in d["coefs"]), tuple(float(e) for e in d["exponents"]),
                   d.get("kind", "continue"))


def _stop_piece(K, hi):
    return Piece(0.0, hi, 0.0, -K, kind="stop")


@dataclass(frozen=True)
class ClosedFormSolution:
    """Solved extraction problem; regimes and thresholds use the caller's labels."""

    model: ExtractionModel
    classification: Classification
    case: Case | None = None
    thresholds: tuple | None = None
    k1: float | None = None
    k2: float | None = None
    x1: float = float("nan")
    x2: float = float("nan")
    exponents: ExponentSet | None = None
    coefficients: dict = field(default_factory=dict)
    pieces: tuple = ()
    swapped: bool = False
    residuals: dict = field(default_factory=dict)

    def value(self, regime: int, p):
        return evaluate_value(self, regime, p)

    def to_dict(self) -> dict:
        ex = None
        if self.exponents is not None:
            ex = {k: getattr(self.exponents, k) for k in
                  ("z1", "z2", "z3", "z4", "y1", "y2", "ybar1", "ybar2", "b1", "b2")}
            ex["quartic_coef"] = list(self.exponents.quartic_coef)
        return {
            "model": self.model.to_dict(),
            "classification": self.classification.value,
            "case": self.case.value if self.case else None,
            "thresholds": list(self.thresholds) if self.thresholds else None,
            "k1": self.k1, "k2": self.k2, "x1": self.x1, "x2": self.x2,
            "exponents": ex,
            "coefficients": dict(self.coefficients),
            "pieces": [[pc.to_dict() for pc in reg] for reg in self.pieces],
            "swapped": self.swapped,
            "residuals": dict(self.residuals),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClosedFormSolution":
        ex = d.get("exponents")
        exps = None
        if ex is not None:
            exps = ExponentSet(**{k: float(v) for k, v in ex.items() if k != "quartic_coef"},
                               quartic_coef=tuple(float(c) for c in ex["quartic_coef"]))
        return cls(
            model=ExtractionModel(**d["model"]),
            classification=Classification(d["classification"]),
            case=Case(d["case"]) if d.get("case") else None,
            thresholds=tuple(d["thresholds"]) if d.get("thresholds") else None,
            k1=d.get("k1"), k2=d.get("k2"), x1=d["x1"], x2=d["x2"],
            exponents=exps,
            coefficients={k: float(v) for k, v in d.get("coefficients", {}).items()},
            pieces=tuple(tuple(Piece.from_dict(pc) for pc in reg) for reg in d.get("pieces", ())),
            swapped=bool(d.get("swapped", False)),
            residuals={k: float(v) for k, v in d.get("residuals", {}).items()},
        )


def evaluate_value(solution: ClosedFormSolution, regime: int, p):
    """Value of the optimally stopped problem started in ``regime`` at price ``p``.

    Vectorised over ``p``.
    """
    if solution.classification is Classification.INFINITE_VALUE:
        raise PreconditionViolated("value is +infinity (r <= x2)")
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0)):
        raise PreconditionViolated("prices must be positive")
    out = np.empty_like(arr)
    for pc in solution.pieces[regime]:
        sel = (arr > pc.lo) & (arr <= pc.hi)
        if np.any(sel):
            out[sel] = pc.value(arr[sel])
    return float(out) if out.ndim == 0 else out


def evaluate_derivative(solution: ClosedFormSolution, regime: int, p):
    arr = np.asarray(p, dtype=float)
    out = np.empty_like(arr)
    for pc in solution.pieces[regime]:
        sel = (arr > pc.lo) & (arr <= pc.hi)
        if np.any(sel):
            out[sel] = pc.derivative(arr[sel])
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- #
# Single regime
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class SingleRegimeSolution:
    classification: Classification
    p_star: float | None
    exponent: float | None = None
    coef: float | None = None
    mu: float = 0.0
    r: float = 1.0
    C: float = 0.0
    K: float = 0.0

    def value(self, p):
        if self.classification is Classification.INFINITE_VALUE:
            raise PreconditionViolated("value is +infinity (r <= mu)")
        p = np.asarray(p, dtype=float)
        lin = p / (self.r - self.mu) - self.C / self.r
        if self.p_star is None:
            out = lin
        else:
            cont = lin + self.coef * np.exp(self.exponent * np.log(p))
            out = np.where(p <= self.p_star, -self.K, cont)
        return float(out) if out.ndim == 0 else out


def single_regime_threshold(mu: float, sigma: float, r: float, C: float, K: float) -> SingleRegimeSolution:
    """Optimal threshold when the price is a plain GBM.

    Above the threshold ``V = p/(r-mu) - C/r + A p^gamma`` with ``gamma`` the
    negative root of ``r - mu g - sigma^2 g (g - 1)/2``.  Value matching and
    smooth pasting give ``p* = (r - mu)(C/r - K) gamma / (gamma - 1)``.
    """
    if r <= mu:
        return SingleRegimeSolution(Classification.INFINITE_VALUE, None, mu=mu, r=r, C=C, K=K)
    if C <= r * K:
        return SingleRegimeSolution(Classification.NEVER_STOP, None, mu=mu, r=r, C=C, K=K)
    half = 0.5 * sigma * sigma
    gamma, _ = _quadratic_roots(-half, half - mu, r)
    p_star = (r - mu) * (C / r - K) * gamma / (gamma - 1.0)
    coef = -p_star / ((r - mu) * gamma) * p_star ** (-gamma)
    return SingleRegimeSolution(Classification.THRESHOLD, p_star, gamma, coef, mu, r, C, K)


# --------------------------------------------------------------------------- #
# Threshold cases
# --------------------------------------------------------------------------- #

def _band_system(model: ExtractionModel, ex: ExponentSet, kk: tuple, lead: int):
    """Auxiliary matrices for the case where regime ``lead`` has the lower threshold.

    ``lead = 0`` gives the unbarred system, ``lead = 1`` the barred one.
    Returns ``(a_lo, b_lo, a_hi, b_hi, y)`` such that the coefficients of the
    band piece satisfy ``A = p_lo^-y (a_lo p_lo + b_lo) = p_hi^-y (a_hi p_hi + b_hi)``.
    """
    other = 1 - lead
    r, C, K = model.r, model.C, model.K
    lam, mu = model.rates[lead], model.mu[lead]
    y = np.array([ex.y1, ex.y2] if lead == 0 else [ex.ybar1, ex.ybar2])
    z = np.array([ex.z1, ex.z2])
    My = np.array([[1.0, 1.0], y])
    Mz = np.array([[1.0, 1.0], z])
    wz = w(model, lead, z)
    W = Mz * wz  # columns scaled by w_lead(z_j)
    ones = np.ones(2)
    g = 1.0 / (r + lam - mu)
    a_lo = np.linalg.solve(My, -g * ones)
    b_lo = np.linalg.solve(My, np.array([(C - r * K) / (r + lam), 0.0]))
    a_hi = np.linalg.solve(My, (kk[other] - g) * ones - lam * Mz @ np.linalg.solve(W, kk[lead] * ones))
    b_hi = np.linalg.solve(
        My,
        np.array([(lam * K + C) / (r + lam) - C / r, 0.0])
        + lam * Mz @ np.linalg.solve(W, np.array([(C - r * K) / r, 0.0])),
    )
    return a_lo, b_lo, a_hi, b_hi, y, z, W


def _band_residual(sys_, p_lo, p_hi):
    a_lo, b_lo, a_hi, b_hi, y, _, _ = sys_
    # both sides multiplied by p_lo^y: compares A_j p_lo^y_j in currency units
    return (a_lo * p_lo + b_lo) - np.exp(y * (np.log(p_lo) - np.log(p_hi))) * (a_hi * p_hi + b_hi)


def _band_pieces(model, ex, kk, lead, sys_, p_lo, p_hi):
    a_lo, b_lo, a_hi, b_hi, y, z, W = sys_
    other = 1 - lead
    r, C, K = model.r, model.C, model.K
    lam, mu = model.rates[lead], model.mu[lead]
    A = np.exp(-y * math.log(p_lo)) * (a_lo * p_lo + b_lo)
    B = lam * np.exp(-z * math.log(p_hi)) * np.linalg.solve(
        W, np.array([-kk[lead] * p_hi + (C - r * K) / r, -kk[lead] * p_hi]))
    band = Piece(p_lo, p_hi, 1.0 / (r + lam - mu), -(lam * K + C) / (r + lam),
                 tuple(A), tuple(y), kind="band")
    lead_outer = Piece(p_hi, math.inf, kk[other], -C / r, tuple(B), tuple(z))
    other_outer = Piece(p_hi, math.inf, kk[lead], -C / r, tuple(w(model, lead, z) / lam * B), tuple(z))
    pieces = [None, None]
    pieces[lead] = (_stop_piece(K, p_lo), band, lead_outer)
    pieces[other] = (_stop_piece(K, p_hi), other_outer)
    bar = "" if lead == 0 else "bar"
    coefs = {f"A{bar}1": A[0], f"A{bar}2": A[1], f"B{bar}1": B[0], f"B{bar}2": B[1]}
    return tuple(pieces), {k: float(v) for k, v in coefs.items()}


def _case3(model, ex, kk):
    r, C, K = model.r, model.C, model.K
    z = np.array([ex.z1, ex.z2])
    Mz = np.array([[1.0, 1.0], z])
    W = Mz * w(model, 0, z)
    ones = np.ones(2)
    e0 = np.array([(C - r * K) / r, 0.0])
    a1 = np.linalg.solve(Mz, -kk[1] * ones)
    b1 = np.linalg.solve(Mz, e0)
    a2 = model.lambda1 * np.linalg.solve(W, -kk[0] * ones)
    b2 = model.lambda1 * np.linalg.solve(W, e0)
    den = a1[0] - a2[0]
    if den == 0:
        return None, math.inf, None
    p = (b2[0] - b1[0]) / den
    consistency = abs((a1[1] - a2[1]) * p + (b1[1] - b2[1]))
    return p, consistency, (a1, b1, a2, b2)


def _case3_pieces(model, ex, kk, p, aux):
    a1, b1, _, _ = aux
    z = np.array([ex.z1, ex.z2])
    Bt = np.exp(-z * math.log(p)) * (a1 * p + b1)
    C, r, K = model.C, model.r, model.K
    p0 = (_stop_piece(K, p), Piece(p, math.inf, kk[1], -C / r, tuple(Bt), tuple(z)))
    p1 = (_stop_piece(K, p), Piece(p, math.inf, kk[0], -C / r, tuple(w(model, 0, z) / model.lambda1 * Bt), tuple(z)))
    return (p0, p1), {"Btilde1": float(Bt[0]), "Btilde2": float(Bt[1])}


def _newton(F: Callable, x0, scale, max_iter=100, tol=ROOT_TOL):
    """Damped Newton with central-difference Jacobian; keeps iterates positive."""
    x = np.array(x0, dtype=float)
    fx = F(x)
    for it in range(max_iter):
        if np.max(np.abs(fx)) <= tol * scale:
            return x, fx, True
        J = np.empty((2, 2))
        for j in range(2):
            h = 1e-6 * max(1.0, abs(x[j]))
            h = min(h, 0.5 * x[j])
            e = np.zeros(2)
            e[j] = h
            J[:, j] = (F(x + e) - F(x - e)) / (2 * h)
        try:
            dx = np.linalg.solve(J, -fx)
        except np.linalg.LinAlgError:
            return x, fx, False
        t = 1.0
        norm0 = np.max(np.abs(fx))
        while t > 1e-8:
            xn = x + t * dx
            if np.all(xn > 0):
                fn = F(xn)
                if np.all(np.isfinite(fn)) and np.max(np.abs(fn)) < norm0:
                    break
            t *= 0.5
        else:
            return x, fx, False
        x, fx = xn, fn
    return x, fx, bool(np.max(np.abs(fx)) <= tol * scale)


def _continuity_residuals(pieces, K):
    """Value and slope jumps at every internal breakpoint (smooth pasting check)."""
    worst = 0.0
    for reg in pieces:
        for left, right in zip(reg[:-1], reg[1:]):
            p = left.hi
            worst = max(worst, abs(left.value(p) - right.value(p)),
                        abs(left.derivative(p) - right.derivative(p)) * p)
    return worst


def _admissible(model, kk, pieces, thresholds, scale):
    """Reject spurious roots: obstacle, stopped-regime inequality, threshold bounds."""
    C, r, K = model.C, model.r, model.K
    cap = (C - r * K) * (1 + 1e-9)
    if not all(0 < t <= cap for t in thresholds):
        return False
    lo, hi = min(thresholds), max(thresholds)
    grid = np.geomspace(lo * 0.5, max(hi * 20, C), 600)
    for i in (0, 1):
        v = np.empty_like(grid)
        for pc in pieces[i]:
            sel = (grid > pc.lo) & (grid <= pc.hi)
            v[sel] = pc.value(grid[sel])
        if np.any(v < -K - 1e-9 * scale):
            return False
        # continuation must stay strictly above the obstacle inside its own interior
        inner = (grid > thresholds[i] * (1 + 1e-3))
        if np.any(v[inner] <= -K):
            return False
    if hi > lo:
        lead = 0 if thresholds[0] < thresholds[1] else 1
        other = 1 - lead
        band = np.geomspace(lo, hi, 200)[1:]
        ja = np.empty_like(band)
        for pc in pieces[lead]:
            sel = (band > pc.lo) & (band <= pc.hi)
            ja[sel] = pc.value(band[sel])
        lam = model.rates[other]
        ineq = (r + lam) * (-K) - lam * ja - band + C
        if np.any(ineq < -1e-9 * scale):
            return False
    return True


def _initial_guess(model, lead):
    cap = model.C - model.r * model.K
    singles = [single_regime_threshold(model.mu[i], model.sigma[i], model.r, model.C, model.K).p_star
               for i in (0, 1)]
    known = [s for s in singles if s is not None]
    fallback = min(known) if known else 0.5 * cap
    singles = [s if s is not None else 0.5 * fallback for s in singles]
    lo, hi = sorted(singles)
    if hi <= lo * (1 + 1e-6):
        lo, hi = 0.8 * lo, 1.2 * hi
    return np.array([lo, min(hi, cap)])


def _solve_band(model, ex, kk, lead, scale):
    """Solve the lead-regime band system; returns list of admissible solutions."""
    sys_ = _band_system(model, ex, kk, lead)

    def F(x):
        return _band_residual(sys_, x[0], x[1])

    def accept(x):
        p_lo, p_hi = x
        if not p_lo < p_hi:
            return None
        pieces, coefs = _band_pieces(model, ex, kk, lead, sys_, p_lo, p_hi)
        th = [0.0, 0.0]
        th[lead], th[1 - lead] = p_lo, p_hi
        if not _admissible(model, kk, pieces, th, scale):
            return None
        return tuple(th), pieces, coefs

    best = math.inf
    x, fx, ok = _newton(F, _initial_guess(model, lead), scale)
    best = min(best, float(np.max(np.abs(fx))) / scale)
    if ok:
        res = accept(x)
        if res is not None:
            return [res], best
    # fallback: scan a log-log grid of the ordered triangle for joint sign changes
    cap = model.C - model.r * model.K
    g = np.geomspace(cap * 1e-6, cap, 160)
    P_lo, P_hi = np.meshgrid(g, g, indexing="ij")
    a_lo, b_lo, a_hi, b_hi, y = sys_[:5]
    with np.errstate(all="ignore"):
        R = np.stack([(a_lo[j] * P_lo + b_lo[j])
                      - np.exp(y[j] * (np.log(P_lo) - np.log(P_hi))) * (a_hi[j] * P_hi + b_hi[j])
                      for j in range(2)])
    corners = np.stack([R[:, :-1, :-1], R[:, 1:, :-1], R[:, :-1, 1:], R[:, 1:, 1:]])
    straddle = (np.all(np.isfinite(corners), axis=0)
                & (corners.min(axis=0) <= 0) & (corners.max(axis=0) >= 0)).all(axis=0)
    # diagonal cells stay in: a thin band has both thresholds in one cell
    straddle &= np.triu(np.ones_like(straddle), k=0).astype(bool)
    sols = []
    for i, j in zip(*np.nonzero(straddle)):
        x0 = np.array([math.sqrt(g[i] * g[i + 1]), math.sqrt(g[j] * g[j + 1])])
        x, fx, ok = _newton(F, x0, scale)
        best = min(best, float(np.max(np.abs(fx))) / scale)
        if ok:
            res = accept(x)
            if res is not None and not any(np.allclose(res[0], s[0], rtol=1e-7) for s in sols):
                sols.append(res)
    return sols, best


def _map_labels(sol: ClosedFormSolution) -> ClosedFormSolution:
    if not sol.swapped:
        return sol
    th = None if sol.thresholds is None else (sol.thresholds[1], sol.thresholds[0])
    case = sol.case
    if case is Case.CASE1:
        case = Case.CASE2
    elif case is Case.CASE2:
        case = Case.CASE1
    k1, k2 = (sol.k2, sol.k1) if sol.k1 is not None else (None, None)
    pieces = (sol.pieces[1], sol.pieces[0]) if sol.pieces else ()
    return ClosedFormSolution(sol.model.swapped(), sol.classification, case, th, k1, k2,
                              sol.x1, sol.x2, sol.exponents, sol.coefficients, pieces, True,
                              sol.residuals)


def solve(model: ExtractionModel) -> ClosedFormSolution:
    """Full analytic solution with regime classification and case selection.

    When ``mu1 > mu2`` the regimes are relabelled internally; the returned
    thresholds, pieces and case refer to the caller's labels and
    ``swapped`` records the relabelling (exponents and coefficient names then
    refer to the internal ordering).
    """
    swapped = not model.is_canonical
    m = model.swapped() if swapped else model
    x1, x2 = x_roots(m)
    cls = classify(m)
    if cls is Classification.INFINITE_VALUE:
        return _map_labels(ClosedFormSolution(m, cls, x1=x1, x2=x2, swapped=swapped))
    kk = k_coefficients(m)
    ex = quartic_roots(m)
    C, r, K = m.C, m.r, m.K
    if cls is Classification.NEVER_STOP:
        pieces = ((Piece(0.0, math.inf, kk[1], -C / r),), (Piece(0.0, math.inf, kk[0], -C / r),))
        return _map_labels(ClosedFormSolution(m, cls, None, None, kk[0], kk[1], x1, x2, ex,
                                              {}, pieces, swapped))
    cap = C - r * K
    scale = C / r + abs(K) + max(kk) * cap

    accepted = []
    residuals = {}
    p3, consistency, aux = _case3(m, ex, kk)
    residuals["Case3"] = consistency / (C / r + abs(K))
    if p3 is not None and p3 > 0 and consistency <= CASE3_TOL * (C / r + abs(K)):
        pieces, coefs = _case3_pieces(m, ex, kk, p3, aux)
        if _admissible(m, kk, pieces, (p3, p3), scale):
            accepted.append((Case.CASE3, (p3, p3), pieces, coefs))
    for case, lead in ((Case.CASE1, 0), (Case.CASE2, 1)):
        sols, best = _solve_band(m, ex, kk, lead, scale)
        residuals[case.value] = best
        for th, pieces, coefs in sols:
            if accepted and accepted[0][0] is Case.CASE3 and np.allclose(th, accepted[0][1], rtol=1e-6):
                continue
            accepted.append((case, th, pieces, coefs))
    if not accepted:
        raise NoCaseConverged("no threshold case produced an admissible solution", residuals)
    if len(accepted) > 1:
        raise AmbiguousCase(f"several cases pass tolerance: {[(a[0].value, a[1]) for a in accepted]}")
    case, th, pieces, coefs = accepted[0]
    cont = _continuity_residuals(pieces, K)
    residuals["smooth_pasting"] = cont / scale
    if cont > SYSTEM_TOL * scale:
        raise InternalError(f"smooth-pasting residual {cont:.3e} exceeds tolerance")
    sol = ClosedFormSolution(m, cls, case, tuple(float(t) for t in th), kk[0], kk[1], x1, x2, ex,
                             coefs, pieces, swapped, residuals)
    return _map_labels(sol)
