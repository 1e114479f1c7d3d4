"""The two-regime resource extraction model.

The spot price follows a regime-switching geometric Brownian motion

    dP = mu(X) P dt + sigma(X) P dB,

and the firm collects ``P - C`` per unit time until it stops at cost ``K``.
Regimes are indexed 0 and 1 throughout the package; switching rates are
``lambda1`` (0 -> 1) and ``lambda2`` (1 -> 0).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import PreconditionViolated


@dataclass(frozen=True)
class ExtractionModel:
    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    lambda1: float
    lambda2: float
    r: float
    C: float
    K: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise PreconditionViolated(f"{f.name} must be a finite number, got {v!r}")
            object.__setattr__(self, f.name, float(v))
        for name in ("sigma1", "sigma2", "lambda1", "lambda2", "C", "r"):
            if getattr(self, name) <= 0.0:
                raise PreconditionViolated(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def mu(self) -> np.ndarray:
        return np.array([self.mu1, self.mu2])

    @property
    def sigma(self) -> np.ndarray:
        return np.array([self.sigma1, self.sigma2])

    @property
    def rates(self) -> np.ndarray:
        """Leaving rate of each regime."""
        return np.array([self.lambda1, self.lambda2])

    @property
    def is_canonical(self) -> bool:
        return self.mu1 <= self.mu2

    def swapped(self) -> "ExtractionModel":
        """Same problem with the two regime labels exchanged."""
        return replace(
            self,
            mu1=self.mu2, mu2=self.mu1,
            sigma1=self.sigma2, sigma2=self.sigma1,
            lambda1=self.lambda2, lambda2=self.lambda1,
        )

    def generator(self):
        """Rate matrix in the column convention (columns sum to zero)."""
        from .regime import validate_generator

        l1, l2 = self.lambda1, self.lambda2
        return validate_generator([[-l1, l2], [l1, -l2]])

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_EXAMPLE = ExtractionModel(
    mu1=0.01, mu2=0.10, sigma1=0.25, sigma2=0.25,
    lambda1=0.05, lambda2=0.05, r=0.08, C=20.0, K=5.0,
)
