"""Shared parameter containers."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ModelParams:
    """Dimension and the two stability indices.

    The construction requires 0 < beta < alpha < 2 strictly; the beta-index
    names the perturbing jump kernel, the alpha-index the leading one.
    """

    d: int
    alpha: float
    beta: float

    def __post_init__(self):
        if self.d < 1 or int(self.d) != self.d:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not (0.0 < self.beta < self.alpha < 2.0):
            raise ValueError(
                f"need 0 < beta < alpha < 2, got alpha={self.alpha}, beta={self.beta}"
            )

    @property
    def scaling_exponent(self) -> float:
        """Exponent alpha/(alpha-beta) governing horizon and mesh grading."""
        return self.alpha / (self.alpha - self.beta)


@dataclass(frozen=True)
class ComparisonWeight:
    """Weight of the beta-stable component and truncation radius.

    ``lam = math.inf`` selects the untruncated comparison function.
    """

    a: float
    lam: float = math.inf

    def __post_init__(self):
        if self.a < 0:
            raise ValueError(f"a must be nonnegative, got {self.a}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
