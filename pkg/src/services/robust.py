"""Fair and Cauchy robust kernels, applied to squared residual norms."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from models.errors import DomainError


class KernelKind(str, Enum):
    FAIR = "fair"
    CAUCHY = "cauchy"


@dataclass(frozen=True)
class RobustKernel:
    """
    ``fair(a; b) = 2 (sqrt(a/b) - ln(1 + sqrt(a/b)))`` or
    ``cauchy(a; b) = ln(1 + a/b)``, with ``a`` a squared norm.
    """
    kind: KernelKind
    bound: float

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not self.bound > 0:
            raise DomainError(f"Kernel bound must be positive, got {self.bound}")

    def _check(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if np.any(a < 0):
            raise DomainError("Robust kernel argument must be non-negative")
        return a

    def value(self, a):
        a = self._check(a)
        if self.kind is KernelKind.FAIR:
            z = np.sqrt(a / self.bound)
            return 2.0 * (z - np.log1p(z))
        return np.log1p(a / self.bound)

    def derivative(self, a):
        """d rho / d a."""
        a = self._check(a)
        if self.kind is KernelKind.FAIR:
            return 1.0 / (self.bound * (1.0 + np.sqrt(a / self.bound)))
        return 1.0 / (self.bound + a)


def robust(kernel: RobustKernel, a: float) -> float:
    """Evaluate ``kernel`` at a single non-negative ``a``."""
    return float(kernel.value(a))
