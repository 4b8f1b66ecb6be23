"""
Levenberg-Marquardt over factor graphs.

The normal equations are built densely from the per-factor Gauss-Newton
blocks. A factor is relinearised only when the error has dropped enough
since the last linearisation and, when per-variable thresholds are set,
only if one of its variables has moved past its threshold. Otherwise its
cached blocks are reused with the gradient moved along the model,
``g + H * delta``.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from models.errors import ConfigurationError, DegenerateDepthError, DomainError
from models.variables import Key, Values, coordinates, dimension, local, retract
from services.factors import Factor, FactorEvaluation

logger = logging.getLogger(__name__)

CONVERGED_GRADIENT = "converged_gradient"
CONVERGED_STEP = "converged_step"
MAX_ITERATIONS = "max_iterations"
STALLED = "stalled"
NO_RELINEARIZATION = "no_relinearization"


@dataclass
class LMConfig:
    """Damping schedule and termination criteria."""
    damp_init: float = 1e-4
    damp_min: float = 1e-6
    damp_max: float = 1e-2
    up_mult: float = 100.0
    down_mult: float = 10.0
    max_iters: int = 40
    grad_tol: float = 1e-4
    step_ratio_tol: float = 1e-2
    jacobian_recompute_ratio: float = 1e-2
    relinearize_thresholds: Optional[Dict[str, float]] = None
    max_no_relinearize: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.damp_min <= self.damp_init <= self.damp_max:
            raise ConfigurationError(
                f"Damping must satisfy min <= init <= max, got {self.damp_min}, {self.damp_init}, {self.damp_max}"
            )
        if self.up_mult <= 1 or self.down_mult <= 1:
            raise ConfigurationError("Damping multipliers must be greater than 1")
        if self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be positive, got {self.max_iters}")

    @classmethod
    def tracking(cls, **overrides) -> "LMConfig":
        """Relinearises after every accepted step and stops on a tiny step."""
        return cls(**{"grad_tol": 1e-9, "step_ratio_tol": 1e-4, "jacobian_recompute_ratio": 0.0, **overrides})

    @classmethod
    def differentiable(cls, **overrides) -> "LMConfig":
        """Multipliers used when the solver sits inside network training."""
        return cls(**{"up_mult": 11.0, "down_mult": 9.0, **overrides})


@dataclass
class Problem:
    values: Values
    factors: List[Factor]
    fixed: Set[Key] = field(default_factory=set)

    def __post_init__(self):
        self.values = dict(self.values)
        self.fixed = set(self.fixed)
        for factor in self.factors:
            missing = [k for k in factor.keys if k not in self.values]
            if missing:
                raise ConfigurationError(f"{factor.kind.value} factor references unknown variables {missing}")
        if not self.free_keys:
            raise ConfigurationError("Problem has no free variable")

    @property
    def free_keys(self) -> List[Key]:
        return [k for k in self.values if k not in self.fixed]

    def total_error(self, values: Optional[Values] = None) -> float:
        values = self.values if values is None else values
        return float(sum(f.error(values) for f in self.factors))


@dataclass
class LMResult:
    values: Values
    final_error: float
    iterations: int
    status: str
    error_history: List[float] = field(default_factory=list)
    damping_history: List[float] = field(default_factory=list)
    relinearizations: int = 0

    @property
    def converged(self) -> bool:
        return self.status in (CONVERGED_GRADIENT, CONVERGED_STEP)


class _Linearization:
    """Cached factor blocks and the values they were taken at."""

    def __init__(self, factor: Factor, values: Values):
        self.factor = factor
        self.point = {k: values[k] for k in factor.keys}
        self.evaluation: FactorEvaluation = factor.linearize(values)

    def delta(self, values: Values) -> np.ndarray:
        return np.concatenate([np.atleast_1d(local(k, self.point[k], values[k])) for k in self.factor.keys])

    def moved(self, values: Values, thresholds: Optional[Dict[str, float]]) -> bool:
        if thresholds is None:
            return True
        for key in self.factor.keys:
            change = np.max(np.abs(local(key, self.point[key], values[key])))
            if change > thresholds.get(key[0], 0.0):
                return True
        return False


class _System:
    def __init__(self, problem: Problem):
        self.keys = problem.free_keys
        self.offsets: Dict[Key, int] = {}
        offset = 0
        for key in self.keys:
            self.offsets[key] = offset
            offset += dimension(key, problem.values[key])
        self.size = offset

    def scatter(self, linearizations: Sequence[_Linearization], values: Values) -> tuple[np.ndarray, np.ndarray]:
        g = np.zeros(self.size)
        h = np.zeros((self.size, self.size))
        for lin in linearizations:
            ev = lin.evaluation
            if ev.skipped:
                continue
            local_g = ev.gradient + ev.hessian @ lin.delta(values)
            index = []
            for key in lin.factor.keys:
                dim = dimension(key, values[key])
                if key in self.offsets:
                    index.extend(range(self.offsets[key], self.offsets[key] + dim))
                else:
                    index.extend([-1] * dim)
            index = np.asarray(index)
            keep = index >= 0
            rows = index[keep]
            g[rows] += local_g[keep]
            h[np.ix_(rows, rows)] += ev.hessian[np.ix_(keep, keep)]
        return g, h

    def retract(self, values: Values, step: np.ndarray) -> Values:
        out = dict(values)
        for key in self.keys:
            start = self.offsets[key]
            dim = dimension(key, values[key])
            out[key] = retract(key, values[key], step[start:start + dim])
        return out

    def magnitude(self, values: Values) -> float:
        return float(max(np.max(np.abs(coordinates(k, values[k]))) for k in self.keys))


def _try_error(problem: Problem, values: Values) -> float:
    try:
        return problem.total_error(values)
    except (DomainError, DegenerateDepthError) as e:
        logger.debug(f"Candidate rejected: {e}")
        return np.inf


def lm_minimize(problem: Problem, cfg: Optional[LMConfig] = None) -> LMResult:
    """
    Minimise the sum of factor errors over the free variables.

    Steps solve ``(H + lambda I) delta = -g``. A step is accepted iff the
    total error decreases, in which case lambda is divided by
    ``down_mult``; otherwise it is multiplied by ``up_mult``. Lambda is
    clamped to ``[damp_min, damp_max]`` and a rejection at ``damp_max``
    ends the run as stalled.

    Returns:
        LMResult with the final values; ``problem.values`` is not modified
    """
    cfg = cfg or LMConfig()
    system = _System(problem)
    values = dict(problem.values)
    linearizations = [_Linearization(f, values) for f in problem.factors]
    error = _try_error(problem, values)
    if not np.isfinite(error):
        raise DomainError("Initial values are outside the domain of a factor")
    error_at_linearization = error
    damping = cfg.damp_init
    result = LMResult(values, error, 0, MAX_ITERATIONS, [error], [], 0)
    no_relinearize = 0

    g, h = system.scatter(linearizations, values)
    if np.max(np.abs(g), initial=0.0) < cfg.grad_tol:
        result.status = CONVERGED_GRADIENT
        return result

    iteration = 0
    while iteration < cfg.max_iters:
        iteration += 1
        result.damping_history.append(damping)
        try:
            step = cho_solve(cho_factor(h + damping * np.eye(system.size)), -g)
        except LinAlgError:
            if damping >= cfg.damp_max:
                result.status = STALLED
                break
            damping = min(damping * cfg.up_mult, cfg.damp_max)
            continue

        candidate = system.retract(values, step)
        new_error = _try_error(problem, candidate)
        if not new_error < error:
            logger.debug(f"LM iteration {iteration}: rejected {new_error:.6g} >= {error:.6g}, damping {damping:.1e}")
            if damping >= cfg.damp_max:
                result.status = STALLED
                break
            damping = min(damping * cfg.up_mult, cfg.damp_max)
            continue

        logger.debug(f"LM iteration {iteration}: accepted {new_error:.6g}, damping {damping:.1e}")
        ratio = np.max(np.abs(step)) / max(system.magnitude(values), 1e-12)
        values, error = candidate, new_error
        damping = max(damping / cfg.down_mult, cfg.damp_min)
        result.error_history.append(error)

        relinearized = 0
        if error_at_linearization - error > cfg.jacobian_recompute_ratio * error:
            for i, lin in enumerate(linearizations):
                if lin.moved(values, cfg.relinearize_thresholds):
                    linearizations[i] = _Linearization(lin.factor, values)
                    relinearized += 1
            error_at_linearization = error
        result.relinearizations += relinearized
        no_relinearize = 0 if relinearized else no_relinearize + 1
        g, h = system.scatter(linearizations, values)

        if ratio < cfg.step_ratio_tol:
            result.status = CONVERGED_STEP
            break
        if np.max(np.abs(g)) < cfg.grad_tol:
            result.status = CONVERGED_GRADIENT
            break
        if cfg.max_no_relinearize is not None and no_relinearize >= cfg.max_no_relinearize:
            result.status = NO_RELINEARIZATION
            break

    result.values = values
    result.final_error = error
    result.iterations = iteration
    logger.debug(f"LM finished after {iteration} iterations: {result.status}, error {error:.6g}")
    return result
