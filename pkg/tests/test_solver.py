import numpy as np
import pytest

from models.errors import ConfigurationError, DomainError
from models.pose import Pose
from models.variables import pose_key, scale_key
from services.factors import Factor, FactorEvaluation, FactorKind, PoseFactor, ScaleFactor
from services.solver import (
    CONVERGED_GRADIENT,
    MAX_ITERATIONS,
    NO_RELINEARIZATION,
    STALLED,
    LMConfig,
    Problem,
    lm_minimize,
)

X = ("x", 0)


class LinearFactor(Factor):
    """``weight * ||A x - b||^2`` over an additive vector variable."""
    kind = FactorKind.CD

    def __init__(self, a, b, weight=1.0, key=X):
        super().__init__([key], weight)
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def evaluate(self, values, jacobian=True):
        r = self.a @ np.asarray(values[self.keys[0]], dtype=float) - self.b
        w = self.weight
        return FactorEvaluation(float(w * r @ r), 2 * w * self.a.T @ r, 2 * w * self.a.T @ self.a, support=1)


class MisleadingFactor(Factor):
    """Gradient points towards 5 while the error grows away from 0."""
    kind = FactorKind.CD

    def __init__(self):
        super().__init__([X], 1.0)

    def evaluate(self, values, jacobian=True):
        x = np.asarray(values[X], dtype=float)
        return FactorEvaluation(float(x @ x + 1.0), 2.0 * (x - 5.0), 2.0 * np.eye(len(x)), support=1)


A = np.array([[2.0, 1.0], [0.0, 3.0]])
B = np.array([1.0, 2.0])


class TestConvergence:
    def test_quadratic_minimum(self):
        problem = Problem({X: np.zeros(2)}, [LinearFactor(A, B)])
        result = lm_minimize(problem, LMConfig(grad_tol=1e-10))
        assert result.converged
        np.testing.assert_allclose(result.values[X], np.linalg.solve(A, B), atol=1e-6)
        np.testing.assert_array_equal(problem.values[X], np.zeros(2))

    def test_spd_quadratic_in_few_iterations(self, rng):
        a = rng.normal(size=(5, 5)) + 3.0 * np.eye(5)
        b = rng.normal(size=5)
        cfg = LMConfig(grad_tol=1e-10, step_ratio_tol=0.0)
        result = lm_minimize(Problem({X: np.zeros(5)}, [LinearFactor(a, b)]), cfg)
        assert result.status == CONVERGED_GRADIENT
        assert result.iterations <= 10
        np.testing.assert_allclose(result.values[X], np.linalg.solve(a, b), atol=1e-8)

    def test_errors_strictly_decrease_and_damping_stays_bounded(self):
        target = Pose.exp([0.5, -0.3, 0.2, 1.0, 2.0, -1.0])
        cfg = LMConfig(grad_tol=1e-12, step_ratio_tol=1e-12)
        result = lm_minimize(Problem({pose_key(0): Pose.identity()}, [PoseFactor(0, target, omega_r=2.0)]), cfg)
        assert np.all(np.diff(result.error_history) < 0)
        assert all(cfg.damp_min <= d <= cfg.damp_max for d in result.damping_history)
        assert result.final_error == result.error_history[-1]
        assert result.final_error < 1e-8

    def test_already_optimal(self):
        problem = Problem({scale_key(0): 2.0}, [ScaleFactor(0, 2.0)])
        result = lm_minimize(problem)
        assert result.status == CONVERGED_GRADIENT
        assert result.iterations == 0
        assert result.error_history == [0.0]

    def test_fixed_variables_do_not_move(self):
        factors = [LinearFactor(np.eye(2), [1.0, 1.0]), LinearFactor(np.eye(2), [3.0, 3.0], key=("y", 0))]
        problem = Problem({X: np.zeros(2), ("y", 0): np.array([7.0, 7.0])}, factors, fixed={("y", 0)})
        result = lm_minimize(problem)
        np.testing.assert_array_equal(result.values[("y", 0)], [7.0, 7.0])
        np.testing.assert_allclose(result.values[X], [1.0, 1.0], atol=1e-4)

    def test_cached_blocks_are_enough_for_a_quadratic(self):
        cfg = LMConfig(grad_tol=1e-10, relinearize_thresholds={"x": 1e9})
        result = lm_minimize(Problem({X: np.zeros(2)}, [LinearFactor(A, B)]), cfg)
        assert result.relinearizations == 0
        np.testing.assert_allclose(result.values[X], np.linalg.solve(A, B), atol=1e-6)


class TestTermination:
    def test_max_iterations(self):
        cfg = LMConfig(max_iters=1, grad_tol=0.0, step_ratio_tol=0.0)
        result = lm_minimize(Problem({X: np.zeros(2)}, [LinearFactor(A, B)]), cfg)
        assert result.status == MAX_ITERATIONS
        assert result.iterations == 1

    def test_stalled_after_rejection_at_max_damping(self):
        result = lm_minimize(Problem({X: np.zeros(2)}, [MisleadingFactor()]))
        assert result.status == STALLED
        assert result.iterations == 2
        assert result.damping_history == [1e-4, 1e-2]
        assert result.error_history == [1.0]
        np.testing.assert_array_equal(result.values[X], np.zeros(2))
        assert not result.converged

    def test_no_relinearization(self):
        overdetermined = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        cfg = LMConfig(grad_tol=0.0, step_ratio_tol=0.0, jacobian_recompute_ratio=1e9, max_no_relinearize=1)
        problem = Problem({X: np.zeros(2)}, [LinearFactor(overdetermined, [1.0, 2.0, 0.0])])
        result = lm_minimize(problem, cfg)
        assert result.status == NO_RELINEARIZATION
        assert result.iterations == 1
        assert result.relinearizations == 0


class TestValidation:
    def test_domain_error_at_start(self):
        with pytest.raises(DomainError):
            lm_minimize(Problem({scale_key(0): -1.0}, [ScaleFactor(0, 1.0)]))

    def test_unknown_variable(self):
        with pytest.raises(ConfigurationError):
            Problem({X: np.zeros(2)}, [ScaleFactor(0, 1.0)])

    def test_nothing_free(self):
        with pytest.raises(ConfigurationError):
            Problem({X: np.zeros(2)}, [LinearFactor(A, B)], fixed={X})

    @pytest.mark.parametrize(
        "overrides",
        [{"damp_init": 1.0}, {"damp_min": 1e-1}, {"up_mult": 1.0}, {"down_mult": 0.5}, {"max_iters": 0}],
    )
    def test_config(self, overrides):
        with pytest.raises(ConfigurationError):
            LMConfig(**overrides)

    def test_presets(self):
        tracking = LMConfig.tracking()
        assert (tracking.damp_init, tracking.damp_min, tracking.damp_max) == (1e-4, 1e-6, 1e-2)
        assert (tracking.up_mult, tracking.down_mult, tracking.max_iters) == (100.0, 10.0, 40)
        assert (tracking.grad_tol, tracking.step_ratio_tol, tracking.jacobian_recompute_ratio) == (1e-9, 1e-4, 0.0)
        differentiable = LMConfig.differentiable(max_iters=10)
        assert (differentiable.up_mult, differentiable.down_mult, differentiable.max_iters) == (11.0, 9.0, 10)
        assert (differentiable.grad_tol, differentiable.step_ratio_tol) == (1e-4, 1e-2)
