"""
Factor objectives with analytic gradients and Gauss-Newton Hessians.

Every factor reports ``error = weight * objective`` together with the
gradient and the Gauss-Newton approximation of the Hessian over its
variables, in the order of ``factor.keys``. Pose blocks use the right
perturbation ``T * exp(delta)``, scale blocks the log-scale and code
blocks the code itself.

Pair-wise factors read the relative pose ``T_tgt_src = T_w_tgt^-1 T_w_src``
from the two pose variables.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from models.depth import DEPTH_FLOOR
from models.errors import DimensionMismatchError, DomainError, NoOverlapError
from models.keyframe import Frame
from models.matches import MatchSet
from models.pose import Pose, so3_log, so3_right_jacobian_inverse
from models.variables import Key, Values, code_key, dimension, pose_key, scale_key
from services.robust import KernelKind, RobustKernel

logger = logging.getLogger(__name__)

FM_LEVEL_WEIGHTS = (10.0, 9.0, 8.0, 7.0)
SIGMA_SMG = 0.1
SIGMA_RP = 0.03
SIGMA_GC = 0.03
OMEGA_ROT = 5.0
OMEGA_SCL = 0.5
OMEGA_R = 1.0


class FactorKind(str, Enum):
    FM = "FM"
    SMG = "SMG"
    RP = "RP"
    GC = "GC"
    RPS = "RPS"
    CD = "CD"
    SC = "SC"
    PS = "PS"


TARGETED_KINDS = frozenset({FactorKind.RPS, FactorKind.CD, FactorKind.SC, FactorKind.PS})


@dataclass(frozen=True)
class FactorSpec:
    """Kind, weight and kind-specific constants of a factor."""
    kind: FactorKind
    weight: float
    params: Dict[str, object] = field(default_factory=dict)
    targets: Optional[Dict[str, object]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FactorKind(self.kind))
        if self.weight < 0:
            raise DomainError(f"{self.kind.value} weight must be non-negative, got {self.weight}")
        if (self.targets is not None) != (self.kind in TARGETED_KINDS):
            raise DomainError(f"{self.kind.value} targets must be present exactly for RPS, CD, SC and PS")


class FactorEvaluation(NamedTuple):
    error: float
    gradient: np.ndarray
    hessian: np.ndarray
    skipped: bool = False
    support: int = 0


class Objective(NamedTuple):
    """Value of a stand-alone objective and its gradients by variable name."""
    value: float
    gradients: Dict[str, np.ndarray]
    skipped: bool = False


class DepthState(NamedTuple):
    scale: float
    code: np.ndarray


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


class Lifted(NamedTuple):
    points: np.ndarray  # (N, 3) in target coordinates
    depth: np.ndarray  # (N,) clamped source depth
    jacobian: Optional[np.ndarray]  # (N, 3, 13 + B) over pose_s, pose_t, log s_src, c_src


def lift_and_move(
    rays: np.ndarray,
    average: np.ndarray,
    bases: np.ndarray,
    scale: float,
    code: np.ndarray,
    rel: Pose,
    jacobian: bool,
) -> Lifted:
    """Source points ``T_tgt_src (D(x) ray(x))`` and their derivatives."""
    raw = scale * (average + bases @ code)
    live = raw >= DEPTH_FLOOR
    depth = np.where(live, raw, DEPTH_FLOOR)
    local_points = rays * depth[:, None]
    points = rel.act(local_points)
    if not jacobian:
        return Lifted(points, depth, None)

    rotation = rel.rotation
    jac = np.zeros((len(points), 3, 13 + len(code)))
    jac[:, :, 0:3] = -np.einsum("ij,njk->nik", rotation, skew_batch(local_points))
    jac[:, :, 3:6] = rotation
    jac[:, :, 6:9] = skew_batch(points)
    jac[:, :, 9:12] = -np.eye(3)
    d_point_d_depth = (rays @ rotation.T) * live[:, None]
    jac[:, :, 12] = d_point_d_depth * depth[:, None]
    jac[:, :, 13:] = d_point_d_depth[:, :, None] * (scale * bases)[:, None, :]
    return Lifted(points, depth, jac)


def _accumulate(jac: np.ndarray, residual: np.ndarray, coef: np.ndarray | float):
    """Gradient ``sum 2 c J^T r`` and Hessian ``sum 2 c J^T J`` over leading samples."""
    j = jac[:, None, :] if jac.ndim == 2 else jac
    r = residual.reshape(len(j), -1)
    c = np.broadcast_to(np.asarray(coef, dtype=float), (len(j),))
    gradient = 2.0 * np.einsum("n,nck,nc->k", c, j, r)
    flat = (j * np.sqrt(c)[:, None, None]).reshape(-1, j.shape[-1])
    hessian = 2.0 * flat.T @ flat
    return gradient, hessian


class Factor(ABC):
    kind: FactorKind

    def __init__(self, keys: Sequence[Key], weight: float):
        if weight < 0:
            raise DomainError(f"Factor weight must be non-negative, got {weight}")
        self.keys = tuple(keys)
        self.weight = float(weight)

    @property
    def spec(self) -> FactorSpec:
        return FactorSpec(self.kind, self.weight, self._params(), self._targets())

    def _params(self) -> Dict[str, object]:
        return {}

    def _targets(self) -> Optional[Dict[str, object]]:
        return None

    def dimensions(self, values: Values) -> List[int]:
        return [dimension(k, values[k]) for k in self.keys]

    @abstractmethod
    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        ...

    def error(self, values: Values) -> float:
        return self.evaluate(values, jacobian=False).error

    def linearize(self, values: Values) -> FactorEvaluation:
        return self.evaluate(values, jacobian=True)

    def _empty(self, values: Values, jacobian: bool) -> FactorEvaluation:
        logger.debug(f"{self.kind.value} factor on {self.keys} has no support, skipped")
        n = sum(self.dimensions(values)) if jacobian else 0
        return FactorEvaluation(0.0, np.zeros(n), np.zeros((n, n)), skipped=True, support=0)


class _PairFactor(Factor):
    """Base for factors between a source and a target frame."""

    def __init__(self, src: Frame, tgt: Frame, src_id, tgt_id, weight: float, with_target_depth: bool):
        keys = [pose_key(src_id), pose_key(tgt_id), scale_key(src_id), code_key(src_id)]
        if with_target_depth:
            keys += [scale_key(tgt_id), code_key(tgt_id)]
        super().__init__(keys, weight)
        self.src = src
        self.tgt = tgt
        self.src_id = src_id
        self.tgt_id = tgt_id

    def _rel(self, values: Values) -> Pose:
        return values[self.keys[1]].inverse() @ values[self.keys[0]]

    def _src_depth_state(self, values: Values) -> tuple[float, np.ndarray]:
        return float(values[self.keys[2]]), np.asarray(values[self.keys[3]], dtype=float)

    def _tgt_depth_state(self, values: Values) -> tuple[float, np.ndarray]:
        return float(values[self.keys[4]]), np.asarray(values[self.keys[5]], dtype=float)


class FeatureMetricFactor(_PairFactor):
    """
    Feature-metric alignment over a Gaussian pyramid.

    ``(1/L) sum_i w_i mean_{x in Omega_i} ||F_tgt_i(pi(p)) - F_src_i(x)||^2``
    """
    kind = FactorKind.FM

    def __init__(
        self,
        src: Frame,
        tgt: Frame,
        src_id,
        tgt_id,
        weight: float = 1.0,
        level_weights: Sequence[float] = FM_LEVEL_WEIGHTS,
    ):
        super().__init__(src, tgt, src_id, tgt_id, weight, with_target_depth=False)
        level_count = min(src.features.level_count, tgt.features.level_count)
        if len(level_weights) < level_count:
            raise DimensionMismatchError(f"{len(level_weights)} level weights for {level_count} levels")
        self.level_weights = tuple(float(w) for w in level_weights[:level_count])
        self._levels = []
        for level in range(level_count):
            src_map = src.features[level]
            coarse = src_map.valid_pixels()
            fine = (coarse * 2**level).astype(int)
            camera = src.camera.at_level(level)
            self._levels.append(
                (
                    camera,
                    camera.rays(coarse),
                    src.prior.average[fine[:, 1], fine[:, 0]],
                    src.prior.bases[:, fine[:, 1], fine[:, 0]].T,
                    src_map.values[:, coarse[:, 1].astype(int), coarse[:, 0].astype(int)].T,
                )
            )

    def _params(self):
        return {"level_weights": self.level_weights}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        rel = self._rel(values)
        scale, code = self._src_depth_state(values)
        n_vars = 13 + len(code)
        gradient = np.zeros(n_vars)
        hessian = np.zeros((n_vars, n_vars))
        error = 0.0
        support = 0
        level_count = len(self._levels)

        for level, (camera, rays, average, bases, src_values) in enumerate(self._levels):
            if len(rays) == 0:
                continue
            lifted = lift_and_move(rays, average, bases, scale, code, rel, jacobian)
            uv, in_front = camera.project_points(lifted.points)
            sample = self.tgt.features[level].sample(uv, with_gradient=jacobian)
            valid = in_front & sample.valid
            n_valid = int(valid.sum())
            if n_valid == 0:
                continue
            support += n_valid
            residual = sample.values[valid] - src_values[valid]
            coef = self.weight * self.level_weights[level] / (level_count * n_valid)
            error += coef * float(np.sum(residual**2))
            if jacobian:
                d_res_d_point = np.einsum(
                    "nca,nab->ncb", sample.gradient[valid], camera.projection_jacobian(lifted.points[valid])
                )
                jac = np.einsum("ncb,nbk->nck", d_res_d_point, lifted.jacobian[valid])
                flat = jac.reshape(-1, n_vars)
                gradient += 2.0 * coef * flat.T @ residual.reshape(-1)
                hessian += 2.0 * coef * flat.T @ flat

        if support == 0:
            return self._empty(values, jacobian)
        return FactorEvaluation(error, gradient, hessian, skipped=False, support=support)


class _MatchFactor(_PairFactor):
    """Base for factors evaluated at match locations."""

    def __init__(self, src, tgt, src_id, tgt_id, matches: MatchSet, weight, with_target_depth):
        super().__init__(src, tgt, src_id, tgt_id, weight, with_target_depth)
        self.matches = matches
        src_sample = src.depth_stack.sample(matches.src)
        tgt_sample = tgt.depth_stack.sample(matches.tgt)
        self._valid = src_sample.valid & tgt_sample.valid
        self._src_rays = src.camera.rays(matches.src)[self._valid]
        self._src_average = src_sample.values[self._valid, 0]
        self._src_bases = src_sample.values[self._valid, 1:]
        self._tgt_pixels = matches.tgt[self._valid]
        self._tgt_rays = tgt.camera.rays(matches.tgt)[self._valid]
        self._tgt_average = tgt_sample.values[self._valid, 0]
        self._tgt_bases = tgt_sample.values[self._valid, 1:]

    @property
    def match_count(self) -> int:
        return int(self._valid.sum())


class SparseMatchedGeometryFactor(_MatchFactor):
    """``mean fair(||p_s->t - pi^-1(x_tgt, D_tgt(x_tgt))||^2; sigma_smg * mean(avg_src))``."""
    kind = FactorKind.SMG

    def __init__(self, src, tgt, src_id, tgt_id, matches: MatchSet, weight: float = 0.1, sigma: float = SIGMA_SMG):
        super().__init__(src, tgt, src_id, tgt_id, matches, weight, with_target_depth=True)
        self.sigma = sigma
        self.kernel = RobustKernel(KernelKind.FAIR, sigma * src.mean_average_depth)

    def _params(self):
        return {"sigma": self.sigma, "bound": self.kernel.bound}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        n = self.match_count
        if n == 0:
            return self._empty(values, jacobian)
        rel = self._rel(values)
        scale, code = self._src_depth_state(values)
        tgt_scale, tgt_code = self._tgt_depth_state(values)
        lifted = lift_and_move(self._src_rays, self._src_average, self._src_bases, scale, code, rel, jacobian)

        raw_tgt = tgt_scale * (self._tgt_average + self._tgt_bases @ tgt_code)
        tgt_live = raw_tgt >= DEPTH_FLOOR
        tgt_depth = np.where(tgt_live, raw_tgt, DEPTH_FLOOR)
        residual = lifted.points - self._tgt_rays * tgt_depth[:, None]
        sq = np.sum(residual**2, axis=1)
        error = self.weight * float(np.mean(self.kernel.value(sq)))
        if not jacobian:
            return FactorEvaluation(error, np.zeros(0), np.zeros((0, 0)), support=n)

        n_src = lifted.jacobian.shape[2]
        jac = np.zeros((n, 3, n_src + 1 + len(tgt_code)))
        jac[:, :, :n_src] = lifted.jacobian
        d_res_d_depth = -self._tgt_rays * tgt_live[:, None]
        jac[:, :, n_src] = d_res_d_depth * tgt_depth[:, None]
        jac[:, :, n_src + 1:] = d_res_d_depth[:, :, None] * (tgt_scale * self._tgt_bases)[:, None, :]
        coef = self.weight * self.kernel.derivative(sq) / n
        gradient, hessian = _accumulate(jac, residual, coef)
        return FactorEvaluation(error, gradient, hessian, support=n)


class ReprojectionFactor(_MatchFactor):
    """``mean fair(||pi(p_s->t) - x_tgt||^2; sigma_rp * W^2)``."""
    kind = FactorKind.RP

    def __init__(self, src, tgt, src_id, tgt_id, matches: MatchSet, weight: float = 0.1, sigma: float = SIGMA_RP):
        super().__init__(src, tgt, src_id, tgt_id, matches, weight, with_target_depth=False)
        self.sigma = sigma
        self.kernel = RobustKernel(KernelKind.FAIR, sigma * src.camera.width**2)

    def _params(self):
        return {"sigma": self.sigma, "bound": self.kernel.bound}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        if self.match_count == 0:
            return self._empty(values, jacobian)
        rel = self._rel(values)
        scale, code = self._src_depth_state(values)
        lifted = lift_and_move(self._src_rays, self._src_average, self._src_bases, scale, code, rel, jacobian)
        uv, in_front = self.tgt.camera.project_points(lifted.points)
        n = int(in_front.sum())
        if n == 0:
            return self._empty(values, jacobian)
        residual = uv[in_front] - self._tgt_pixels[in_front]
        sq = np.sum(residual**2, axis=1)
        error = self.weight * float(np.mean(self.kernel.value(sq)))
        if not jacobian:
            return FactorEvaluation(error, np.zeros(0), np.zeros((0, 0)), support=n)
        jac = np.einsum(
            "nab,nbk->nak", self.tgt.camera.projection_jacobian(lifted.points[in_front]), lifted.jacobian[in_front]
        )
        coef = self.weight * self.kernel.derivative(sq) / n
        gradient, hessian = _accumulate(jac, residual, coef)
        return FactorEvaluation(error, gradient, hessian, support=n)


class GeometricConsistencyFactor(_PairFactor):
    """
    ``mean cauchy((z_s->t - D_tgt(pi(p_s->t)))^2; sigma_gc * mean(avg_src))``.

    Evaluated at the source side of ``matches``, or at every valid source
    pixel when no matches are given.
    """
    kind = FactorKind.GC

    def __init__(
        self,
        src: Frame,
        tgt: Frame,
        src_id,
        tgt_id,
        matches: Optional[MatchSet] = None,
        weight: float = 0.1,
        sigma: float = SIGMA_GC,
    ):
        super().__init__(src, tgt, src_id, tgt_id, weight, with_target_depth=True)
        self.sigma = sigma
        self.dense = matches is None
        self.kernel = RobustKernel(KernelKind.CAUCHY, sigma * src.mean_average_depth)
        pixels = src.depth_stack.valid_pixels() if matches is None else matches.src
        sample = src.depth_stack.sample(pixels)
        pixels = pixels[sample.valid]
        self._rays = src.camera.rays(pixels)
        self._average = sample.values[sample.valid, 0]
        self._bases = sample.values[sample.valid, 1:]

    def _params(self):
        return {"sigma": self.sigma, "bound": self.kernel.bound, "dense": self.dense}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        if len(self._rays) == 0:
            return self._empty(values, jacobian)
        rel = self._rel(values)
        scale, code = self._src_depth_state(values)
        tgt_scale, tgt_code = self._tgt_depth_state(values)
        lifted = lift_and_move(self._rays, self._average, self._bases, scale, code, rel, jacobian)
        uv, in_front = self.tgt.camera.project_points(lifted.points)
        sample = self.tgt.depth_stack.sample(uv, with_gradient=jacobian)
        valid = in_front & sample.valid
        n = int(valid.sum())
        if n == 0:
            return self._empty(values, jacobian)

        stack = sample.values[valid]
        raw_tgt = tgt_scale * (stack[:, 0] + stack[:, 1:] @ tgt_code)
        tgt_live = raw_tgt >= DEPTH_FLOOR
        tgt_depth = np.where(tgt_live, raw_tgt, DEPTH_FLOOR)
        residual = lifted.points[valid, 2] - tgt_depth
        sq = residual**2
        error = self.weight * float(np.mean(self.kernel.value(sq)))
        if not jacobian:
            return FactorEvaluation(error, np.zeros(0), np.zeros((0, 0)), support=n)

        points_jac = lifted.jacobian[valid]
        grad_stack = sample.gradient[valid]
        depth_grad = tgt_scale * (grad_stack[:, 0, :] + np.einsum("b,nba->na", tgt_code, grad_stack[:, 1:, :]))
        depth_grad *= tgt_live[:, None]
        d_depth_d_point = np.einsum("na,nab->nb", depth_grad, self.tgt.camera.projection_jacobian(lifted.points[valid]))
        n_src = points_jac.shape[2]
        jac = np.zeros((n, n_src + 1 + len(tgt_code)))
        jac[:, :n_src] = points_jac[:, 2, :] - np.einsum("nb,nbk->nk", d_depth_d_point, points_jac)
        jac[:, n_src] = -tgt_depth * tgt_live
        jac[:, n_src + 1:] = -(tgt_scale * stack[:, 1:]) * tgt_live[:, None]
        coef = self.weight * self.kernel.derivative(sq) / n
        gradient, hessian = _accumulate(jac, residual, coef)
        return FactorEvaluation(error, gradient, hessian, support=n)


class RelativePoseScaleFactor(Factor):
    """
    ``||t/s_src - t~/s~_src||^2 + w_rot ||log(R~^T R)||^2
    + w_scl (log(s_tgt/s_src) - log(s~_tgt/s~_src))^2``
    """
    kind = FactorKind.RPS

    def __init__(
        self,
        src_id,
        tgt_id,
        target_rel: Pose,
        target_src_scale: float,
        target_tgt_scale: float,
        weight: float = 1.0,
        omega_rot: float = OMEGA_ROT,
        omega_scl: float = OMEGA_SCL,
    ):
        if target_src_scale <= 0 or target_tgt_scale <= 0:
            raise DomainError("Target scales must be positive")
        super().__init__([pose_key(src_id), pose_key(tgt_id), scale_key(src_id), scale_key(tgt_id)], weight)
        self.target_rel = target_rel
        self.target_src_scale = float(target_src_scale)
        self.target_tgt_scale = float(target_tgt_scale)
        self.omega_rot = omega_rot
        self.omega_scl = omega_scl

    def _params(self):
        return {"omega_rot": self.omega_rot, "omega_scl": self.omega_scl}

    def _targets(self):
        return {"rel": self.target_rel, "src_scale": self.target_src_scale, "tgt_scale": self.target_tgt_scale}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        src_pose, tgt_pose = values[self.keys[0]], values[self.keys[1]]
        src_scale, tgt_scale = float(values[self.keys[2]]), float(values[self.keys[3]])
        if src_scale <= 0 or tgt_scale <= 0:
            raise DomainError("Depth scales must be positive")
        rel = tgt_pose.inverse() @ src_pose
        phi = so3_log(self.target_rel.rotation.T @ rel.rotation)
        sqrt_rot = np.sqrt(self.omega_rot)
        sqrt_scl = np.sqrt(self.omega_scl)
        log_ratio = np.log(tgt_scale / src_scale) - np.log(self.target_tgt_scale / self.target_src_scale)

        residual = np.concatenate(
            [
                rel.translation / src_scale - self.target_rel.translation / self.target_src_scale,
                sqrt_rot * phi,
                [sqrt_scl * log_ratio],
            ]
        )
        error = self.weight * float(residual @ residual)
        if not jacobian:
            return FactorEvaluation(error, np.zeros(0), np.zeros((0, 0)), support=1)

        jr_inv = so3_right_jacobian_inverse(phi)
        jac = np.zeros((7, 14))
        jac[0:3, 3:6] = rel.rotation / src_scale
        jac[0:3, 6:9] = skew_batch(rel.translation[None])[0] / src_scale
        jac[0:3, 9:12] = -np.eye(3) / src_scale
        jac[0:3, 12] = -rel.translation / src_scale
        jac[3:6, 0:3] = sqrt_rot * jr_inv
        jac[3:6, 6:9] = -sqrt_rot * jr_inv @ rel.rotation.T
        jac[6, 12] = -sqrt_scl
        jac[6, 13] = sqrt_scl
        gradient = 2.0 * self.weight * jac.T @ residual
        hessian = 2.0 * self.weight * jac.T @ jac
        return FactorEvaluation(error, gradient, hessian, support=1)


class CodeFactor(Factor):
    """``(1/B) ||c - c~||^2``."""
    kind = FactorKind.CD

    def __init__(self, node, target: np.ndarray, weight: float = 1e-4):
        super().__init__([code_key(node)], weight)
        self.target = np.asarray(target, dtype=float)

    def _targets(self):
        return {"code": self.target}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        code = np.asarray(values[self.keys[0]], dtype=float)
        if code.shape != self.target.shape:
            raise DimensionMismatchError(f"Code {code.shape} vs target {self.target.shape}")
        b = len(code)
        diff = code - self.target
        error = self.weight * float(diff @ diff) / b
        if not jacobian:
            return FactorEvaluation(error, np.zeros(0), np.zeros((0, 0)), support=1)
        return FactorEvaluation(error, 2.0 * self.weight * diff / b, 2.0 * self.weight * np.eye(b) / b, support=1)


class ScaleFactor(Factor):
    """``(log s - log s~)^2``."""
    kind = FactorKind.SC

    def __init__(self, node, target: float, weight: float = 1.0):
        if target <= 0:
            raise DomainError(f"Target scale must be positive, got {target}")
        super().__init__([scale_key(node)], weight)
        self.target = float(target)

    def _targets(self):
        return {"scale": self.target}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        scale = float(values[self.keys[0]])
        if scale <= 0:
            raise DomainError(f"Depth scale must be positive, got {scale}")
        r = np.log(scale) - np.log(self.target)
        error = self.weight * r * r
        return FactorEvaluation(
            float(error), np.array([2.0 * self.weight * r]), np.array([[2.0 * self.weight]]), support=1
        )


class PoseFactor(Factor):
    """``||t - t~||^2 + w_r ||log(R~^T R)||^2``."""
    kind = FactorKind.PS

    def __init__(self, node, target: Pose, weight: float = 1.0, omega_r: float = OMEGA_R):
        super().__init__([pose_key(node)], weight)
        self.target = target
        self.omega_r = omega_r

    def _params(self):
        return {"omega_r": self.omega_r}

    def _targets(self):
        return {"pose": self.target}

    def evaluate(self, values: Values, jacobian: bool = True) -> FactorEvaluation:
        pose = values[self.keys[0]]
        phi = so3_log(self.target.rotation.T @ pose.rotation)
        sqrt_r = np.sqrt(self.omega_r)
        residual = np.concatenate([pose.translation - self.target.translation, sqrt_r * phi])
        error = self.weight * float(residual @ residual)
        if not jacobian:
            return FactorEvaluation(error, np.zeros(0), np.zeros((0, 0)), support=1)
        jac = np.zeros((6, 6))
        jac[0:3, 3:6] = pose.rotation
        jac[3:6, 0:3] = sqrt_r * so3_right_jacobian_inverse(phi)
        return FactorEvaluation(error, 2.0 * self.weight * jac.T @ residual, 2.0 * self.weight * jac.T @ jac, support=1)


# Stand-alone objectives over a relative pose. The source sits at ``rel`` in
# the target frame, so the gradient w.r.t. ``rel`` is the source-pose block.

_SRC, _TGT = "src", "tgt"


def _pair_values(rel: Pose, src_state: DepthState, tgt_state: Optional[DepthState] = None) -> Values:
    values = {
        pose_key(_SRC): rel,
        pose_key(_TGT): Pose.identity(),
        scale_key(_SRC): float(src_state.scale),
        code_key(_SRC): np.asarray(src_state.code, dtype=float),
    }
    if tgt_state is not None:
        values[scale_key(_TGT)] = float(tgt_state.scale)
        values[code_key(_TGT)] = np.asarray(tgt_state.code, dtype=float)
    return values


def _pair_objective(factor: Factor, values: Values) -> Objective:
    evaluation = factor.linearize(values)
    if evaluation.skipped:
        return Objective(0.0, {}, skipped=True)
    names = {pose_key(_SRC): "rel", scale_key(_SRC): "log_scale", code_key(_SRC): "code",
             scale_key(_TGT): "tgt_log_scale", code_key(_TGT): "tgt_code"}
    gradients = {}
    offset = 0
    for key, dim in zip(factor.keys, factor.dimensions(values)):
        if key in names:
            gradients[names[key]] = evaluation.gradient[offset:offset + dim]
        offset += dim
    return Objective(evaluation.error, gradients)


def fm_objective(
    src: Frame,
    tgt: Frame,
    rel: Pose,
    state: DepthState,
    level_weights: Sequence[float] = FM_LEVEL_WEIGHTS,
) -> Objective:
    """
    Raises:
        NoOverlapError: if no source pixel is sampleable at any level
    """
    factor = FeatureMetricFactor(src, tgt, _SRC, _TGT, 1.0, level_weights)
    result = _pair_objective(factor, _pair_values(rel, state))
    if result.skipped:
        raise NoOverlapError("Feature-metric objective has an empty overlap set at every level")
    return result


def smg_objective(matches: MatchSet, src: Frame, tgt: Frame, rel: Pose, src_state: DepthState,
                  tgt_state: DepthState, sigma: float = SIGMA_SMG) -> Objective:
    factor = SparseMatchedGeometryFactor(src, tgt, _SRC, _TGT, matches, 1.0, sigma)
    return _pair_objective(factor, _pair_values(rel, src_state, tgt_state))


def rp_objective(matches: MatchSet, src: Frame, tgt: Frame, rel: Pose, state: DepthState,
                 sigma: float = SIGMA_RP) -> Objective:
    factor = ReprojectionFactor(src, tgt, _SRC, _TGT, matches, 1.0, sigma)
    return _pair_objective(factor, _pair_values(rel, state))


def gc_objective(matches: Optional[MatchSet], src: Frame, tgt: Frame, rel: Pose, src_state: DepthState,
                 tgt_state: DepthState, sigma: float = SIGMA_GC) -> Objective:
    factor = GeometricConsistencyFactor(src, tgt, _SRC, _TGT, matches, 1.0, sigma)
    return _pair_objective(factor, _pair_values(rel, src_state, tgt_state))


def rps_objective(
    src_pose: Pose,
    src_scale: float,
    tgt_pose: Pose,
    tgt_scale: float,
    target_rel: Pose,
    target_src_scale: float,
    target_tgt_scale: float,
    omega_rot: float = OMEGA_ROT,
    omega_scl: float = OMEGA_SCL,
) -> Objective:
    """
    Raises:
        DomainError: if any scale is not positive
    """
    factor = RelativePoseScaleFactor(_SRC, _TGT, target_rel, target_src_scale, target_tgt_scale, 1.0,
                                     omega_rot, omega_scl)
    values = {pose_key(_SRC): src_pose, pose_key(_TGT): tgt_pose,
              scale_key(_SRC): src_scale, scale_key(_TGT): tgt_scale}
    evaluation = factor.linearize(values)
    g = evaluation.gradient
    return Objective(evaluation.error, {"src_pose": g[0:6], "tgt_pose": g[6:12],
                                        "src_log_scale": g[12:13], "tgt_log_scale": g[13:14]})


def cd_objective(code: np.ndarray, target: np.ndarray) -> Objective:
    """
    Raises:
        DimensionMismatchError: if the code lengths differ
    """
    evaluation = CodeFactor(_SRC, target, 1.0).linearize({code_key(_SRC): np.asarray(code, dtype=float)})
    return Objective(evaluation.error, {"code": evaluation.gradient})


def sc_objective(scale: float, target: float) -> Objective:
    """
    Raises:
        DomainError: if either scale is not positive
    """
    evaluation = ScaleFactor(_SRC, target, 1.0).linearize({scale_key(_SRC): scale})
    return Objective(evaluation.error, {"log_scale": evaluation.gradient})


def ps_objective(pose: Pose, target: Pose, omega_r: float = OMEGA_R) -> Objective:
    evaluation = PoseFactor(_SRC, target, 1.0, omega_r).linearize({pose_key(_SRC): pose})
    return Objective(evaluation.error, {"pose": evaluation.gradient})
