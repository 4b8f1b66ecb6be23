from dataclasses import dataclass
from functools import cached_property

import numpy as np

from models.camera import Camera
from models.dense_map import DenseMap, FeaturePyramid, build_pyramid
from models.depth import DepthPrior

DEFAULT_PYRAMID_LEVELS = 4


@dataclass(frozen=True, eq=False)
class Frame:
    """
    Per-frame network-style outputs: depth prior, feature pyramid and
    descriptor map, all sharing one validity mask.
    """
    index: int
    camera: Camera
    prior: DepthPrior
    features: FeaturePyramid
    descriptors: DenseMap

    @classmethod
    def create(
        cls,
        index: int,
        camera: Camera,
        average: np.ndarray,
        bases: np.ndarray,
        features: np.ndarray,
        descriptors: np.ndarray,
        mask: np.ndarray,
        levels: int = DEFAULT_PYRAMID_LEVELS,
    ) -> "Frame":
        bases = np.asarray(bases, dtype=float).reshape(-1, *camera.shape)
        prior = DepthPrior(average, bases, np.zeros(len(bases)), 1.0)
        pyramid = build_pyramid(DenseMap(features, mask), levels)
        return cls(index, camera, prior, pyramid, DenseMap(descriptors, mask))

    @property
    def mask(self) -> np.ndarray:
        return self.descriptors.mask

    @cached_property
    def depth_stack(self) -> DenseMap:
        """Average depth and bases stacked as a (1 + B)-channel map for sampling."""
        return DenseMap(np.concatenate([self.prior.average[None], self.prior.bases]), self.mask)

    @property
    def mean_average_depth(self) -> float:
        """Mean of the average depth over the mask."""
        return float(np.mean(self.prior.average[self.mask]))


@dataclass(frozen=True, eq=False)
class Keyframe:
    """A frame retained in the graph, with its retrieval signature."""
    id: int
    frame: Frame
    signature: np.ndarray

    @property
    def camera(self) -> Camera:
        return self.frame.camera

    @property
    def mask(self) -> np.ndarray:
        return self.frame.mask

    @property
    def prior(self) -> DepthPrior:
        return self.frame.prior
