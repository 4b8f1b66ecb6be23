"""
Depth, flow and descriptor-histogram objectives, and the histogram
signatures used for keyframe retrieval.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit

from models.dense_map import DenseMap
from models.errors import DimensionMismatchError, DomainError

LOG_EPS = 1e-4
HISTOGRAM_BINS = 100
HISTOGRAM_MARGIN = 0.3
SI_WEIGHT = 20.0
FLOW_WEIGHT = 10.0
HISTOGRAM_WEIGHT = 4.0


def default_bandwidth(bins: int) -> float:
    return 4.0 / (5.0 * bins)


@dataclass(frozen=True, eq=False)
class SoftHistogram:
    bins: np.ndarray
    bandwidth: float

    @property
    def size(self) -> int:
        return len(self.bins)


def bin_centers(bins: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(bins) + 1.0) / bins


def scale_invariant_loss(depth: np.ndarray, target: np.ndarray, mask: np.ndarray, eps: float = LOG_EPS) -> float:
    """
    Variance of the masked log depth ratio.

    Raises:
        DomainError: if the mask is empty
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("Scale-invariant loss over an empty mask")
    v = mask.astype(float)
    ratio = np.log(v * depth + eps) - np.log(v * target + eps)
    r = ratio[mask]
    return float(np.mean(r**2) - np.mean(r) ** 2)


def soft_histogram(
    channel: np.ndarray,
    mask: np.ndarray,
    bins: int = HISTOGRAM_BINS,
    bandwidth: Optional[float] = None,
) -> SoftHistogram:
    """
    Differentiable histogram of values in (-1, 1).

    Bin ``k`` is centred at ``-1 + (2k + 1)/K`` and collects the masked mean
    of a sigmoid window of half-width ``1/K``.

    Raises:
        DomainError: on an empty mask, fewer than 2 bins or a non-positive bandwidth
    """
    bandwidth = default_bandwidth(bins) if bandwidth is None else bandwidth
    if bins < 2 or bandwidth <= 0:
        raise DomainError(f"Soft histogram needs K >= 2 and beta > 0, got K={bins}, beta={bandwidth}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("Soft histogram over an empty mask")
    values = np.asarray(channel, dtype=float)[mask]
    offset = values[None, :] - bin_centers(bins)[:, None]
    window = expit((offset + 1.0 / bins) / bandwidth) - expit((offset - 1.0 / bins) / bandwidth)
    return SoftHistogram(window.mean(axis=1), bandwidth)


def cumulative_distribution(histogram: SoftHistogram) -> np.ndarray:
    return np.cumsum(histogram.bins)


def emd_distance(a: SoftHistogram, b: SoftHistogram) -> float:
    """
    Squared L2 distance between the two cumulative distributions.

    Raises:
        DimensionMismatchError: if the bin counts differ
    """
    if a.size != b.size:
        raise DimensionMismatchError(f"Histograms have {a.size} and {b.size} bins")
    diff = cumulative_distribution(a) - cumulative_distribution(b)
    return float(diff @ diff)


def _channel_histograms(
    descriptors: DenseMap,
    bins: int,
    bandwidth: Optional[float],
    mask: Optional[np.ndarray] = None,
) -> list[SoftHistogram]:
    mask = descriptors.mask if mask is None else mask
    return [soft_histogram(descriptors.values[c], mask, bins, bandwidth) for c in range(descriptors.channels)]


def triplet_histogram_loss(
    src: DenseMap,
    tgt: DenseMap,
    far: DenseMap,
    bins: int = HISTOGRAM_BINS,
    bandwidth: Optional[float] = None,
    margin: float = HISTOGRAM_MARGIN,
) -> float:
    """
    ``(1/C) sum_c max(d(src, tgt)/K - d(src, far)/K + margin, 0)`` per channel.

    All three maps are histogrammed under the source mask.

    Raises:
        DimensionMismatchError: if the channel counts or map sizes differ
    """
    if not src.channels == tgt.channels == far.channels:
        raise DimensionMismatchError(
            f"Descriptor channels differ: {src.channels}, {tgt.channels}, {far.channels}"
        )
    if not src.mask.shape == tgt.mask.shape == far.mask.shape:
        raise DimensionMismatchError(
            f"Descriptor maps differ in size: {src.mask.shape}, {tgt.mask.shape}, {far.mask.shape}"
        )
    h_src = _channel_histograms(src, bins, bandwidth)
    h_tgt = _channel_histograms(tgt, bins, bandwidth, src.mask)
    h_far = _channel_histograms(far, bins, bandwidth, src.mask)
    terms = [
        max(emd_distance(s, t) / bins - emd_distance(s, f) / bins + margin, 0.0)
        for s, t, f in zip(h_src, h_tgt, h_far)
    ]
    return float(np.mean(terms))


def flow_loss(flow: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """
    Masked squared flow error normalised by the mean flow energy.

    Returns 0 when both flows vanish on the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    flow = np.asarray(flow, dtype=float)[:, mask]
    target = np.asarray(target, dtype=float)[:, mask]
    normalizer = 0.5 * float(np.sum(flow**2 + target**2))
    count = int(mask.sum())
    if normalizer <= 0 or count == 0:
        return 0.0
    return float(np.sum((flow - target) ** 2)) / (normalizer * count)


class TrainingLosses(NamedTuple):
    scale_invariant: float
    flow: float
    histogram: float
    total: float


def training_objective(
    depth: np.ndarray,
    target_depth: np.ndarray,
    mask: np.ndarray,
    flow: np.ndarray,
    target_flow: np.ndarray,
    flow_mask: np.ndarray,
    src_desc: DenseMap,
    tgt_desc: DenseMap,
    far_desc: DenseMap,
    si_weight: float = SI_WEIGHT,
    flow_weight: float = FLOW_WEIGHT,
    histogram_weight: float = HISTOGRAM_WEIGHT,
) -> TrainingLosses:
    si = scale_invariant_loss(depth, target_depth, mask)
    fl = flow_loss(flow, target_flow, flow_mask)
    hist = triplet_histogram_loss(src_desc, tgt_desc, far_desc)
    return TrainingLosses(si, fl, hist, si_weight * si + flow_weight * fl + histogram_weight * hist)


def descriptor_signature(
    descriptors: DenseMap,
    bins: int = HISTOGRAM_BINS,
    bandwidth: Optional[float] = None,
) -> np.ndarray:
    """(C, K) cumulative distributions of every descriptor channel."""
    return np.stack([cumulative_distribution(h) for h in _channel_histograms(descriptors, bins, bandwidth)])


def signature_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """``1 / (1 + mean_c EMD_c / K)``; 1 for identical signatures."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Signatures have shapes {a.shape} and {b.shape}")
    emd = np.sum((a - b) ** 2, axis=1)
    return float(1.0 / (1.0 + np.mean(emd) / a.shape[1]))
