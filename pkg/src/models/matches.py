from dataclasses import dataclass

import numpy as np

from models.errors import DimensionMismatchError


@dataclass(frozen=True, eq=False)
class MatchSet:
    """
    Pixel correspondences between a source and a target map.

    ``candidate_count`` is the number of candidates before any filtering,
    which inlier ratios are measured against.
    """
    src: np.ndarray  # (N, 2)
    tgt: np.ndarray  # (N, 2)
    candidate_count: int

    def __post_init__(self):
        src = np.array(self.src, dtype=float).reshape(-1, 2)
        tgt = np.array(self.tgt, dtype=float).reshape(-1, 2)
        if src.shape != tgt.shape:
            raise DimensionMismatchError(f"Match sides differ: {src.shape} vs {tgt.shape}")
        src.setflags(write=False)
        tgt.setflags(write=False)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "tgt", tgt)
        object.__setattr__(self, "candidate_count", int(self.candidate_count))

    @classmethod
    def empty(cls, candidate_count: int = 0) -> "MatchSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), candidate_count)

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, selector: np.ndarray) -> "MatchSet":
        """Keep the selected pairs; the candidate count is preserved."""
        return MatchSet(self.src[selector], self.tgt[selector], self.candidate_count)

    def swapped(self) -> "MatchSet":
        return MatchSet(self.tgt, self.src, self.candidate_count)
