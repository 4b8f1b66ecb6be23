"""Error signals raised across the SLAM backend.

Each error subclasses the builtin it refines so callers can catch either.
"""


class SlamError(Exception):
    """Base class for all backend errors."""


class BehindCameraError(SlamError, ValueError):
    """A point with non-positive depth was projected."""


class InvalidDepthError(SlamError, ValueError):
    """A pixel was unprojected with non-positive depth."""


class DegenerateDepthError(SlamError, ValueError):
    """A composed depth map is non-positive on the valid mask."""


class NoOverlapError(SlamError, RuntimeError):
    """No source location projects into the target mask."""


class InsufficientCorrespondencesError(SlamError, ValueError):
    """Too few correspondences for the requested estimate."""


class DomainError(SlamError, ValueError):
    """An argument is outside the domain of a function."""


class ConfigurationError(SlamError, ValueError):
    """Invalid or unknown configuration."""


class DimensionMismatchError(SlamError, ValueError):
    """Array shapes that must agree do not."""


class DisconnectedGraphError(SlamError, RuntimeError):
    """The keyframe graph has more than one connected component."""


class TrackingLostError(SlamError, RuntimeError):
    """Camera tracking could not align the frame to its reference."""


class SequenceFormatError(SlamError, ValueError):
    """An on-disk sequence, trajectory or map file is malformed or missing."""
