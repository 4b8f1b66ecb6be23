"""
Optimisation variables.

A key is a ``(kind, id)`` tuple. Poses are retracted on the right through
the SE(3) exponential, scales multiplicatively (the solver works in
log-scale) and every other kind additively.
"""

from typing import Any, Dict, Hashable, Tuple

import numpy as np

from models.pose import Pose, so3_log

Key = Tuple[str, Hashable]
Values = Dict[Key, Any]

POSE = "pose"
SCALE = "scale"
CODE = "code"


def pose_key(node: Hashable) -> Key:
    return (POSE, node)


def scale_key(node: Hashable) -> Key:
    return (SCALE, node)


def code_key(node: Hashable) -> Key:
    return (CODE, node)


def dimension(key: Key, value: Any) -> int:
    if key[0] == POSE:
        return 6
    if key[0] == SCALE:
        return 1
    return int(np.asarray(value).size)


def retract(key: Key, value: Any, delta: np.ndarray) -> Any:
    if key[0] == POSE:
        return value.retract(delta)
    if key[0] == SCALE:
        return float(value * np.exp(delta[0]))
    return np.asarray(value, dtype=float) + delta


def local(key: Key, a: Any, b: Any) -> np.ndarray:
    """Tangent coordinates taking ``a`` to ``b``."""
    if key[0] == POSE:
        return a.local(b)
    if key[0] == SCALE:
        return np.array([np.log(b / a)])
    return np.asarray(b, dtype=float) - np.asarray(a, dtype=float)


def coordinates(key: Key, value: Any) -> np.ndarray:
    """Magnitudes used for the parameter increment ratio."""
    if key[0] == POSE:
        pose: Pose = value
        return np.concatenate([so3_log(pose.rotation), pose.translation])
    if key[0] == SCALE:
        return np.array([np.log(value)])
    return np.asarray(value, dtype=float).reshape(-1)
