# File: src/models/graph.py

"""
Keyframe graph: keyframes with their pose, scale and code estimates, and
typed connections carrying pair-wise factors.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from models.depth import DepthPrior
from models.errors import DomainError
from models.keyframe import Frame, Keyframe
from models.pose import Pose
from models.variables import Values, code_key, pose_key, scale_key


class ConnectionKind(str, Enum):
    TEMPORAL = "temporal"
    LOCAL = "local-loop"
    GLOBAL = "global-loop"


@dataclass(frozen=True)
class Connection:
    """Edge from a newer keyframe ``src`` to an older keyframe ``tgt``."""
    src: int
    tgt: int
    kind: ConnectionKind

    @property
    def pair(self) -> Tuple[int, int]:
        return (self.src, self.tgt)


@dataclass(frozen=True)
class FrameRecord:
    """Tracked frame stored relative to its reference keyframe."""
    index: int
    ref: int
    rel: Pose  # frame camera in reference keyframe coordinates
    ref_scale: float  # reference scale when the frame was tracked


@dataclass
class KeyframeGraph:
    """
    Id-ordered keyframe store with estimates and connections.

    Attributes:
        keyframes: keyframes by id, in creation order
        poses: camera-to-world pose estimate per keyframe
        scales: depth scale estimate per keyframe
        codes: depth code estimate per keyframe
        connections: typed edges in creation order
        factors: pair-wise factors attached to each edge
        priors: unary factors per keyframe (code priors, first-keyframe anchors)
        queried: keyframes already used as loop queries
    """
    keyframes: Dict[int, Keyframe] = field(default_factory=dict)
    poses: Dict[int, Pose] = field(default_factory=dict)
    scales: Dict[int, float] = field(default_factory=dict)
    codes: Dict[int, np.ndarray] = field(default_factory=dict)
    connections: List[Connection] = field(default_factory=list)
    factors: Dict[Connection, list] = field(default_factory=dict)
    priors: Dict[int, list] = field(default_factory=dict)
    queried: Set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self) -> Iterator[int]:
        return iter(self.keyframes)

    def __getitem__(self, kf_id: int) -> Keyframe:
        return self.keyframes[kf_id]

    @property
    def ids(self) -> List[int]:
        return list(self.keyframes)

    @property
    def anchor_id(self) -> Optional[int]:
        return next(iter(self.keyframes), None)

    @property
    def last_id(self) -> Optional[int]:
        return next(reversed(self.keyframes), None) if self.keyframes else None

    def add_keyframe(self, frame: Frame, pose: Pose, scale: float, code: np.ndarray, signature: np.ndarray) -> int:
        if scale <= 0:
            raise DomainError(f"Keyframe scale must be positive, got {scale}")
        kf_id = len(self.keyframes)
        self.keyframes[kf_id] = Keyframe(kf_id, frame, signature)
        self.poses[kf_id] = pose
        self.scales[kf_id] = float(scale)
        self.codes[kf_id] = np.asarray(code, dtype=float)
        return kf_id

    def is_connected(self, a: int, b: int) -> bool:
        return any({c.src, c.tgt} == {a, b} for c in self.connections)

    def connect(self, src: int, tgt: int, kind: ConnectionKind, factors: Optional[list] = None) -> Connection:
        """
        Raises:
            DomainError: for a self-loop, an unknown keyframe or an existing pair
        """
        if src == tgt:
            raise DomainError(f"Keyframe {src} cannot connect to itself")
        if src not in self.keyframes or tgt not in self.keyframes:
            raise DomainError(f"Connection {src}-{tgt} references an unknown keyframe")
        if self.is_connected(src, tgt):
            raise DomainError(f"Keyframes {src} and {tgt} are already connected")
        connection = Connection(src, tgt, ConnectionKind(kind))
        self.connections.append(connection)
        self.factors[connection] = list(factors or [])
        return connection

    def neighbors(self, kf_id: int, kind: Optional[ConnectionKind] = None) -> List[int]:
        out = []
        for c in self.connections:
            if kind is not None and c.kind != kind:
                continue
            if c.src == kf_id:
                out.append(c.tgt)
            elif c.tgt == kf_id:
                out.append(c.src)
        return out

    def prior(self, kf_id: int) -> DepthPrior:
        """Depth prior of a keyframe at its current scale and code."""
        return self.keyframes[kf_id].prior.with_state(self.scales[kf_id], self.codes[kf_id])

    def values(self) -> Values:
        values: Values = {}
        for kf_id in self.keyframes:
            values[pose_key(kf_id)] = self.poses[kf_id]
            values[scale_key(kf_id)] = self.scales[kf_id]
            values[code_key(kf_id)] = self.codes[kf_id]
        return values

    def update(self, values: Values):
        for kf_id in self.keyframes:
            self.poses[kf_id] = values.get(pose_key(kf_id), self.poses[kf_id])
            self.scales[kf_id] = float(values.get(scale_key(kf_id), self.scales[kf_id]))
            self.codes[kf_id] = np.asarray(values.get(code_key(kf_id), self.codes[kf_id]), dtype=float)

    def depth(self, kf_id: int) -> np.ndarray:
        """Composed depth map of a keyframe, zero outside its mask."""
        prior = self.prior(kf_id)
        return np.where(self.keyframes[kf_id].mask, prior.scale * prior.unscaled(), 0.0)

    def all_factors(self) -> list:
        out = [f for kf_id in self.keyframes for f in self.priors.get(kf_id, [])]
        for connection in self.connections:
            out.extend(self.factors[connection])
        return out

    def frame_pose(self, record: FrameRecord) -> Pose:
        """World pose of a tracked frame under the current keyframe estimates."""
        ratio = self.scales[record.ref] / record.ref_scale
        return self.poses[record.ref] @ record.rel.scaled(ratio)
