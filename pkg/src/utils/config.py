# File: src/utils/config.py

"""
Flat ``key = value`` view over every module's settings.

Keys are dotted paths into the nested dataclasses, e.g.
``tracking.lm.damp_init``, ``keyframe.max_overlap_area`` or
``scene.frames``.
"""

import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Tuple

from models.errors import ConfigurationError, SequenceFormatError
from services.evaluation import RPE_INTERVAL
from services.pipeline import SlamConfig
from services.simulator import SceneConfig
from utils.validators import coerce_value, format_value, parse_key_values, validate_keys

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    rpe_interval: int = RPE_INTERVAL

    def validate(self):
        if self.rpe_interval < 1:
            raise ConfigurationError(f"rpe_interval must be positive, got {self.rpe_interval}")


def _is_mapping(annotation: Any) -> bool:
    if annotation is dict or typing.get_origin(annotation) is dict:
        return True
    return any(_is_mapping(a) for a in typing.get_args(annotation))


def _leaves(obj: Any, prefix: str = "") -> Iterator[Tuple[str, Any, Any, str]]:
    """(key, owner, annotation, attribute) for every settable scalar field."""
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        annotation = hints[f.name]
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _leaves(value, f"{key}.")
        elif not _is_mapping(annotation):
            yield key, obj, annotation, f.name


@dataclass
class RunConfig:
    """Scene, SLAM and evaluation settings with their published defaults."""
    slam: SlamConfig = field(default_factory=SlamConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def _fields(self) -> Dict[str, Tuple[Any, Any, str]]:
        out = {}
        for key, owner, annotation, attr in _leaves(self.slam):
            out[key] = (owner, annotation, attr)
        for section in ("scene", "eval"):
            for key, owner, annotation, attr in _leaves(getattr(self, section), f"{section}."):
                out[key] = (owner, annotation, attr)
        return out

    def keys(self) -> list[str]:
        return list(self._fields())

    def flatten(self) -> Dict[str, Any]:
        return {key: getattr(owner, attr) for key, (owner, _, attr) in self._fields().items()}

    def apply(self, overrides: Mapping[str, str]) -> "RunConfig":
        """
        Set fields from text values and re-validate.

        Raises:
            ConfigurationError: on an unknown key, a malformed value or a
                value the owning config rejects
        """
        fields = self._fields()
        validate_keys(overrides, fields)
        for key, text in overrides.items():
            owner, annotation, attr = fields[key]
            setattr(owner, attr, coerce_value(key, text, annotation))
        self.validate()
        return self

    def validate(self):
        self.slam.validate()
        self.scene.validate()
        self.eval.validate()

    def dump(self) -> str:
        return "\n".join(f"{key} = {format_value(value)}" for key, value in self.flatten().items()) + "\n"

    @classmethod
    def load(cls, path: Path | str | None = None) -> "RunConfig":
        """Defaults, updated from a config file when one is given."""
        config = cls()
        if path is None:
            return config
        path = Path(path)
        try:
            pairs = parse_key_values(path.read_text().splitlines(), str(path))
            config.apply(pairs)
            logger.debug(f"Loaded {len(pairs)} settings from {path}")
            return config
        except (OSError, SequenceFormatError) as e:
            logger.error(f"Cannot read config {path}: {str(e)}")
            raise ConfigurationError(f"Cannot read config {path}: {e}") from e
