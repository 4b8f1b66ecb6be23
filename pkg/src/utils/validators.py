# File: src/utils/validators.py

"""Parsing and validation of "key = value" text used by configs and manifests."""

import math
import typing
from typing import Any, Dict, Iterable, Mapping

from models.errors import ConfigurationError, SequenceFormatError

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_key_values(lines: Iterable[str], source: str = "<text>") -> Dict[str, str]:
    """
    Read ``key = value`` lines; ``#`` starts a comment and blank lines are skipped.

    Raises:
        SequenceFormatError: on a line without ``=``, an empty key or a repeated key
    """
    pairs: Dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise SequenceFormatError(f"{source}:{number}: expected 'key = value', got {raw.rstrip()!r}")
        if key in pairs:
            raise SequenceFormatError(f"{source}:{number}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def validate_keys(given: Iterable[str], known: Iterable[str]):
    """
    Raises:
        ConfigurationError: naming every unknown key
    """
    unknown = sorted(set(given) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")


def _parse_bool(key: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


def coerce_value(key: str, text: str, annotation: Any) -> Any:
    """
    Convert ``text`` to the declared field type.

    Supports bool, int, float, str, ``Optional[...]`` of those (``none``) and
    tuples written as comma-separated values.

    Raises:
        ConfigurationError: if the text does not parse as the declared type
    """
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union and type(None) in args:
        if text.strip().lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)]
        return coerce_value(key, text, inner[0])
    if origin is tuple:
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        item_types = [args[0]] * len(parts) if len(args) == 2 and args[1] is Ellipsis else list(args)
        if len(item_types) != len(parts):
            raise ConfigurationError(f"{key}: expected {len(item_types)} values, got {len(parts)}")
        return tuple(coerce_value(key, p, t) for p, t in zip(parts, item_types))
    try:
        if annotation is bool:
            return _parse_bool(key, text)
        if annotation is int:
            return int(text)
        if annotation is float:
            value = float(text)
            if math.isnan(value):
                raise ValueError("nan")
            return value
        if annotation is str:
            return text.strip()
    except ValueError as e:
        raise ConfigurationError(f"{key}: cannot read {text!r} as {annotation.__name__}") from e
    raise ConfigurationError(f"{key}: unsupported configuration type {annotation}")


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def require_keys(pairs: Mapping[str, str], required: Iterable[str], source: str):
    """
    Raises:
        SequenceFormatError: naming the first missing key
    """
    for key in required:
        if key not in pairs:
            raise SequenceFormatError(f"{source}: missing key {key!r}")
