"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from .errors import ParseError


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines. ``#`` starts a comment; keys use ``_`` or ``-``."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key = value, got {line!r}", lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ParseError("empty key", lineno)
            key = key.replace("-", "_")
            if key in out:
                raise ParseError(f"duplicate key {key!r}", lineno)
            out[key] = value
    return out


def write_config(values: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")
