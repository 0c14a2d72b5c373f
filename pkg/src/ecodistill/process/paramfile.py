"""Flat ``name = value`` parameter files; ``name[class_id] = value`` for per-class entries."""

from __future__ import annotations

import re
from pathlib import Path

from ..data import fmt
from ..errors import ParseError

_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\[\s*(-?\d+)\s*\])?\s*=\s*(\S+)\s*$")


def parse_params(text: str) -> dict:
    """Scalars map to floats, per-class entries to ``{class_id: float}``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise ParseError(lineno, f"cannot parse {raw!r}")
        name, cls, val = m.group(1), m.group(2), m.group(3)
        try:
            num = float(val)
        except ValueError:
            raise ParseError(lineno, f"{name}: {val!r} is not a number") from None
        if cls is None:
            if isinstance(out.get(name), dict):
                raise ParseError(lineno, f"{name} mixes scalar and per-class entries")
            out[name] = num
        else:
            slot = out.setdefault(name, {})
            if not isinstance(slot, dict):
                raise ParseError(lineno, f"{name} mixes scalar and per-class entries")
            slot[int(cls)] = num
    return out


def load_params(path) -> dict:
    return parse_params(Path(path).read_text())


def dump_params(params: dict) -> str:
    lines = []
    for name, val in params.items():
        if isinstance(val, dict):
            lines.extend(f"{name}[{k}] = {fmt(v)}" for k, v in sorted(val.items()))
        else:
            lines.append(f"{name} = {fmt(val)}")
    return "\n".join(lines) + "\n"
