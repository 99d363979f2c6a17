"""Human-readable ``key = value`` documents used for configs and reports.

Values are written as JSON literals so numbers, lists and strings round-trip;
a bare token that is not valid JSON is read back as a string.
"""

from __future__ import annotations

import json
import os
from pathlib import Path


def dumps(doc: dict) -> str:
    lines = []
    for key, value in doc.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"invalid key {key!r}")
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict:
    doc = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        value = value.strip()
        try:
            doc[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            doc[key.strip()] = value
    return doc


def dump(path: str | os.PathLike, doc: dict) -> None:
    Path(path).write_text(dumps(doc))


def load(path: str | os.PathLike) -> dict:
    return loads(Path(path).read_text())
