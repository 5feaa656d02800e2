"""Deterministic CSV writing.

Result files are the toolkit's external contract, and reruns of the same
config must be byte-identical, so all values funnel through one formatter:
floats use Python's shortest round-trip repr, booleans are lowercase words,
and None becomes an empty cell (used for censored values).
"""

from __future__ import annotations

import io
from pathlib import Path


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(header: list[str], rows: list[tuple]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(format_value(v) for v in row) + "\n")
    return buf.getvalue()


def write_csv(path: str | Path, header: list[str], rows: list[tuple]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_csv(header, rows), encoding="utf-8")
    return path
