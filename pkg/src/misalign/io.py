"""Headered line-delimited JSON files and atomic writes.

Every artifact this engine writes is a text file whose first line is a JSON
header (format name, schema version, engine version, provenance) followed by
one payload line per item. Headers never contain timestamps, so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import VersionMismatch

ENGINE_VERSION = "0.1.0"


def dumps(obj: Any) -> str:
    """Canonical one-line JSON: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config: dict) -> str:
    """Short stable digest of an effective (defaults-resolved) config."""
    return hashlib.sha256(dumps(config).encode("utf-8")).hexdigest()[:16]


def make_header(fmt: str, version: int, **meta: Any) -> dict:
    header = {"format": fmt, "version": version, "engine_version": ENGINE_VERSION}
    header.update(meta)
    return header


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_headered_lines(path: str | Path, header: dict, lines: Iterable[str]) -> None:
    body = "\n".join(lines)
    text = dumps(header) + ("\n" + body if body else "") + "\n"
    atomic_write_text(path, text)


def read_header(path: str | Path, expected_format: str, max_version: int) -> dict:
    """Read and validate the header line of an artifact file."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError:
        raise VersionMismatch(found=first.strip()[:60], expected=expected_format)
    if not isinstance(header, dict) or header.get("format") != expected_format:
        raise VersionMismatch(found=header if isinstance(header, dict) else first.strip()[:60],
                              expected=expected_format)
    if not isinstance(header.get("version"), int) or header["version"] > max_version:
        raise VersionMismatch(found=header.get("version"), expected=f"version <= {max_version}")
    return header


def align_table(rows: list[list[str]], indent: str = "  ") -> str:
    """Render rows as a left-aligned text table (first row is the header)."""
    if not rows:
        return ""
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for number, row in enumerate(rows):
        lines.append(indent + "  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip())
        if number == 0:
            lines.append(indent + "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def read_headered_lines(path: str | Path, expected_format: str,
                        max_version: int) -> tuple[dict, Iterator[tuple[int, str]]]:
    """Return (header, iterator of (line_number, payload_line)).

    Line numbers are 1-based file positions (the header is line 1). Blank
    lines are skipped.
    """
    header = read_header(path, expected_format, max_version)

    def _iter() -> Iterator[tuple[int, str]]:
        with open(path, "r", encoding="utf-8") as fh:
            fh.readline()
            for number, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if line:
                    yield number, line

    return header, _iter()
