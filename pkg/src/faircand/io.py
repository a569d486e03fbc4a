"""Shared file helpers: atomic writes and comment-tolerant CSV."""
from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CONFIG_COMMENT_PREFIX = "# config "


def atomic_write_text(path, text: str) -> None:
    """Write text via a temp file + rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(
    path,
    fieldnames: Sequence[str],
    rows: Iterable[Mapping],
    config: Mapping | None = None,
) -> None:
    """Write CSV rows; an optional resolved-config snapshot is embedded as a
    leading ``# config`` comment line ahead of the header."""
    import io as _io

    buf = _io.StringIO()
    if config is not None:
        buf.write(CONFIG_COMMENT_PREFIX + json.dumps(config, sort_keys=True) + "\n")
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _render(row.get(k)) for k in fieldnames})
    atomic_write_text(path, buf.getvalue())


def _render(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def read_csv(path) -> tuple[list[dict], dict | None]:
    """Read a CSV written by :func:`write_csv`; returns (rows, config)."""
    config = None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if first.startswith(CONFIG_COMMENT_PREFIX):
            config = json.loads(first[len(CONFIG_COMMENT_PREFIX):])
        else:
            fh.seek(0)
        reader = csv.DictReader(fh)
        rows = list(reader)
    return rows, config
