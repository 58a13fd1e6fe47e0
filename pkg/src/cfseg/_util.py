"""Small I/O helpers: atomic writes and canonical JSON."""

from __future__ import annotations

import json
import os
from pathlib import Path


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a ``.partial`` sibling and rename.

    An interrupted run leaves at most a ``.partial`` file, never a
    truncated file under the final name.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, obj) -> None:
    """Dump ``obj`` as canonical JSON (sorted keys, fixed layout)."""
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
