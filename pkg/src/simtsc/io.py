"""Small file helpers shared by the serializers: atomic writes and float text."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path


def atomic_write_text(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def fmt(x: float) -> str:
    # repr is the shortest string that parses back to the same double
    return repr(float(x))


def check_magic(line: str, magic: str, version: int, source) -> None:
    expected = f"# {magic} v{version}"
    if line.rstrip("\n") != expected:
        raise ValueError(f"{source}: line 1: expected header {expected!r}, got {line.strip()!r}")
