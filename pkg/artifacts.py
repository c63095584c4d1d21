"""
Artifact writing helpers: atomic file replacement and deterministic JSON.
"""

import json
import os
import tempfile
from pathlib import Path
from typing import Any

TOOL_NAME = "camtrap-pipeline"
TOOL_VERSION = "0.3.0"


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write text to a temp file next to `path`, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str | Path, obj: Any) -> Path:
    return atomic_write_text(path, dumps_json(obj))


def tool_stamp() -> dict[str, str]:
    """Self-description embedded in every output document."""
    return {"tool": TOOL_NAME, "version": TOOL_VERSION}
