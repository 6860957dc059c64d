"""File helpers: atomic writes and line-delimited JSON records."""

import json
import os
import tempfile
from collections.abc import Iterable
from pathlib import Path
from typing import Any

from pydantic import BaseModel


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """Write ``payload`` to ``path`` through a temporary file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_model(path: str | Path, model: BaseModel) -> Path:
    """Serialize a pydantic model as indented JSON, atomically."""
    return atomic_write_text(path, model.model_dump_json(indent=2) + "\n")


def append_jsonl(path: str | Path, record: BaseModel | dict[str, Any]) -> None:
    """Append one record to a line-delimited JSON file."""
    line = record.model_dump_json() if isinstance(record, BaseModel) else json.dumps(record)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        handle.write(line + "\n")


def write_jsonl(path: str | Path, records: Iterable[BaseModel]) -> Path:
    """Replace ``path`` with one JSON line per record."""
    lines = "".join(record.model_dump_json() + "\n" for record in records)
    return atomic_write_text(path, lines)


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Read a line-delimited JSON file, skipping blank lines."""
    with Path(path).open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
