"""Checkpoint files, marker files and the newline-delimited JSON event log."""

from __future__ import annotations

import json
import os
import tempfile
import threading
import time
from pathlib import Path

from ..model import FLModel, decode_model, encode_model


def checkpoint_name(round: int) -> str:
    return f"round_{round}.flm"


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_model(model: FLModel, checkpoint_dir: str | os.PathLike, round: int) -> Path:
    """Atomically write ``round_<round>.flm`` and point ``latest.txt`` at it."""
    directory = Path(checkpoint_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / checkpoint_name(round)
    _atomic_write(path, encode_model(model))
    write_marker(directory, "latest", path.name)
    return path


def write_marker(checkpoint_dir: str | os.PathLike, marker: str, filename: str) -> None:
    _atomic_write(Path(checkpoint_dir) / f"{marker}.txt", (filename + "\n").encode())


def read_marker(checkpoint_dir: str | os.PathLike, marker: str) -> str | None:
    path = Path(checkpoint_dir) / f"{marker}.txt"
    if not path.exists():
        return None
    return path.read_text().strip()


def load_model(path: str | os.PathLike) -> FLModel:
    return decode_model(Path(path).read_bytes())


class EventLog:
    """Appends one JSON object per line; every event gets a wall-clock ``ts``."""

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path is not None else None
        self.events: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def emit(self, event: str, **fields) -> dict:
        record = {"event": event, "ts": time.time(), **fields}
        with self._lock:
            self.events.append(record)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]
