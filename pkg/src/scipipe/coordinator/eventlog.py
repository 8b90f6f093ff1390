"""Append-only JSONL event log.

Every state-changing operation on the coordinator appends one event; replay
at startup reconstructs an equivalent in-memory state. Events are flushed
to disk before the operation is acknowledged.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Iterator


class EventLog:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, event: dict) -> None:
        line = json.dumps(event, separators=(",", ":"), sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    @staticmethod
    def read(path: str | os.PathLike) -> Iterator[dict]:
        path = Path(path)
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)
