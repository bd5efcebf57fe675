"""Seed derivation and JSON-lines helpers.

All randomness in the toolkit flows through `derive_seed`, a stable hash over
the global seed plus a context path. Python's built-in `hash` is salted per
process, so seeds are derived with SHA-256 instead.
"""

from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


def derive_seed(*parts: Any) -> int:
    """Fold arbitrary parts into a reproducible 64-bit seed."""
    tag = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts: Any) -> random.Random:
    return random.Random(derive_seed(*parts))


def derive_np_rng(*parts: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    """Write one JSON object per line (UTF-8, LF). Returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")
            n += 1
    return n


def append_jsonl(path: str | Path, row: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(row, ensure_ascii=False))
        fh.write("\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
