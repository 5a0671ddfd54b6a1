"""
Report I/O - JSON and CSV artifacts and the run manifest that ties them together.

Floats are written with 17 significant digits so every 64-bit value
survives a write/read cycle, and re-serializing a parsed artifact gives
the same bytes.
"""

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np


def format_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _plain(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _encode(obj: Any, indent: int, level: int, out: List[str]) -> None:
    obj = _plain(obj)
    pad = " " * (indent * (level + 1))
    close = " " * (indent * level)
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (key, value) in enumerate(obj.items()):
            out.append(pad + json.dumps(str(key), ensure_ascii=False) + ": ")
            _encode(value, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(close + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, value in enumerate(obj):
            out.append(pad)
            _encode(value, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(close + "]")
    else:
        raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def dumps_json(obj: Any, indent: int = 2) -> str:
    """Serialize with 17 significant digits per float; non-finite values as NaN/Infinity."""
    out: List[str] = []
    _encode(obj, indent, 0, out)
    return "".join(out) + "\n"


def load_json(path: str) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_json(data: Any, path: Path) -> None:
    _atomic_write(Path(path), dumps_json(data))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]], manifest_digest: Optional[str] = None) -> str:
    buf = io.StringIO()
    if manifest_digest:
        buf.write(f"# manifest: {manifest_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, float) else _plain(v) for v in row])
    return buf.getvalue()


def save_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]],
             manifest_digest: Optional[str] = None) -> None:
    _atomic_write(Path(path), csv_text(header, rows, manifest_digest))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def input_digest(ref: str) -> str:
    """Digest of a file's bytes, or of the reference string for registry keys."""
    path = Path(ref)
    if path.is_file():
        return sha256_bytes(path.read_bytes())
    return sha256_bytes(f"registry:{ref}".encode("utf-8"))


@dataclass
class RunManifest:
    command: str
    inputs: Dict[str, str]
    version: str
    seed: int
    flags: Dict[str, Any] = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_clock_seconds: float = 0.0
    outputs: List[str] = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    @property
    def digest(self) -> str:
        """Run key over everything that determines the results (not timing or outputs)."""
        key = {"command": self.command, "inputs": self.inputs, "version": self.version,
               "seed": self.seed, "flags": self.flags}
        return sha256_bytes(dumps_json(key).encode("utf-8"))

    def finish(self) -> None:
        self.wall_clock_seconds = time.perf_counter() - self._t0

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "command": self.command,
            "inputs": self.inputs,
            "version": self.version,
            "seed": self.seed,
            "flags": self.flags,
            "started": self.started,
            "wall_clock_seconds": self.wall_clock_seconds,
            "outputs": self.outputs,
        }
