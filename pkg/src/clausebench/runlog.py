"""Append-only JSONL run log with bit-stable serialization.

Every float is quantized to six decimals when a record is built and written
with exactly six decimals, so a record read back compares equal to the one
written and two runs with equal values produce equal bytes.
"""

from __future__ import annotations

import csv
import fcntl
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import LogError

FLOAT_DIGITS = 6


def quantize(value: Any) -> Any:
    """Round floats to the log precision, recursively. Non-finite floats raise LogError."""
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise LogError(f"cannot log non-finite float {value!r}")
        q = float(f"{value:.{FLOAT_DIGITS}f}")
        return 0.0 if q == 0 else q
    if isinstance(value, dict):
        return {str(k): quantize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [quantize(v) for v in value]
    raise LogError(f"cannot log value of type {type(value).__name__}")


def canonical_json(value: Any) -> str:
    """Sorted keys, no whitespace, floats with fixed precision."""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise LogError(f"cannot log non-finite float {value!r}")
        text = f"{value:.{FLOAT_DIGITS}f}"
        return "0.000000" if text == "-0.000000" else text
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        items = sorted((str(k), v) for k, v in value.items())
        return "{" + ",".join(f"{json.dumps(k, ensure_ascii=False)}:{canonical_json(v)}"
                              for k, v in items) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in value) + "]"
    raise LogError(f"cannot serialize value of type {type(value).__name__}")


@dataclass
class RunRecord:
    scenario_id: str
    scenario_input: dict
    decision: str
    trace: list[dict]
    retrieved: list[dict]
    mode: str
    k: int
    query_text: str
    nlq: str
    sql: str | None
    result_ids: list[str]
    result_hash: str
    sql_status: str
    latency_ms: dict
    stamps: dict
    fired_rules: list[str] = field(default_factory=list)
    conflicts: list[str] = field(default_factory=list)
    grounding_ok: bool = True
    config: dict = field(default_factory=dict)
    reflection: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, quantize(getattr(self, f.name)))

    @property
    def trace_ids(self) -> list[str]:
        return [t["clause_id"] for t in self.trace]

    @property
    def retrieved_ids(self) -> list[str]:
        return [r["clause_id"] for r in self.retrieved]

    @property
    def total_latency(self) -> float:
        return float(self.latency_ms.get("total", 0.0))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        if not isinstance(doc, dict):
            raise LogError("record must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise LogError(f"unknown record keys {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in doc.items() if k in names})
        except TypeError as exc:
            raise LogError(f"incomplete record: {exc}") from exc


def append_record(log: str | Path, r: RunRecord) -> None:
    """Append one line under an exclusive lock with a single write call."""
    if not r.grounding_ok:
        raise LogError(f"{r.scenario_id}: refusing to log an ungrounded record")
    line = (r.to_json() + "\n").encode("utf-8")
    path = Path(log)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        try:
            os.write(fd, line)
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
    finally:
        os.close(fd)


def read_log(log: str | Path) -> list[RunRecord]:
    """Records in file order. Corrupt lines are skipped with a warning."""
    path = Path(log)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LogError(f"cannot read log {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(RunRecord.from_dict(json.loads(line)))
        except (ValueError, LogError, TypeError) as exc:
            warnings.warn(f"{path}:{lineno}: skipped corrupt log line ({exc})", stacklevel=2)
    return records


def write_csv(path: str | Path, header, rows) -> None:
    """Write a metrics table with ``\n`` line endings so replays compare byte for byte."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
