"""Newline-delimited JSON run logs.

Line 1 is a header ``{"schema": "cpsmon.log/1", "scenario": {...}, "reference": {...}}``.
Every following line is one record::

    {"kind": ..., "label": ..., "payload": {...}, "seq": n, "source": ..., "tick": t}

Records are ordered by (tick, source rank, emission order); the writer
numbers them from 0 with ``seq``. Source ranks follow the tick loop: plant, harness, hrim, i2m,
eim, scheduler.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Iterator

from .errors import CorruptLog

SCHEMA = "cpsmon.log/1"
SOURCES = ("plant", "harness", "hrim", "i2m", "eim", "scheduler")
RANK = {s: i for i, s in enumerate(SOURCES)}
FIELDS = ("kind", "label", "payload", "seq", "source", "tick")


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class LogRecord:
    tick: int
    source: str
    seq: int
    kind: str
    label: str
    payload: dict

    def as_dict(self) -> dict:
        return {"tick": self.tick, "source": self.source, "seq": self.seq,
                "kind": self.kind, "label": self.label, "payload": self.payload}


class LogWriter:
    """Buffers one tick of records and writes them in canonical order."""

    def __init__(self, stream: IO[str], header: dict):
        self.stream = stream
        self.seq = 0
        self._buf: list[tuple[int, int, int, str, str, str, dict]] = []
        self.counts: dict[str, int] = {}
        stream.write(dumps({"schema": SCHEMA, **header}) + "\n")

    def add(self, tick: int, source: str, kind: str, label: str, payload: dict) -> None:
        if source not in RANK:
            raise ValueError(f"unknown log source {source!r}")
        self._buf.append((tick, RANK[source], len(self._buf), source, kind, label, payload))

    def flush(self) -> None:
        self._buf.sort(key=lambda r: r[:3])
        lines = []
        for tick, _, _, source, kind, label, payload in self._buf:
            lines.append(dumps({"tick": tick, "source": source, "seq": self.seq,
                                "kind": kind, "label": label, "payload": payload}))
            self.seq += 1
            self.counts[kind] = self.counts.get(kind, 0) + 1
        if lines:
            self.stream.write("\n".join(lines) + "\n")
        self._buf.clear()


def _check_record(obj: Any, lineno: int) -> LogRecord:
    if not isinstance(obj, dict) or set(obj) != set(FIELDS):
        raise CorruptLog(f"line {lineno}: record fields {sorted(obj) if isinstance(obj, dict) else obj!r}")
    if obj["source"] not in RANK or not isinstance(obj["payload"], dict):
        raise CorruptLog(f"line {lineno}: bad source or payload")
    if not isinstance(obj["tick"], int) or not isinstance(obj["seq"], int):
        raise CorruptLog(f"line {lineno}: tick and seq must be integers")
    return LogRecord(obj["tick"], obj["source"], obj["seq"], obj["kind"], obj["label"], obj["payload"])


def iter_log(lines) -> Iterator:
    """Yield the header dict, then each LogRecord; enforces the ordering contract."""
    it = iter(lines)
    try:
        header = json.loads(next(it))
    except StopIteration:
        raise CorruptLog("empty log") from None
    except json.JSONDecodeError as e:
        raise CorruptLog(f"line 1: {e.msg}") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise CorruptLog(f"line 1: expected schema {SCHEMA}")
    yield header
    prev = None
    for lineno, line in enumerate(it, 2):
        if not line.strip():
            continue
        try:
            rec = _check_record(json.loads(line), lineno)
        except json.JSONDecodeError as e:
            raise CorruptLog(f"line {lineno}: {e.msg}") from None
        key = (rec.tick, RANK[rec.source])
        # gaps are tolerated so a log with records removed still replays;
        # verify then reports what the missing records changed
        if prev is not None and rec.seq <= prev[2]:
            raise CorruptLog(f"line {lineno}: seq {rec.seq} does not increase")
        if prev is not None and key < prev[:2]:
            raise CorruptLog(f"line {lineno}: record out of (tick, source) order")
        prev = (*key, rec.seq)
        yield rec


def read_log(path) -> tuple[dict, list[LogRecord]]:
    with Path(path).open(encoding="utf-8") as fh:
        it = iter_log(fh)
        header = next(it)
        return header, list(it)
