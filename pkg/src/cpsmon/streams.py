"""Bounded-history monitored streams.

Each stream keeps a k-prefix ``s(k-m) .. s(k)`` of depth ``m``. Ticks on which
a stream receives nothing are recorded as a gap marker rather than left
absent; consecutive silent ticks coalesce into one marker whose tick is the
latest silent tick, so inactivity spanning thousands of ticks stays visible
inside a short window.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional

from .errors import EmptyWindow, NonMonotonicTick, SkippedTick, UnregisteredStream

DEFAULT_DEPTH = 32


@dataclass(frozen=True)
class Gap:
    """Run of ``count`` consecutive ticks without a sample."""

    count: int


@dataclass(frozen=True)
class Sample:
    tick: int
    value: Any

    @property
    def is_gap(self) -> bool:
        return isinstance(self.value, Gap)


@dataclass(frozen=True)
class TransitionRecord:
    tick: int
    from_state: str
    to_state: str
    cause: str


class StreamWindow:
    def __init__(self, stream_id: str, depth: int = DEFAULT_DEPTH, role: str = "state"):
        if depth < 1:
            raise ValueError("depth must be positive")
        self.stream_id = stream_id
        self.depth = depth
        self.role = role
        self._buf: deque[Sample] = deque(maxlen=depth + 1)
        # open gap run [start, end]; the buffer's last entry is its stale
        # placeholder until _materialise() rewrites it
        self._gap: Optional[list[int]] = None

    def __len__(self) -> int:
        return len(self._buf)

    def __repr__(self) -> str:
        return f"StreamWindow({self.stream_id!r}, depth={self.depth}, len={len(self._buf)})"

    @property
    def last_tick(self) -> Optional[int]:
        if self._gap is not None:
            return self._gap[1]
        return self._buf[-1].tick if self._buf else None

    def push(self, sample: Sample) -> "StreamWindow":
        last = self.last_tick
        if last is not None and sample.tick <= last:
            raise NonMonotonicTick(f"{self.stream_id}: tick {sample.tick} after {last}")
        self._materialise()
        self._gap = None
        self._buf.append(sample)
        return self

    def mark_gap(self, tick: int) -> "StreamWindow":
        gap = self._gap
        if gap is not None:
            if tick <= gap[1]:
                raise NonMonotonicTick(f"{self.stream_id}: tick {tick} after {gap[1]}")
            gap[1] = tick
            return self
        buf = self._buf
        if buf and tick <= buf[-1].tick:
            raise NonMonotonicTick(f"{self.stream_id}: tick {tick} after {buf[-1].tick}")
        if buf and buf[-1].is_gap:
            last = buf[-1]
            self._gap = [last.tick - last.value.count + 1, tick]
        else:
            self._gap = [tick, tick]
            buf.append(Sample(tick, Gap(1)))
        return self

    def _materialise(self) -> None:
        if self._gap is not None:
            start, end = self._gap
            self._buf[-1] = Sample(end, Gap(end - start + 1))

    def prefix(self) -> tuple[Sample, ...]:
        if not self._buf:
            raise EmptyWindow(self.stream_id)
        self._materialise()
        return tuple(self._buf)

    def samples(self) -> list[Sample]:
        """Non-gap samples, oldest first."""
        return [s for s in self._buf if not isinstance(s.value, Gap)]

    def current(self, tick: int) -> Optional[Sample]:
        """The sample received exactly at ``tick``, if any."""
        if self._gap is None and self._buf:
            s = self._buf[-1]
            if s.tick == tick and not isinstance(s.value, Gap):
                return s
        return None

    @property
    def gap_count(self) -> int:
        if self._gap is not None:
            return self._gap[1] - self._gap[0] + 1
        return 0

    def copy(self) -> "StreamWindow":
        self._materialise()
        w = StreamWindow(self.stream_id, self.depth, self.role)
        w._buf.extend(self._buf)
        w._gap = list(self._gap) if self._gap is not None else None
        return w

    @classmethod
    def from_samples(cls, stream_id: str, samples: Iterable[Sample], depth: int = DEFAULT_DEPTH) -> "StreamWindow":
        w = cls(stream_id, depth)
        for s in samples:
            w.push(s)
            if s.is_gap:
                w._gap = [s.tick - s.value.count + 1, s.tick]
        return w


class MonitoredStreams:
    """Synchronised collection of windows sharing one current tick ``k``."""

    def __init__(self, windows: Iterable[StreamWindow] = (), k: int = -1):
        self.windows: dict[str, StreamWindow] = {}
        self.k = k
        for w in windows:
            self.add(w)

    def add(self, window: StreamWindow) -> None:
        if window.stream_id in self.windows:
            raise ValueError(f"duplicate stream {window.stream_id!r}")
        self.windows[window.stream_id] = window

    def __getitem__(self, stream_id: str) -> StreamWindow:
        try:
            return self.windows[stream_id]
        except KeyError:
            raise UnregisteredStream(stream_id) from None

    def __contains__(self, stream_id: str) -> bool:
        return stream_id in self.windows

    def by_role(self, role: str) -> list[StreamWindow]:
        return [w for w in self.windows.values() if w.role == role]

    def advance(self, tick: int, samples: Mapping[str, Any]) -> "MonitoredStreams":
        if tick != self.k + 1:
            raise SkippedTick(f"expected tick {self.k + 1}, got {tick}")
        windows = self.windows
        if samples:
            for sid in samples:
                if sid not in windows:
                    raise UnregisteredStream(sid)
            for sid, w in windows.items():
                if sid in samples:
                    w.push(Sample(tick, samples[sid]))
                else:
                    w.mark_gap(tick)
        else:
            for w in windows.values():
                w.mark_gap(tick)
        self.k = tick
        return self

    def gap_counts(self) -> dict[str, int]:
        return {sid: w.gap_count for sid, w in self.windows.items()}

    def slice(self, stream_ids: Iterable[str]) -> "MonitoredStreams":
        return MonitoredStreams((self[s].copy() for s in stream_ids), self.k)

    def copy(self) -> "MonitoredStreams":
        return self.slice(self.windows)
