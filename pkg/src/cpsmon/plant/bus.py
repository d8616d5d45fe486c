"""UART line model: 8N1 framing, bit timing in simulation ticks."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from ..errors import InsufficientEdges

TICK_RATE = 1_000_000  # ticks per simulated second


@dataclass(frozen=True)
class BusConfig:
    bus_id: str
    baud: int = 57600
    data_bits: int = 8
    parity: str = "none"
    stop_bits: int = 1
    tick_rate: int = TICK_RATE

    def __post_init__(self):
        if self.baud <= 0:
            raise ValueError("baud must be positive")
        if self.parity != "none" or self.data_bits != 8 or self.stop_bits != 1:
            raise ValueError("only 8N1 framing is modelled")

    @property
    def bit_period_ticks(self) -> int:
        return max(1, round(self.tick_rate / self.baud))

    @property
    def char_bits(self) -> int:
        return 1 + self.data_bits + self.stop_bits

    @property
    def char_ticks(self) -> int:
        return self.char_bits * self.bit_period_ticks

    def frame_ticks(self, nbytes: int) -> int:
        return nbytes * self.char_ticks

    def with_baud(self, baud: int) -> "BusConfig":
        return BusConfig(self.bus_id, baud, self.data_bits, self.parity, self.stop_bits, self.tick_rate)


def char_levels(byte: int) -> list[int]:
    """Line levels of one 8N1 character: start, LSB-first data, stop."""
    return [0] + [(byte >> i) & 1 for i in range(8)] + [1]


def edge_ticks(data: bytes, start: int, bit_period: int, upto: Optional[int] = None) -> list[int]:
    """Ticks at which the line changes level while ``data`` is transmitted.

    The line idles high before ``start``; only edges at or before ``upto``
    are returned.
    """
    edges = []
    level = 1
    t = start
    for byte in data:
        for bit in char_levels(byte):
            if upto is not None and t > upto:
                return edges
            if bit != level:
                edges.append(t)
                level = bit
            t += bit_period
    return edges


def measure_bit_period(edges: Sequence[int]) -> int:
    """Modal inter-edge interval; ties resolve to the shortest interval."""
    if len(edges) < 2:
        raise InsufficientEdges(f"need at least 2 edges, got {len(edges)}")
    counts = Counter(b - a for a, b in zip(edges, edges[1:]))
    best = max(counts.values())
    return min(d for d, n in counts.items() if n == best)


def decode_line(edges: Iterable[int], start: int, bit_period: int, nbytes: int) -> bytes:
    """Recover bytes from an edge list sampled at mid-bit (test helper)."""
    edges = list(edges)
    out = bytearray()
    t = start

    def level_at(x):
        lvl = 1
        for e in edges:
            if e > x:
                break
            lvl ^= 1
        return lvl

    for _ in range(nbytes):
        bits = [level_at(t + bit_period * i + bit_period // 2) for i in range(10)]
        out.append(sum(b << i for i, b in enumerate(bits[1:9])))
        t += 10 * bit_period
    return bytes(out)
