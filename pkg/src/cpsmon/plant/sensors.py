"""Sensor models and their wire formats.

GPS frames are fixed-width NMEA-like ASCII sentences::

    $GPGGA,SSSS,DDMM.MMMM,N,DDDMM.MMMM,W*HH\\r\\n     (41 bytes)

where ``HH`` is the XOR of every byte between ``$`` and ``*``.

Barometer frames are 9 bytes, little-endian::

    0x55 | seq:u8 | pressure_pa:u32 | temp_centideg:i16 | sum8

where ``sum8`` is the byte sum of the first eight bytes modulo 256.
"""
from __future__ import annotations

import random
import re
import struct
from dataclasses import dataclass, field
from typing import Callable

from .bus import BusConfig

GPS_FRAME_LEN = 41
BARO_FRAME_LEN = 9
BARO_SYNC = 0x55

_GPS_RE = re.compile(
    rb"^\$(GPGGA,(\d{4}),(\d{4}\.\d{4}),([NS]),(\d{5}\.\d{4}),([EW]))\*([0-9A-F]{2})\r\n$"
)


class FrameError(ValueError):
    """Frame failed structural or checksum validation."""


def nmea_checksum(body: bytes) -> int:
    cs = 0
    for b in body:
        cs ^= b
    return cs


def sum8(data: bytes) -> int:
    return sum(data) & 0xFF


def _rng(kind: str, seed: int, tick: int) -> random.Random:
    return random.Random(f"{kind}:{seed}:{tick}")


def gps_frame(tick: int, seed: int, seq: int) -> bytes:
    rng = _rng("gps", seed, tick)
    lat = 3813.0 + rng.uniform(0.0, 5.0)  # ddmm.mmmm
    lon = 7824.0 + rng.uniform(0.0, 5.0)  # dddmm.mmmm
    body = f"GPGGA,{seq % 10000:04d},{lat:09.4f},N,{lon:010.4f},W".encode()
    frame = b"$" + body + b"*" + f"{nmea_checksum(body):02X}".encode() + b"\r\n"
    assert len(frame) == GPS_FRAME_LEN
    return frame


def parse_gps(frame: bytes) -> dict:
    m = _GPS_RE.match(frame)
    if not m:
        raise FrameError("malformed GPS sentence")
    body, _, lat, ns, lon, ew, cs = m.groups()
    if int(cs, 16) != nmea_checksum(body):
        raise FrameError("GPS checksum mismatch")
    lat_deg = int(lat[:2]) + float(lat[2:]) / 60.0
    lon_deg = int(lon[:3]) + float(lon[3:]) / 60.0
    return {
        "lat": -lat_deg if ns == b"S" else lat_deg,
        "lon": -lon_deg if ew == b"W" else lon_deg,
    }


def baro_frame(tick: int, seed: int, seq: int) -> bytes:
    rng = _rng("baro", seed, tick)
    pressure = 101325 + rng.randint(-200, 200)
    temp = 2000 + rng.randint(-50, 50)
    head = struct.pack("<BBIh", BARO_SYNC, seq & 0xFF, pressure, temp)
    return head + bytes([sum8(head)])


def parse_baro(frame: bytes) -> dict:
    if len(frame) != BARO_FRAME_LEN or frame[0] != BARO_SYNC:
        raise FrameError("malformed barometer frame")
    if sum8(frame[:-1]) != frame[-1]:
        raise FrameError("barometer checksum mismatch")
    _, _, pressure, temp = struct.unpack("<BBIh", frame[:-1])
    return {"pressure": pressure, "temperature": temp / 100.0}


GENERATORS: dict[str, Callable[[int, int, int], bytes]] = {"gps": gps_frame, "baro": baro_frame}
PARSERS: dict[str, Callable[[bytes], dict]] = {"gps": parse_gps, "baro": parse_baro}
FRAME_LEN = {"gps": GPS_FRAME_LEN, "baro": BARO_FRAME_LEN}


@dataclass
class SensorModel:
    sensor_id: str
    kind: str
    emit_period_ticks: int
    offset: int
    nominal: BusConfig
    bus: BusConfig = field(init=False)

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if self.emit_period_ticks <= 0:
            raise ValueError("emit period must be positive")
        self.bus = self.nominal

    def due(self, tick: int) -> bool:
        return tick >= self.offset and (tick - self.offset) % self.emit_period_ticks == 0

    def seq(self, tick: int) -> int:
        return (tick - self.offset) // self.emit_period_ticks

    def frame_generator(self, tick: int, seed: int) -> bytes:
        return GENERATORS[self.kind](tick, seed, self.seq(tick))

    def next_emission(self, after: int) -> int:
        """First emission tick strictly greater than ``after``."""
        if after < self.offset:
            return self.offset
        k = (after - self.offset) // self.emit_period_ticks + 1
        return self.offset + k * self.emit_period_ticks

    @property
    def frame_len(self) -> int:
        return FRAME_LEN[self.kind]


@dataclass
class Frame:
    sensor_id: str
    start: int
    bit_period: int
    data: bytes
    seq: int

    @property
    def first_char_end(self) -> int:
        return self.start + 10 * self.bit_period

    @property
    def end(self) -> int:
        return self.start + 10 * self.bit_period * len(self.data)


def decode(kind: str, frame: bytes) -> dict:
    return PARSERS[kind](frame)
