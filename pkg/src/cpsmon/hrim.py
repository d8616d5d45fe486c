"""Hardware resource integrity monitor.

HRIM sits on the sensor side of the crossbar. It times the first character
of every frame it sees, compares the observed bit period with the expected
bus configuration, stores good frames into its register blocks and isolates
a sensor whose bus misbehaves. It never looks at payload meaning.

Register block layout (one block per sensor, 68 bytes)::

    offset 0  u16 LE  status   bit0 data_ready, bit1 sensor_okay, bit2 isolated
    offset 2  u16 LE  length   payload length in bytes
    offset 4  64 B    payload  zero padded
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .ec import (
    FluentId,
    Happens,
    HoldsAt,
    Implies,
    Initially,
    Persists,
    RuleSet,
    Trigger,
    initiates,
    terminates,
)
from .errors import InsufficientEdges
from .monitor import DetectionPredicate, Monitor, PatternSpec
from .plant.bus import BusConfig
from .plant.core import ISOLATED, Plant

REG_PAYLOAD = 64
REG_BLOCK = struct.calcsize("<HH") + REG_PAYLOAD
ST_READY, ST_OKAY, ST_ISOLATED = 0x1, 0x2, 0x4


def pack_register(status: int, payload: bytes) -> bytes:
    if len(payload) > REG_PAYLOAD:
        raise ValueError("payload does not fit the register block")
    return struct.pack("<HH", status, len(payload)) + payload.ljust(REG_PAYLOAD, b"\0")


def unpack_register(block: bytes) -> tuple[int, bytes]:
    status, length = struct.unpack_from("<HH", block)
    return status, bytes(block[4:4 + length])


def check_bus_config(observed_period: int, expected: BusConfig, tol: float) -> bool:
    ref = expected.bit_period_ticks
    return abs(observed_period - ref) <= tol * ref


def hrim_rules(sensor: str) -> RuleSet:
    f = lambda n: FluentId(n, sensor)  # noqa: E731
    return RuleSet([
        terminates("bus_fault", f("bus_config_okay")),
        terminates("bus_fault", f("sensor_okay")),
        initiates("cross_bar_en", f("sensor_reconfig")),
        terminates("cross_bar_en", f("hrim_data_ready")),
        initiates("store_sensor_data", f("hrim_data_ready")),
        terminates("read_sensor_data", f("hrim_data_ready")),
        initiates("sensor_reconnect", f("sensor_okay")),
        initiates("sensor_reconnect", f("bus_config_okay")),
        terminates("sensor_reconnect", f("sensor_reconfig")),
    ])


HRIM_INITIALLY = ("sensor_okay", "bus_config_okay")


def HRIM_PATTERN(sensor: str) -> tuple:
    f = lambda n: FluentId(n, sensor)  # noqa: E731
    return (
        Initially(f("sensor_okay")),
        Persists(f("bus_config_okay"), f("sensor_okay")),
        Implies(
            (Trigger("happens", "read_sensor_data", (HoldsAt(f("sensor_okay")),)),),
            (Happens("store_sensor_data", "t2"), HoldsAt(f("hrim_data_ready"), "t2")),
            ("t", "t2"),
            closes_on=("read_sensor_data", "cross_bar_en", "bus_fault"),
        ),
        Implies(
            (Trigger("falls", f("sensor_okay")),),
            (
                Happens("i2m_send_InfoToDisconnect"),
                Happens("cross_bar_en"),
                HoldsAt(f("sensor_reconfig")),
            ),
        ),
    )


def bus_predicate(sensor: str, expected: BusConfig, tol: float) -> DetectionPredicate:
    def check(samples, fluents):
        return check_bus_config(samples[-1].value["period"], expected, tol)

    return DetectionPredicate(f"hrim.bus_config.{sensor}", f"bus.{sensor}", check)


@dataclass
class HrimConfig:
    expected: dict[str, BusConfig]
    baud_tolerance: float = 0.05
    window_depth: int = 32

    def __post_init__(self):
        if not 0 < self.baud_tolerance < 0.2:
            raise ValueError("baud tolerance must lie in (0, 0.2)")


@dataclass
class _Channel:
    watching: Optional[object] = None  # frame whose first character is being timed
    read: Optional[int] = None  # seq of the frame read into the pipeline
    register: bytes = field(default_factory=lambda: pack_register(ST_OKAY, b""))


class Hrim(Monitor):
    id = "hrim"

    def __init__(self, config: HrimConfig, plant: Optional[Plant] = None):
        super().__init__()
        self.config = config
        self.plant = plant
        self.channels = {s: _Channel() for s in config.expected}
        for s, bus in config.expected.items():
            self.add_stream(f"bus.{s}", config.window_depth, role="input")
            self.add_predicate(bus_predicate(s, bus, config.baud_tolerance))
            self.add_subject(s, hrim_rules(s), [FluentId(n, s) for n in HRIM_INITIALLY])
            self.add_pattern(PatternSpec(f"hrim.pattern.{s}", s, HRIM_PATTERN(s), hrim_rules(s)))

    def registers(self, sensor: str) -> bytes:
        return self.channels[sensor].register

    def _set_register(self, sensor: str, payload: Optional[bytes] = None, ready: bool = False) -> None:
        ch = self.channels[sensor]
        status = (ST_READY if ready else 0) | (ST_OKAY if self.holds("sensor_okay", sensor) else 0)
        if self.plant.crossbar.connection[sensor] == ISOLATED:
            status |= ST_ISOLATED
        if payload is None:
            payload = unpack_register(ch.register)[1]
        ch.register = pack_register(status, payload)

    def step(self, tick: int) -> None:
        plant = self.plant
        out = plant.last_output
        samples = {}
        decisions = []
        for sid, ch in self.channels.items():
            frame = plant.hrim_bus(sid)
            connected = plant.crossbar.is_connected(sid)
            if frame is not None and frame.start == tick:
                ch.watching = frame
                if connected and self.holds("sensor_okay", sid):
                    self.happen(sid, "read_sensor_data", tick, seq=frame.seq)
                    ch.read = frame.seq
                    self._set_register(sid)
            w = ch.watching
            if w is not None and tick == w.first_char_end:
                ch.watching = None
                if plant.hrim_bus(sid) is w:
                    try:
                        period = plant.measure_bit_period(sid, tick)
                    except InsufficientEdges:
                        period = 0
                    samples[f"bus.{sid}"] = {"period": period, "seq": w.seq}
                    decisions.append((sid, period, connected))
        self.push(samples, tick)

        for ev in list(self.mailbox):
            if ev.label == "sensor_reconnect":
                self.happen(ev.data["sensor"], "sensor_reconnect", tick)
        self.mailbox.clear()

        for sid, period, connected in decisions:
            ok = check_bus_config(period, self.config.expected[sid], self.config.baud_tolerance)
            if not connected:
                self.send(tick, "probe_result", sensor=sid, ok=ok, period=period)
            elif not ok and self.holds("sensor_okay", sid):
                self.happen(sid, "bus_fault", tick, period=period)
                self.happen(sid, "cross_bar_en", tick)
                self.happen(sid, "i2m_send_InfoToDisconnect", tick)
                self.send(tick, "cross_bar_en", sensor=sid, state=ISOLATED)
                self.send(tick, "i2m_send_InfoToDisconnect", sensor=sid, period=period)
                self.channels[sid].read = None
                self._set_register(sid)

        for end in out.ended:
            sid = end.frame.sensor_id
            ch = self.channels.get(sid)
            if ch is None or not end.delivered or ch.read != end.frame.seq:
                continue
            ch.read = None
            self.happen(sid, "store_sensor_data", tick, seq=end.frame.seq)
            self._set_register(sid, end.frame.data, ready=True)
            self.send(tick, "store_sensor_data", sensor=sid, seq=end.frame.seq,
                      data=end.frame.data.hex())


def hrim_step(hrim: Hrim, tick: int) -> None:
    hrim.begin_tick(tick)
    hrim.step(tick)
