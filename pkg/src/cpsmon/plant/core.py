"""The simulated flight-control system (the monitored target)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..errors import AddressOutOfRange, UnknownSensor
from .bus import BusConfig, edge_ticks, measure_bit_period
from .firmware import FirmwareImage
from .isa import RAM_BASE, RAM_WORDS, BranchEvent, Cpu, Program
from .sensors import Frame, SensorModel

log = logging.getLogger(__name__)

CONNECTED, ISOLATED = "connected", "isolated"
ACTIVE, IDLE = "active", "idle"


@dataclass
class CrossbarState:
    connection: dict[str, str]
    rx_line: dict[str, str]

    def is_connected(self, sensor_id: str) -> bool:
        return self.connection[sensor_id] == CONNECTED


@dataclass
class Fault:
    kind: str
    recoverable: bool
    params: dict = field(default_factory=dict)


@dataclass
class FrameEnd:
    frame: Frame
    delivered: bool
    reason: str = ""


@dataclass
class PlantOutput:
    tick: int
    emitted: list[Frame] = field(default_factory=list)
    ended: list[FrameEnd] = field(default_factory=list)
    branches: list[BranchEvent] = field(default_factory=list)
    executed: Optional[int] = None
    applied: list[tuple[str, dict]] = field(default_factory=list)


class Plant:
    def __init__(
        self,
        sensors: Iterable[SensorModel],
        program: Program,
        firmware: Optional[FirmwareImage] = None,
        seed: int = 0,
        cpu_period: int = 100,
    ):
        self.sensors = {s.sensor_id: s for s in sensors}
        self.seed = seed
        self.cpu_period = cpu_period
        self.program = program
        image = firmware if firmware is not None else FirmwareImage(program.entry, program.words)
        self.reference_image = image  # immutable copy kept for the monitor
        self.cpu = Cpu(list(image.words), [0] * RAM_WORDS, pc=program.entry)
        self.cpu_enabled = False
        self.crossbar = CrossbarState(
            {s: CONNECTED for s in self.sensors}, {s: ACTIVE for s in self.sensors}
        )
        self.faults: dict[str, list[Fault]] = {s: [] for s in self.sensors}
        self.hrim_locked: dict[str, bool] = {s: False for s in self.sensors}
        self.in_flight: dict[str, Optional[Frame]] = {s: None for s in self.sensors}
        self._connected_at_start: dict[str, bool] = {}
        self.stats = {s: {"emitted": 0, "delivered": 0, "blocked": 0} for s in self.sensors}
        self.mem_generation = 0
        self.tick = -1
        self._pending: list[tuple[str, dict]] = []
        self._stuck: dict[str, bytes] = {}
        self.last_output = PlantOutput(-1)

    # -- views --------------------------------------------------------------

    def _sensor(self, sensor_id: str) -> SensorModel:
        try:
            return self.sensors[sensor_id]
        except KeyError:
            raise UnknownSensor(sensor_id) from None

    def live_image(self) -> FirmwareImage:
        return FirmwareImage(self.reference_image.base_address, tuple(self.cpu.flash))

    def hrim_bus(self, sensor_id: str) -> Optional[Frame]:
        """Frame currently on the sensor line as seen from the HRIM tap."""
        if self.hrim_locked[sensor_id]:
            return None
        return self.in_flight[sensor_id]

    def bus_edges(self, sensor_id: str, upto: int) -> list[int]:
        frame = self.hrim_bus(sensor_id)
        if frame is None:
            return []
        return edge_ticks(frame.data, frame.start, frame.bit_period, upto)

    def measure_bit_period(self, sensor_id: str, upto: Optional[int] = None) -> int:
        """Modal edge interval on the sensor line up to ``upto`` (default: now)."""
        self._sensor(sensor_id)
        return measure_bit_period(self.bus_edges(sensor_id, self.tick if upto is None else upto))

    def read_memory(self, address: int) -> int:
        self._check_address(address)
        return self.cpu.read(address)

    def _check_address(self, address: int) -> None:
        flash_lo = self.reference_image.base_address
        in_flash = flash_lo <= address < flash_lo + len(self.cpu.flash)
        in_ram = RAM_BASE <= address < RAM_BASE + len(self.cpu.ram)
        if not (in_flash or in_ram):
            raise AddressOutOfRange(hex(address))

    # -- actuation (applied at the next tick boundary) -----------------------

    def command(self, name: str, **args) -> None:
        if "sensor" in args:
            self._sensor(args["sensor"])
        self._pending.append((name, args))

    def set_crossbar(self, sensor_id: str, state: str) -> None:
        if state not in (CONNECTED, ISOLATED):
            raise ValueError(state)
        self.command("crossbar", sensor=sensor_id, state=state)

    def reconfigure_sensor(self, sensor_id: str, config: Optional[BusConfig] = None) -> None:
        self.command("reconfigure", sensor=sensor_id, baud=(config or self._sensor(sensor_id).nominal).baud)

    def _apply(self, name: str, args: dict) -> None:
        if name == "crossbar":
            sid = args["sensor"]
            self.crossbar.connection[sid] = args["state"]
            self.crossbar.rx_line[sid] = ACTIVE if args["state"] == CONNECTED else IDLE
        elif name == "reconfigure":
            sid = args["sensor"]
            sensor = self.sensors[sid]
            sensor.bus = sensor.nominal.with_baud(args["baud"])
            kept = [f for f in self.faults[sid] if not f.recoverable]
            self.faults[sid] = kept
            self.hrim_locked[sid] = any(f.kind == "uart_lockup" for f in kept)
            if not any(f.kind == "stuck_value" for f in kept):
                self._stuck.pop(sid, None)
        elif name == "reset":
            pass  # sensor reset has no state beyond reconfiguration in this model
        elif name == "permit":
            self.cpu_enabled = bool(args["granted"])
        elif name == "redirect":
            self.cpu.pc = args["address"]
            self.cpu.halted = False
        elif name == "halt":
            self.cpu_enabled = False
        else:
            raise ValueError(f"unknown actuation {name!r}")

    # -- attacks ---------------------------------------------------------------

    def inject(self, sensor_id: str, fault: Fault) -> None:
        sensor = self._sensor(sensor_id)
        if fault.kind == "baud_change":
            sensor.bus = sensor.bus.with_baud(int(fault.params["new_baud"]))
        elif fault.kind == "uart_lockup":
            self.hrim_locked[sensor_id] = True
        self.faults[sensor_id].append(fault)

    def tamper_memory(self, address: int, value: int) -> None:
        self._check_address(address)
        before = self.cpu.read(address)
        self.cpu.write(address, value)
        if before != (value & 0xFFFFFFFF):
            self.mem_generation += 1

    # -- simulation --------------------------------------------------------------

    def _make_frame(self, sensor: SensorModel, tick: int) -> Frame:
        sid = sensor.sensor_id
        data = sensor.frame_generator(tick, self.seed)
        for f in self.faults[sid]:
            if f.kind == "stuck_value":
                data = self._stuck.setdefault(sid, bytes.fromhex(f.params["payload"]) if f.params.get("payload") else data)
            elif f.kind == "frame_corrupt" and not f.params.get("spent"):
                buf = bytearray(data)
                off = int(f.params.get("offset", 10)) % len(buf)
                buf[off] ^= int(f.params.get("value", 0x01)) & 0xFF
                data = bytes(buf)
                f.params["spent"] = True
        return Frame(sid, tick, sensor.bus.bit_period_ticks, data, sensor.seq(tick))

    def step(self, tick: int) -> PlantOutput:
        if tick != self.tick + 1:
            raise ValueError(f"plant stepped out of order: {tick} after {self.tick}")
        self.tick = tick
        out = self.last_output = PlantOutput(tick)
        pending, self._pending = self._pending, []
        for name, args in pending:
            self._apply(name, args)
            out.applied.append((name, args))

        for sid, sensor in self.sensors.items():
            frame = self.in_flight[sid]
            if frame is not None and frame.end == tick:
                ok = self._connected_at_start[sid] and self.crossbar.is_connected(sid)
                locked = self.hrim_locked[sid]
                delivered = ok and not locked
                reason = "" if delivered else ("lockup" if locked else "crossbar")
                self.stats[sid]["delivered" if delivered else "blocked"] += 1
                out.ended.append(FrameEnd(frame, delivered, reason))
                self.in_flight[sid] = None
            if sensor.due(tick):
                if self.in_flight[sid] is not None:
                    # emitter restarts: the unfinished frame never completes
                    self.stats[sid]["blocked"] += 1
                    out.ended.append(FrameEnd(self.in_flight[sid], False, "overrun"))
                new = self._make_frame(sensor, tick)
                self.in_flight[sid] = new
                self._connected_at_start[sid] = self.crossbar.is_connected(sid)
                self.stats[sid]["emitted"] += 1
                out.emitted.append(new)

        if self.cpu_enabled and not self.cpu.halted and tick % self.cpu_period == 0:
            sp_before = self.cpu.sp
            site, branch = self.cpu.step(tick)
            out.executed = site
            if branch is not None:
                out.branches.append(branch)
            if branch is not None and branch.kind == "call" or self.cpu.sp != sp_before:
                self.mem_generation += 1
            elif decode_is_store(self.cpu.read(site)):
                self.mem_generation += 1
        return out


def decode_is_store(word: int) -> bool:
    return (word >> 28) & 0xF == 2
