"""Attack and fault injectors, grouped by threat-model layer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .errors import AddressOutOfRange, UnknownSensor, UnknownTarget
from .plant.core import Fault, Plant
from .plant.isa import Cpu

SENSOR_KINDS = ("baud_change", "uart_lockup", "stuck_value", "frame_corrupt")
MEMORY_KINDS = ("memory_tamper", "firmware_corrupt")


@dataclass(frozen=True)
class AttackKind:
    kind: str
    layer: str
    params: str
    monitor: str


ATTACK_TABLE: dict[str, AttackKind] = {
    a.kind: a
    for a in (
        AttackKind("baud_change", "hardware", "new_baud", "hrim"),
        AttackKind("uart_lockup", "information", "-", "i2m"),
        AttackKind("stuck_value", "information", "payload (hex, optional)", "i2m"),
        AttackKind("frame_corrupt", "information", "offset, value (xor mask)", "i2m"),
        AttackKind("memory_tamper", "execution", "address, value", "eim"),
        AttackKind("firmware_corrupt", "execution", "address, value (xor mask)", "eim"),
    )
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target: str
    at_tick: int
    params: Mapping[str, Any] = field(default_factory=dict)
    recoverable: bool = True

    def __post_init__(self):
        if self.kind not in ATTACK_TABLE:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.at_tick < 0:
            raise ValueError("at_tick must be non-negative")
        need = {
            "baud_change": ("new_baud",),
            "memory_tamper": ("value",),
            "firmware_corrupt": ("value",),
        }.get(self.kind, ())
        missing = [p for p in need if p not in self.params]
        if missing:
            raise ValueError(f"{self.kind} needs {', '.join(missing)}")

    @property
    def layer(self) -> str:
        return ATTACK_TABLE[self.kind].layer

    @property
    def monitor(self) -> str:
        return ATTACK_TABLE[self.kind].monitor

    @property
    def address(self) -> int:
        raw = self.params.get("address", self.target)
        return raw if isinstance(raw, int) else int(str(raw), 0)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "at_tick": self.at_tick,
            "params": dict(self.params),
            "recoverable": self.recoverable,
        }


@dataclass
class InjectionLog:
    applied: list[tuple[AttackSpec, int]] = field(default_factory=list)

    def add(self, spec: AttackSpec, tick: int) -> None:
        if any(s is spec for s, _ in self.applied):
            raise ValueError("attack applied twice")
        self.applied.append((spec, tick))


def apply(plant: Plant, spec: AttackSpec, tick: int) -> None:
    if tick != spec.at_tick:
        raise ValueError(f"{spec.kind} scheduled for {spec.at_tick}, applied at {tick}")
    if spec.kind in SENSOR_KINDS:
        try:
            plant.inject(spec.target, Fault(spec.kind, spec.recoverable, dict(spec.params)))
        except UnknownSensor:
            raise UnknownTarget(spec.target) from None
        return
    address = spec.address
    try:
        if spec.kind == "memory_tamper":
            plant.tamper_memory(address, int(spec.params["value"]))
        else:
            if not plant.reference_image.contains(address):
                raise UnknownTarget(f"{address:#x} is not in flash")
            plant.tamper_memory(address, plant.read_memory(address) ^ int(spec.params["value"]))
    except AddressOutOfRange:
        raise UnknownTarget(hex(address)) from None


# -- ground truth ---------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    spec: AttackSpec
    streams: frozenset[str]
    observable_at: Optional[int]  # None: the effect never reaches a monitored stream

    @property
    def reaches_stream(self) -> bool:
        return self.observable_at is not None and bool(self.streams)


def _sensor(scenario, sid):
    for s in scenario.plant.sensors:
        if s.id == sid:
            return s
    raise UnknownTarget(sid)


def _next_start(s, after: int) -> int:
    """First emission strictly after ``after``."""
    if after < s.offset:
        return s.offset
    return s.offset + ((after - s.offset) // s.emit_period + 1) * s.emit_period


def _frame_ticks(s, baud: int) -> int:
    from .plant.bus import BusConfig
    from .plant.sensors import FRAME_LEN

    return BusConfig(s.id, baud).frame_ticks(FRAME_LEN[s.kind])


def _first_branch_divergence(scenario, spec: AttackSpec) -> Optional[int]:
    """Replay the CPU alone with and without the tamper; first differing branch tick."""
    from .scenario import load_program

    program, _ = load_program(scenario)
    period = scenario.plant.cpu_period
    runs = []
    for tampered in (False, True):
        cpu = Cpu(list(program.words), pc=program.entry)
        branches = []
        tick = period  # permit lands at tick 1; first instruction at the next CPU slot
        applied = not tampered
        while not cpu.halted and tick <= scenario.horizon_ticks:
            if not applied and spec.at_tick < tick:
                addr = spec.address
                val = int(spec.params["value"])
                if spec.kind == "firmware_corrupt":
                    val ^= cpu.read(addr)
                cpu.write(addr, val)
                applied = True
            _, br = cpu.step(tick)
            if br is not None:
                branches.append(br)
            tick += period
        runs.append(branches)
    for a, b in zip(*runs):
        if a != b:
            return b.tick
    if len(runs[1]) > len(runs[0]):
        return runs[1][len(runs[0])].tick
    return None


def ground_truth(scenario) -> list[GroundTruth]:
    """Which monitored streams each attack reaches, and from which tick."""
    out = []
    i2m = scenario.monitors.i2m
    for spec in scenario.attacks:
        if spec.kind in SENSOR_KINDS:
            s = _sensor(scenario, spec.target)
            t_d = i2m.t_d.get(s.id, 3 * s.emit_period)
            if spec.kind == "baud_change":
                start = _next_start(s, spec.at_tick)
                bit = max(1, round(scenario.plant.tick_rate / spec.params["new_baud"]))
                out.append(GroundTruth(spec, frozenset({f"bus.{s.id}"}), start + 10 * bit))
            elif spec.kind == "uart_lockup":
                nominal = _frame_ticks(s, s.baud)
                last = None
                k = 0
                while s.offset + k * s.emit_period + nominal <= spec.at_tick:
                    last = s.offset + k * s.emit_period + nominal
                    k += 1
                first_silent = (last if last is not None else -1) + 1
                out.append(GroundTruth(spec, frozenset({f"act.{s.id}"}), first_silent + t_d))
            elif spec.kind == "stuck_value":
                start = _next_start(s, spec.at_tick) + i2m.r_max * s.emit_period
                out.append(GroundTruth(spec, frozenset({f"frame.{s.id}"}), start + _frame_ticks(s, s.baud) + 2))
            else:
                start = _next_start(s, spec.at_tick)
                out.append(GroundTruth(spec, frozenset({f"frame.{s.id}"}), start + _frame_ticks(s, s.baud) + 2))
        elif spec.kind == "firmware_corrupt" and spec.at_tick == 0:
            out.append(GroundTruth(spec, frozenset({"firmware"}), 0))
        else:
            eim = scenario.monitors.eim
            checks = [t for t in eim.recheck_ticks if t >= spec.at_tick]
            branch_at = _first_branch_divergence(scenario, spec)
            candidates = []
            if branch_at is not None:
                candidates.append((branch_at, "branch"))
            if spec.kind == "firmware_corrupt" and checks:
                candidates.append((checks[0], "firmware"))
            if candidates:
                tick, stream = min(candidates)
                out.append(GroundTruth(spec, frozenset({stream}), tick))
            else:
                out.append(GroundTruth(spec, frozenset(), None))
    return out
