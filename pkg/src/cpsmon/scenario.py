"""Scenario files: JSON documents describing one experiment.

Required keys: ``name``, ``horizon_ticks``, ``plant.sensors``. Everything else
has a default; see README for the full schema.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .attacks import ATTACK_TABLE, AttackSpec
from .errors import ParseError
from .plant.bus import TICK_RATE
from .plant.firmware import FirmwareImage, ReferenceControlFlow
from .plant.isa import FAILSAFE_ADDRESS, FLASH_BASE, Program, reference_program
from .plant.sensors import GENERATORS

SHIPPED = ("nominal", "baud_attack", "gps_lockup", "stuck_value", "return_tamper", "firmware_corrupt")


@dataclass(frozen=True)
class SensorSpec:
    id: str
    kind: str
    emit_period: int
    offset: int = 0
    baud: int = 57600


@dataclass(frozen=True)
class PlantSpec:
    sensors: tuple[SensorSpec, ...]
    tick_rate: int = TICK_RATE
    cpu_period: int = 100
    firmware_path: Optional[str] = None
    base_address: int = FLASH_BASE
    reference_cfg: Optional[str] = None


@dataclass(frozen=True)
class HrimSpec:
    baud_tolerance: float = 0.05
    window_depth: int = 32


@dataclass(frozen=True)
class I2mSpec:
    t_d: dict = field(default_factory=dict)
    r_max: int = 5
    retries: int = 3
    checks: tuple[str, ...] = ("checksum", "range", "repeat")


@dataclass(frozen=True)
class EimSpec:
    failsafe_address: int = FAILSAFE_ADDRESS
    recheck_ticks: tuple[int, ...] = ()
    continuous: bool = False


@dataclass(frozen=True)
class MonitorsSpec:
    hrim: HrimSpec = HrimSpec()
    i2m: I2mSpec = I2mSpec()
    eim: EimSpec = EimSpec()


@dataclass(frozen=True)
class Scenario:
    name: str
    horizon_ticks: int
    seed: int
    plant: PlantSpec
    monitors: MonitorsSpec
    attacks: tuple[AttackSpec, ...] = ()
    base_dir: Optional[Path] = field(default=None, compare=False)

    def with_overrides(self, seed: Optional[int] = None, ticks: Optional[int] = None) -> "Scenario":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if ticks is not None:
            d["horizon_ticks"] = ticks
        return from_dict(d, self.base_dir)

    def to_dict(self) -> dict:
        p, m = self.plant, self.monitors
        plant: dict[str, Any] = {
            "tick_rate": p.tick_rate,
            "cpu_period": p.cpu_period,
            "sensors": [
                {"id": s.id, "kind": s.kind, "baud": s.baud, "emit_period": s.emit_period, "offset": s.offset}
                for s in p.sensors
            ],
            "firmware": {"base_address": p.base_address},
        }
        if p.firmware_path:
            plant["firmware"]["path"] = p.firmware_path
        if p.reference_cfg:
            plant["reference_cfg"] = p.reference_cfg
        return {
            "name": self.name,
            "horizon_ticks": self.horizon_ticks,
            "seed": self.seed,
            "plant": plant,
            "monitors": {
                "hrim": {"baud_tolerance": m.hrim.baud_tolerance, "window_depth": m.hrim.window_depth},
                "i2m": {"t_d": dict(m.i2m.t_d), "r_max": m.i2m.r_max, "retries": m.i2m.retries,
                        "checks": list(m.i2m.checks)},
                "eim": {"failsafe_address": m.eim.failsafe_address,
                        "recheck_ticks": list(m.eim.recheck_ticks), "continuous": m.eim.continuous},
            },
            "attacks": [a.as_dict() for a in self.attacks],
        }


# -- parsing ----------------------------------------------------------------------

_MISSING = object()


class _Reader:
    def __init__(self, data: dict, path: str = ""):
        if not isinstance(data, dict):
            raise ParseError("expected an object", field=path or "<root>")
        self.data = data
        self.path = path

    def _name(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default=_MISSING):
        if key not in self.data:
            if default is _MISSING:
                raise ParseError("missing required key", field=self._name(key))
            return default
        value = self.data[key]
        if kind is int and isinstance(value, str):
            try:
                return int(value, 0)
            except ValueError:
                raise ParseError(f"not an integer: {value!r}", field=self._name(key)) from None
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ParseError(f"expected {kind.__name__}, got {type(value).__name__}", field=self._name(key))
        return value

    def sub(self, key: str, required: bool = False) -> "_Reader":
        if key not in self.data and not required:
            return _Reader({}, self._name(key))
        return _Reader(self.get(key, dict), self._name(key))


def _positive(value: int, name: str) -> int:
    if value <= 0:
        raise ParseError("must be positive", field=name)
    return value


def from_dict(data: dict, base_dir: Optional[Path] = None) -> Scenario:
    r = _Reader(data)
    name = r.get("name", str)
    horizon = _positive(r.get("horizon_ticks", int), "horizon_ticks")
    seed = r.get("seed", int, 0)

    pr = r.sub("plant", required=True)
    raw_sensors = pr.get("sensors", list)
    if not raw_sensors:
        raise ParseError("at least one sensor is required", field="plant.sensors")
    sensors = []
    for i, raw in enumerate(raw_sensors):
        sr = _Reader(raw, f"plant.sensors[{i}]")
        kind = sr.get("kind", str)
        if kind not in GENERATORS:
            raise ParseError(f"unknown sensor kind {kind!r}", field=sr._name("kind"))
        sensors.append(SensorSpec(
            sr.get("id", str), kind,
            _positive(sr.get("emit_period", int), sr._name("emit_period")),
            sr.get("offset", int, 0),
            _positive(sr.get("baud", int, 57600), sr._name("baud")),
        ))
    ids = [s.id for s in sensors]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate sensor id", field="plant.sensors")
    fw = pr.sub("firmware")
    plant = PlantSpec(
        tuple(sensors),
        _positive(pr.get("tick_rate", int, TICK_RATE), "plant.tick_rate"),
        _positive(pr.get("cpu_period", int, 100), "plant.cpu_period"),
        fw.get("path", str, None),
        fw.get("base_address", int, FLASH_BASE),
        pr.get("reference_cfg", str, None),
    )

    mr = r.sub("monitors")
    hr, ir, er = mr.sub("hrim"), mr.sub("i2m"), mr.sub("eim")
    tol = hr.get("baud_tolerance", float, 0.05)
    if not 0 < tol < 0.2:
        raise ParseError("must lie in (0, 0.2)", field="monitors.hrim.baud_tolerance")
    t_d = ir.get("t_d", dict, {})
    for sid, v in t_d.items():
        if sid not in ids:
            raise ParseError(f"unknown sensor {sid!r}", field=f"monitors.i2m.t_d.{sid}")
        if not isinstance(v, int) or isinstance(v, bool):
            raise ParseError("expected int", field=f"monitors.i2m.t_d.{sid}")
    checks = tuple(ir.get("checks", list, ["checksum", "range", "repeat"]))
    if not set(checks) <= {"checksum", "range", "repeat"}:
        raise ParseError(f"unknown check in {list(checks)}", field="monitors.i2m.checks")
    r_max = ir.get("r_max", int, 5)
    if r_max < 2:
        raise ParseError("must be at least 2", field="monitors.i2m.r_max")
    monitors = MonitorsSpec(
        HrimSpec(tol, _positive(hr.get("window_depth", int, 32), "monitors.hrim.window_depth")),
        I2mSpec(dict(t_d), r_max, _positive(ir.get("retries", int, 3), "monitors.i2m.retries"), checks),
        EimSpec(
            er.get("failsafe_address", int, FAILSAFE_ADDRESS),
            tuple(int(t) for t in er.get("recheck_ticks", list, [])),
            er.get("continuous", bool, False),
        ),
    )

    attacks = []
    for i, raw in enumerate(r.get("attacks", list, [])):
        ar = _Reader(raw, f"attacks[{i}]")
        kind = ar.get("kind", str)
        if kind not in ATTACK_TABLE:
            raise ParseError(f"unknown attack kind {kind!r}", field=ar._name("kind"))
        at = ar.get("at_tick", int)
        if not 0 <= at <= horizon:
            raise ParseError(f"at_tick {at} outside [0, {horizon}]", field=ar._name("at_tick"))
        target = ar.get("target", str)
        if kind in ("baud_change", "uart_lockup", "stuck_value", "frame_corrupt") and target not in ids:
            raise ParseError(f"unknown sensor {target!r}", field=ar._name("target"))
        params = dict(ar.get("params", dict, {}))
        for key in ("address", "value", "new_baud", "offset"):
            if isinstance(params.get(key), str):
                try:
                    params[key] = int(params[key], 0)
                except ValueError:
                    raise ParseError(f"not an integer: {params[key]!r}", field=ar._name(f"params.{key}")) from None
        try:
            attacks.append(AttackSpec(kind, target, at, params, ar.get("recoverable", bool, True)))
        except ValueError as e:
            raise ParseError(str(e), field=ar._name("params")) from None
    return Scenario(name, horizon, seed, plant, monitors, tuple(attacks), base_dir)


def loads(text: str, base_dir: Optional[Path] = None) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    return from_dict(data, base_dir)


def shipped_dir():
    return resources.files("cpsmon") / "scenarios"


def resolve(path_or_name: str) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    if path_or_name in SHIPPED:
        return Path(str(shipped_dir() / f"{path_or_name}.json"))
    raise ParseError(f"no such scenario file: {path_or_name}")


def load(path_or_name) -> Scenario:
    p = resolve(str(path_or_name))
    return loads(p.read_text(encoding="utf-8"), p.parent)


# -- resolving firmware ---------------------------------------------------------------


def _file(scenario: Scenario, rel: str) -> Path:
    p = Path(rel)
    if not p.is_absolute():
        p = (scenario.base_dir or Path(str(shipped_dir()))) / p
    if not p.exists():
        raise ParseError(f"file not found: {rel}", field="plant.firmware.path")
    return p


def load_program(scenario: Scenario) -> tuple[Program, FirmwareImage]:
    failsafe = scenario.monitors.eim.failsafe_address
    asm = reference_program(failsafe)
    if scenario.plant.firmware_path is None:
        image = FirmwareImage(scenario.plant.base_address, asm.words)
        return asm, image
    image = FirmwareImage.load(_file(scenario, scenario.plant.firmware_path), scenario.plant.base_address)
    return Program(image.words, asm.symbols, image.base_address), image


def load_reference_cfg(scenario: Scenario, program: Program) -> ReferenceControlFlow:
    failsafe = scenario.monitors.eim.failsafe_address
    if scenario.plant.reference_cfg is None:
        return ReferenceControlFlow.for_program(program, failsafe)
    ref = ReferenceControlFlow.load(_file(scenario, scenario.plant.reference_cfg))
    return ReferenceControlFlow(ref.entries, failsafe)
