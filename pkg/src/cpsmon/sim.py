"""Tick loop: plant step, injections, HRIM, I2M, EIM, log flush."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Optional

from . import attacks
from .eim import Eim, EimConfig
from .hrim import Hrim, HrimConfig
from .i2m import I2m, I2mConfig, SensorLimits
from .logfmt import LogWriter
from .monitor import Delivery, Edge, EdgeKind, Grouping, MonitorGraph, Scheduler
from .plant.bus import BusConfig
from .plant.core import CONNECTED, ISOLATED, Plant
from .plant.firmware import FirmwareImage, ReferenceControlFlow
from .plant.sensors import SensorModel
from .scenario import Scenario, load_program, load_reference_cfg

log = logging.getLogger(__name__)

EXIT_SAFE, EXIT_CONFIG, EXIT_DETECTED = 0, 1, 2


def nominal_bus(scenario: Scenario, sensor_id: str) -> BusConfig:
    s = next(s for s in scenario.plant.sensors if s.id == sensor_id)
    return BusConfig(s.id, s.baud, tick_rate=scenario.plant.tick_rate)


def build_graph(scenario: Scenario) -> MonitorGraph:
    sensors = [s.id for s in scenario.plant.sensors]
    seq, par = Grouping.SEQUENTIAL, Grouping.PARALLEL
    O, E, M = EdgeKind.OBSERVE, EdgeKind.EVENT, EdgeKind.MITIGATE
    edges = [Edge(s, "hrim", O) for s in sensors]
    edges += [
        Edge("crossbar", "hrim", O),
        Edge("cpu", "eim", O),
        Edge("memory", "eim", O),
        Edge("hrim", "i2m", E, seq, frozenset({"store_sensor_data", "i2m_send_InfoToDisconnect", "probe_result"})),
        Edge("i2m", "hrim", E, par, frozenset({"sensor_reconnect"})),
        Edge("hrim", "crossbar", M, seq, frozenset({"cross_bar_en"})),
        Edge("i2m", "crossbar", M, seq, frozenset({"cross_bar_en", "connect"})),
        Edge("eim", "cpu", M, par, frozenset({"permit", "halt", "fail_safe"})),
    ]
    edges += [Edge("i2m", s, M, seq, frozenset({"reset", "reconfigure"})) for s in sensors]
    return MonitorGraph(
        frozenset(sensors) | {"crossbar", "cpu", "memory"},
        ("hrim", "i2m", "eim"),
        tuple(edges),
        addressable=frozenset(sensors),
    )


def build_monitors(
    scenario: Scenario,
    reference: Optional[FirmwareImage],
    cfg: ReferenceControlFlow,
    plant: Optional[Plant] = None,
    reference_digest: int = 0,
):
    m = scenario.monitors
    expected = {s.id: nominal_bus(scenario, s.id) for s in scenario.plant.sensors}
    hrim = Hrim(HrimConfig(expected, m.hrim.baud_tolerance, m.hrim.window_depth), plant)
    limits = {s.id: SensorLimits(s.kind, s.emit_period, expected[s.id]) for s in scenario.plant.sensors}
    i2m = I2m(I2mConfig(
        limits, dict(m.i2m.t_d), m.i2m.r_max, m.i2m.retries,
        "checksum" in m.i2m.checks, "range" in m.i2m.checks, "repeat" in m.i2m.checks,
    ))
    ecfg = EimConfig(reference, cfg, m.eim.recheck_ticks, m.eim.continuous, reference_digest)
    eim = Eim(ecfg, plant)
    return hrim, i2m, eim


@dataclass
class RunResult:
    scenario: str
    exit_code: int
    rejected: list[tuple[int, str, tuple[str, ...]]] = field(default_factory=list)
    log_path: Optional[Path] = None
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def first_detection(self) -> Optional[tuple[int, str, tuple[str, ...]]]:
        return self.rejected[0] if self.rejected else None


class Simulation:
    def __init__(self, scenario: Scenario, stream: Optional[IO[str]] = None):
        self.scenario = scenario
        program, image = load_program(scenario)
        self.reference_cfg = load_reference_cfg(scenario, program)
        sensors = [
            SensorModel(s.id, s.kind, s.emit_period, s.offset, nominal_bus(scenario, s.id))
            for s in scenario.plant.sensors
        ]
        self.plant = Plant(sensors, program, image, scenario.seed, scenario.plant.cpu_period)
        self.reference = image
        self.graph = build_graph(scenario)
        self.monitors = build_monitors(scenario, image, self.reference_cfg, self.plant)
        self.hrim, self.i2m, self.eim = self.monitors
        self.stream = stream if stream is not None else io.StringIO()
        header = {
            "scenario": scenario.to_dict(),
            "reference": {"digest": f"{image.digest:016x}", "cfg": self.reference_cfg.dumps()},
        }
        self.writer = LogWriter(self.stream, header)
        self.tick = -1
        self.injections = attacks.InjectionLog()
        self._schedule: dict[int, list[attacks.AttackSpec]] = {}
        for spec in scenario.attacks:
            self._schedule.setdefault(spec.at_tick, []).append(spec)
        for mon in self.monitors:
            mon.record = self._recorder(mon.id)
        self.scheduler = Scheduler(self.graph, self.monitors, self._actuate, self._recorder("scheduler"))
        self.scheduler.freeze(scenario.horizon_ticks)
        self.rejected: list[tuple[int, str, tuple[str, ...]]] = []

    def _recorder(self, source: str):
        def record(kind: str, label: str, /, **payload) -> None:
            self.writer.add(self.tick, source, kind, label, payload)
        return record

    def _actuate(self, d: Delivery) -> None:
        ev, p = d.event, d.event.data
        plant = self.plant
        if ev.label == "cross_bar_en":
            plant.set_crossbar(p["sensor"], ISOLATED)
        elif ev.label == "connect":
            plant.set_crossbar(p["sensor"], CONNECTED)
        elif ev.label == "reset":
            plant.command("reset", sensor=p["sensor"])
        elif ev.label == "reconfigure":
            plant.command("reconfigure", sensor=p["sensor"], baud=p["baud"])
        elif ev.label == "permit":
            plant.command("permit", granted=True)
        elif ev.label == "halt":
            plant.command("halt")
        elif ev.label == "fail_safe":
            plant.command("redirect", address=p["address"])
        else:
            raise ValueError(f"no actuation for {ev.label!r}")

    def _log_plant(self, out) -> None:
        rec = self._recorder("plant")
        for name, args in out.applied:
            rec("actuation", name, **args)
        for f in out.emitted:
            rec("frame", "emitted", sensor=f.sensor_id, seq=f.seq, bit_period=f.bit_period,
                end=f.end, data=f.data.hex())
        for e in out.ended:
            rec("frame", "delivered" if e.delivered else "blocked", sensor=e.frame.sensor_id,
                seq=e.frame.seq, reason=e.reason)
        for b in out.branches:
            rec("branch", b.kind, **b.as_dict())
        if out.executed is not None:
            rec("exec", "insn", address=out.executed, function=self.plant.program.function_at(out.executed))

    def step(self) -> None:
        self.tick += 1
        tick = self.tick
        out = self.plant.step(tick)
        self._log_plant(out)
        for spec in self._schedule.get(tick, ()):
            attacks.apply(self.plant, spec, tick)
            self.injections.add(spec, tick)
            self.writer.add(tick, "harness", "injection", spec.kind, {
                "target": spec.target, "recoverable": spec.recoverable,
                **{k: v for k, v in spec.params.items()},
            })
        for mid, verdict in self.scheduler.step_all(tick):
            if verdict.rejected:
                ids = verdict.witness_ids
                self.rejected.append((tick, mid, ids))
                self.writer.add(tick, mid, "verdict", "rejected", {"witnesses": ",".join(ids)})
        self.writer.flush()

    def run(self) -> RunResult:
        while self.tick < self.scenario.horizon_ticks:
            self.step()
        rec = self.writer.add
        for sid, st in sorted(self.plant.stats.items()):
            rec(self.tick, "scheduler", "summary", "frames", {"sensor": sid, **st})
        for r in self.i2m.reports:
            rec(self.tick, "scheduler", "summary", "mitigation", {
                "sensor": r.sensor, "reset": r.reset, "reconnected": r.reconnected,
                "ticks_taken": r.ticks_taken, "attempts": r.attempts,
            })
        self.writer.flush()
        code = EXIT_DETECTED if self.rejected else EXIT_SAFE
        return RunResult(self.scenario.name, code, list(self.rejected), None, dict(self.writer.counts))


def run_scenario(scenario: Scenario, out: Optional[Path] = None) -> RunResult:
    if out is None:
        sim = Simulation(scenario)
        return sim.run()
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="\n") as fh:
        sim = Simulation(scenario, fh)
        result = sim.run()
    result.log_path = out
    return result
