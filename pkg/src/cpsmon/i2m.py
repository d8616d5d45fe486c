"""Information integrity monitor.

I2M consumes HRIM's register blocks after ``hrim_data_ready``: it reads the
frame one tick later, verifies it the tick after that, and republishes good
data in its own register block (HRIM layout followed by a u16 verification
status: 0 pass, 1 checksum, 2 range, 3 repeat). It also watches for
inactivity and drives recovery of isolated sensors.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .ec import (
    Effect,
    FluentId,
    Happens,
    HoldsAt,
    Implies,
    Initially,
    RuleKind,
    RuleSet,
    Trigger,
    initiates,
    terminates,
)
from .errors import MitigationFailed, MitigationPrecondition, UnknownSensor
from .hrim import pack_register
from .monitor import DetectionPredicate, Monitor, PatternSpec, failing_predicates
from .plant.bus import BusConfig
from .plant.core import CONNECTED, ISOLATED
from .plant.sensors import FrameError, decode
from .streams import Sample, StreamWindow

log = logging.getLogger(__name__)


class Reason(enum.Enum):
    CHECKSUM = "checksum"
    RANGE = "range"
    REPEAT = "repeat"


@dataclass(frozen=True)
class VerifyOutcome:
    passed: bool
    reason: Optional[Reason] = None

    @property
    def label(self) -> str:
        return "pass" if self.passed else self.reason.value


PASS = VerifyOutcome(True)
STATUS_CODES = {None: 0, Reason.CHECKSUM: 1, Reason.RANGE: 2, Reason.REPEAT: 3}

DEFAULT_RANGES = {
    "gps": {"lat": (-90.0, 90.0), "lon": (-180.0, 180.0)},
    "baro": {"pressure": (30_000, 110_000), "temperature": (-40.0, 85.0)},
}


@dataclass
class SensorLimits:
    kind: str
    emit_period: int
    nominal: BusConfig
    ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class I2mConfig:
    sensors: dict[str, SensorLimits]
    t_d: dict[str, int] = field(default_factory=dict)
    r_max: int = 5
    retries: int = 3
    check_checksum: bool = True
    check_range: bool = True
    check_repeat: bool = True
    window_depth: int = 32

    def __post_init__(self):
        if self.r_max < 2:
            raise ValueError("r_max must be at least 2")
        for sid, lim in self.sensors.items():
            self.t_d.setdefault(sid, 3 * lim.emit_period)
            if self.t_d[sid] <= lim.emit_period:
                raise ValueError(f"t_d for {sid} must exceed its emit period")
            if not lim.ranges:
                lim.ranges = DEFAULT_RANGES.get(lim.kind, {})

    def probe_window(self, sensor: str) -> int:
        lim = self.sensors[sensor]
        return lim.emit_period + 10 * lim.nominal.bit_period_ticks


def parse_and_verify(frame: bytes, sensor_id: str, window, cfg: I2mConfig) -> VerifyOutcome:
    """Check one frame against its history.

    ``window`` is a StreamWindow or a sample sequence of earlier frames; the
    current frame may already be its newest sample.
    """
    try:
        lim = cfg.sensors[sensor_id]
    except KeyError:
        raise UnknownSensor(sensor_id) from None
    try:
        values = decode(lim.kind, frame)
    except FrameError:
        if cfg.check_checksum:
            return VerifyOutcome(False, Reason.CHECKSUM)
        values = {}
    if cfg.check_range:
        for key, (lo, hi) in lim.ranges.items():
            if key in values and not lo <= values[key] <= hi:
                return VerifyOutcome(False, Reason.RANGE)
    if cfg.check_repeat and window is not None:
        history = window.samples() if isinstance(window, StreamWindow) else [x for x in window if not x.is_gap]
        if repeat_run(frame, history) > cfg.r_max:
            return VerifyOutcome(False, Reason.REPEAT)
    return PASS


def repeat_run(frame: bytes, history: Sequence[Sample]) -> int:
    """Length of the run of payloads identical to ``frame`` ending with it."""
    hexed = frame.hex()
    hist = list(history)
    if hist and hist[-1].value["data"] == hexed:
        hist.pop()  # the current frame itself
    run = 1
    for s in reversed(hist):
        if s.value["data"] != hexed:
            break
        run += 1
    return run


def i2m_rules(sensor: str) -> RuleSet:
    f = lambda n: FluentId(n, sensor)  # noqa: E731
    passed = lambda ctx: ctx.get("outcome") == "pass"  # noqa: E731
    failed = lambda ctx: ctx.get("outcome") != "pass"  # noqa: E731
    return RuleSet([
        initiates("store_sensor_data", f("hrim_data_ready")),
        terminates("i2m_read_data", f("hrim_data_ready")),
        terminates("i2m_read_data", f("sensor_idle")),
        initiates("i2m_parse_data", f("i2m_parse_data_success"), passed, "outcome=pass"),
        terminates("i2m_parse_data", f("i2m_parse_data_success"), failed, "outcome!=pass"),
        initiates("store_I2M_data", f("i2m_data_ready")),
        terminates("sensor_fault", f("sensor_okay")),
        terminates("data_timeout", f("sensor_okay")),
        initiates("cross_bar_en", f("sensor_reconfig")),
        initiates("sensor_reconnect", f("sensor_okay")),
        terminates("sensor_reconnect", f("sensor_reconfig")),
    ])


I2M_INITIALLY = ("sensor_idle", "sensor_okay")


def I2M_PATTERN(sensor: str) -> tuple:
    f = lambda n: FluentId(n, sensor)  # noqa: E731
    return (
        Initially(f("sensor_idle")),
        Effect(RuleKind.TERMINATES, "i2m_read_data", f("sensor_idle")),
        Implies(
            (Trigger("rises", f("hrim_data_ready")),),
            (Happens("i2m_read_data", "t2"), Happens("i2m_parse_data", "t3")),
            ("t1", "t2", "t3"),
            closes_on=("store_sensor_data", "i2m_parse_data"),
        ),
        Implies(
            (Trigger("rises", f("i2m_parse_data_success")),),
            (Happens("store_I2M_data"),),
        ),
        Effect(RuleKind.INITIATES, "store_I2M_data", f("i2m_data_ready")),
        Implies(
            (
                Trigger("falls", f("i2m_parse_data_success")),
                Trigger("falls", f("sensor_okay")),
                Trigger("happens", "data_timeout"),
            ),
            (
                Happens("i2m_send_InfoToDisconnect"),
                Happens("cross_bar_en"),
                HoldsAt(f("sensor_reconfig")),
            ),
        ),
    )


def verify_predicate(sensor: str, cfg: I2mConfig) -> DetectionPredicate:
    def check(samples, fluents):
        frame = bytes.fromhex(samples[-1].value["data"])
        return parse_and_verify(frame, sensor, samples, cfg).passed

    return DetectionPredicate(f"i2m.verify.{sensor}", f"frame.{sensor}", check)


def inactivity_predicate(sensor: str, t_d: int) -> DetectionPredicate:
    okay, reconfig = f"sensor_okay@{sensor}", f"sensor_reconfig@{sensor}"

    def check(samples, fluents):
        last = samples[-1]
        if not last.is_gap or last.value.count <= t_d:
            return True
        return not (fluents.get(okay) and not fluents.get(reconfig))

    return DetectionPredicate(f"i2m.inactivity.{sensor}", f"act.{sensor}", check, on_gaps=True, min_gap=t_d)


@dataclass
class MitigationReport:
    sensor: str
    reset: bool = False
    reconfigured: Optional[BusConfig] = None
    reconnected: bool = False
    ticks_taken: int = 0
    attempts: int = 0


@dataclass
class _Mitigation:
    sensor: str
    started: int
    attempt: int
    deadline: int
    report: MitigationReport


@dataclass
class _Channel:
    isolated: bool = False
    pending_read: Optional[tuple[int, bytes]] = None  # (tick, frame)
    pending_parse: Optional[tuple[int, bytes]] = None
    mitigation: Optional[_Mitigation] = None
    failed: bool = False
    register: bytes = b""


class I2m(Monitor):
    id = "i2m"

    def __init__(self, config: I2mConfig):
        super().__init__()
        self.config = config
        self.channels = {s: _Channel() for s in config.sensors}
        self.reports: list[MitigationReport] = []
        for s in config.sensors:
            self.add_stream(f"frame.{s}", config.window_depth, role="input")
            self.add_stream(f"act.{s}", config.window_depth, role="state")
            self.add_predicate(verify_predicate(s, config))
            self.add_predicate(inactivity_predicate(s, config.t_d[s]))
            self.add_subject(s, i2m_rules(s), [FluentId(n, s) for n in I2M_INITIALLY])
            self.add_pattern(PatternSpec(f"i2m.pattern.{s}", s, I2M_PATTERN(s), i2m_rules(s)))

    def registers(self, sensor: str) -> bytes:
        return self.channels[sensor].register

    # -- mitigation -------------------------------------------------------------

    def _isolate(self, tick: int, sensor: str, cause: str, mirror: bool = False) -> None:
        ch = self.channels[sensor]
        self.happen(sensor, "i2m_send_InfoToDisconnect", tick, cause=cause)
        self.happen(sensor, "cross_bar_en", tick)
        if not mirror:
            self.send(tick, "cross_bar_en", sensor=sensor, state=ISOLATED)
        ch.isolated = True
        ch.pending_read = ch.pending_parse = None
        if ch.mitigation is None and not ch.failed:
            mitigation_sequence(self, sensor, tick)

    def _attempt(self, tick: int, m: _Mitigation) -> None:
        m.attempt += 1
        m.report.attempts = m.attempt
        nominal = self.config.sensors[m.sensor].nominal
        self.send(tick, "reset", sensor=m.sensor)
        self.send(tick, "reconfigure", sensor=m.sensor, baud=nominal.baud)
        m.report.reset = True
        m.report.reconfigured = nominal
        m.deadline = tick + self.config.probe_window(m.sensor)
        self.record("mitigation", "attempt", sensor=m.sensor, attempt=m.attempt, deadline=m.deadline)

    def _probe(self, tick: int, sensor: str, ok: bool) -> None:
        ch = self.channels[sensor]
        m = ch.mitigation
        if m is None:
            return
        if ok:
            self.send(tick, "connect", sensor=sensor, state=CONNECTED)
            self.send(tick, "sensor_reconnect", sensor=sensor)
            self.happen(sensor, "sensor_reconnect", tick)
            ch.isolated = False
            ch.mitigation = None
            m.report.reconnected = True
            m.report.ticks_taken = tick - m.started
            self.reports.append(m.report)
            self.record("mitigation", "reconnected", sensor=sensor, attempts=m.attempt,
                        ticks_taken=m.report.ticks_taken)
            self._activity[sensor] = {"cause": "reconnect"}
        else:
            self._retry(tick, m)

    def _retry(self, tick: int, m: _Mitigation) -> None:
        if m.attempt >= self.config.retries:
            ch = self.channels[m.sensor]
            ch.mitigation = None
            ch.failed = True
            m.report.ticks_taken = tick - m.started
            self.reports.append(m.report)
            err = MitigationFailed(f"{m.sensor} still faulty after {m.attempt} attempts")
            log.info("%s", err)
            self.record("mitigation", "failed", sensor=m.sensor, attempts=m.attempt, error=str(err))
        else:
            self._attempt(tick, m)

    # -- tick ---------------------------------------------------------------------

    def _idle(self, tick: int) -> bool:
        if self.mailbox:
            return False
        for ch in self.channels.values():
            if ch.pending_read or ch.pending_parse or ch.mitigation is not None:
                return False
        return True

    def step(self, tick: int) -> None:
        if self._idle(tick):
            # nothing arrived and nothing is scheduled: only the inactivity watch can fire
            self._activity = {}
            self.push({}, tick)
            if failing_predicates(self, self._streams, tick):
                self._timeouts(tick, {w.predicate_id for w in failing_predicates(self, self._streams, tick)})
            return
        stores, faults, probes = [], [], []
        for ev in self.mailbox:
            d = ev.data
            if ev.label == "store_sensor_data":
                stores.append((d["sensor"], bytes.fromhex(d["data"]), d["seq"]))
            elif ev.label == "i2m_send_InfoToDisconnect":
                faults.append(d["sensor"])
            elif ev.label == "probe_result":
                probes.append((d["sensor"], d["ok"]))
        self.mailbox.clear()

        self._activity = {}
        for sid, ok in probes:
            self._probe(tick, sid, ok)
        for sid, _, _ in stores:
            self._activity[sid] = {"cause": "data"}
        samples = {f"act.{sid}": act for sid, act in self._activity.items()}
        parses = []
        for sid, ch in self.channels.items():
            if ch.pending_parse and ch.pending_parse[0] == tick:
                frame = ch.pending_parse[1]
                ch.pending_parse = None
                samples[f"frame.{sid}"] = {"data": frame.hex()}
                parses.append((sid, frame))
        self.push(samples, tick)
        failing = {w.predicate_id for w in failing_predicates(self, self._streams, tick)}

        for sid, data, seq in stores:
            self.happen(sid, "store_sensor_data", tick, seq=seq)
            self.channels[sid].pending_read = (tick + 1, data)
        for sid, ch in self.channels.items():
            if ch.pending_read and ch.pending_read[0] == tick:
                data = ch.pending_read[1]
                ch.pending_read = None
                self.happen(sid, "i2m_read_data", tick)
                ch.pending_parse = (tick + 1, data)

        for sid, frame in parses:
            outcome = parse_and_verify(frame, sid, self.streams[f"frame.{sid}"], self.config)
            assert outcome.passed == (f"i2m.verify.{sid}" not in failing)
            self.happen(sid, "i2m_parse_data", tick, outcome=outcome.label)
            self.record("verify", outcome.label, sensor=sid)
            code = STATUS_CODES[outcome.reason]
            self.channels[sid].register = pack_register(int(outcome.passed), frame) + struct.pack("<H", code)
            if outcome.passed:
                self.happen(sid, "store_I2M_data", tick)
            else:
                self._isolate(tick, sid, f"verify:{outcome.label}")

        for sid in faults:
            if self.holds("sensor_okay", sid):
                self.happen(sid, "sensor_fault", tick)
                self._isolate(tick, sid, "hrim", mirror=True)

        self._timeouts(tick, failing)
        for ch in self.channels.values():
            m = ch.mitigation
            if m is not None and m.started < tick and tick >= m.deadline:
                self._retry(tick, m)

    def _timeouts(self, tick: int, failing: set[str]) -> None:
        for sid in self.channels:
            if f"i2m.inactivity.{sid}" in failing and self.holds("sensor_okay", sid):
                silent = self._streams[f"act.{sid}"].gap_count
                self.happen(sid, "data_timeout", tick, silent=silent)
                self._isolate(tick, sid, "timeout")


def mitigation_sequence(i2m: I2m, sensor_id: str, tick: int) -> MitigationReport:
    """Start reset, reconfigure and reconnect for an isolated sensor.

    The report fills in as the plant responds; ``reconnected`` turns true when
    a post-reconfiguration bus probe passes within one emit period plus one
    character. After ``retries`` failed attempts the sensor stays isolated and
    the run logs MitigationFailed.
    """
    ch = i2m.channels.get(sensor_id)
    if ch is None:
        raise UnknownSensor(sensor_id)
    if not ch.isolated:
        raise MitigationPrecondition(f"{sensor_id} is not isolated")
    m = _Mitigation(sensor_id, tick, 0, tick, MitigationReport(sensor_id))
    ch.mitigation = m
    i2m._attempt(tick, m)
    return m.report
