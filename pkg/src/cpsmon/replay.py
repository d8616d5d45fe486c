"""Offline verification of a run log.

The monitors are rebuilt from the scenario stored in the log header and fed
the logged samples and events tick by tick. Their verdicts and fluent
changes must match what the log recorded; on top of that a few invariants
are checked directly on the record stream.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .errors import CorruptLog, ParseError
from .i2m import parse_and_verify
from .logfmt import read_log
from .monitor import evaluate
from .plant.firmware import ReferenceControlFlow
from .scenario import from_dict
from .sim import build_monitors


@dataclass(frozen=True)
class Divergence:
    tick: int
    what: str
    detail: str

    def __str__(self) -> str:
        return f"tick {self.tick}: {self.what}: {self.detail}"


@dataclass
class VerifyReport:
    path: str
    ticks: int = 0
    records: int = 0
    divergences: list[Divergence] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.divergences

    def summary(self) -> str:
        n = len(self.divergences)
        return f"{self.path}: {self.records} records, {self.ticks} ticks, {n} divergence{'s' if n != 1 else ''}"


def _monitors_from_header(header: dict):
    try:
        scenario = from_dict(header["scenario"])
        ref = header["reference"]
        cfg = ReferenceControlFlow.loads(ref["cfg"])
        digest = int(ref["digest"], 16)
    except (KeyError, TypeError, ValueError, ParseError) as e:
        raise CorruptLog(f"unusable header: {e}") from None
    return scenario, build_monitors(scenario, None, cfg, None, digest)


def _replay(scenario, monitors, by_tick, report: VerifyReport) -> None:
    """Re-evaluate every monitor from logged inputs; compare verdicts and fluents."""
    changes: list[tuple[str, str, bool]] = []

    def capture(mid):
        def record(kind, label, /, **payload):
            if kind == "fluent_change":
                changes.append((mid, label, payload["holds"]))
        return record

    for m in monitors:
        m.freeze(scenario.horizon_ticks)
        m.record = capture(m.id)
    diverge = report.divergences.append
    for tick in range(scenario.horizon_ticks + 1):
        recs = by_tick.get(tick, ())
        for m in monitors:
            mine = [r for r in recs if r.source == m.id]
            samples = {r.label: r.payload for r in mine if r.kind == "sample"}
            m.begin_tick(tick)
            try:
                m.push(samples, tick)
            except Exception as e:  # unknown stream in a tampered log
                diverge(Divergence(tick, f"{m.id} sample", str(e)))
                return
            changes.clear()
            for r in mine:
                if r.kind == "event":
                    ctx = dict(r.payload)
                    subject = ctx.pop("subject", None)
                    if subject not in m.timelines:
                        diverge(Divergence(tick, f"{m.id} event", f"unknown subject {subject!r}"))
                        continue
                    m.happen(subject, r.label, tick, **ctx)
            logged_changes = [(m.id, r.label, r.payload.get("holds")) for r in mine if r.kind == "fluent_change"]
            if changes != logged_changes:
                diverge(Divergence(tick, f"{m.id} fluents", f"replayed {changes}, logged {logged_changes}"))
            verdict = evaluate(m, m.streams, tick)
            logged = [r for r in mine if r.kind == "verdict"]
            want = ",".join(verdict.witness_ids) if verdict.rejected else None
            got = logged[0].payload.get("witnesses") if logged else None
            if len(logged) > 1 or want != got:
                diverge(Divergence(tick, f"{m.id} verdict", f"replayed {want or 'holds'}, logged {got or 'holds'}"))
            if m.id == "i2m":
                _check_verify(m, mine, tick, diverge)


def _check_verify(i2m, mine, tick, diverge) -> None:
    for r in mine:
        if r.kind != "verify":
            continue
        sid = r.payload.get("sensor")
        try:
            window = i2m.streams[f"frame.{sid}"]
            frame = bytes.fromhex(window.current(tick).value["data"])
        except Exception:
            diverge(Divergence(tick, "i2m verify", f"no frame sample for {sid}"))
            continue
        outcome = parse_and_verify(frame, sid, window, i2m.config)
        if outcome.label != r.label:
            diverge(Divergence(tick, "i2m verify", f"{sid}: replayed {outcome.label}, logged {r.label}"))


def _check_frames(records, diverge) -> None:
    """Frames I2M parsed are byte-identical to what the bus delivered."""
    emitted, delivered = {}, {}
    for r in records:
        p = r.payload
        if r.source == "plant" and r.kind == "frame":
            if r.label == "emitted":
                emitted[(p["sensor"], p["seq"])] = p["data"]
            elif r.label == "delivered":
                delivered[p["sensor"]] = emitted.get((p["sensor"], p["seq"]))
        elif r.source == "i2m" and r.kind == "sample" and r.label.startswith("frame."):
            sid = r.label[len("frame."):]
            if p.get("data") != delivered.get(sid):
                diverge(Divergence(r.tick, "frame integrity", f"{sid} parsed data differs from delivered frame"))


def _check_gatekeeping(records, diverge) -> None:
    """store_I2M_data only on a same-tick passing parse."""
    passes = {(r.tick, r.payload.get("sensor")) for r in records
              if r.source == "i2m" and r.kind == "verify" and r.label == "pass"}
    for r in records:
        if r.source == "i2m" and r.kind == "event" and r.label == "store_I2M_data":
            if (r.tick, r.payload.get("subject")) not in passes:
                diverge(Divergence(r.tick, "gatekeeping", f"store_I2M_data for {r.payload.get('subject')} without a pass"))


def _check_timeouts(scenario, records, diverge) -> None:
    """data_timeout fires exactly t_d + 1 ticks after the last activity sample."""
    t_d = {s.id: scenario.monitors.i2m.t_d.get(s.id, 3 * s.emit_period) for s in scenario.plant.sensors}
    last = defaultdict(lambda: -1)
    for r in records:
        if r.source != "i2m":
            continue
        if r.kind == "sample" and r.label.startswith("act."):
            last[r.label[len("act."):]] = r.tick
        elif r.kind == "event" and r.label == "data_timeout":
            sid = r.payload.get("subject")
            expect = last[sid] + t_d.get(sid, 0) + 1
            if r.tick != expect:
                diverge(Divergence(r.tick, "timeout exactness", f"{sid} timed out, expected at {expect}"))


def _check_failsafe(scenario, records, diverge) -> None:
    """After a control-flow fail_safe the CPU runs only the failsafe routine."""
    fs = scenario.monitors.eim.failsafe_address
    armed = None
    first = True
    for r in records:
        if r.source == "eim" and r.kind == "event" and r.label == "fail_safe" and r.payload.get("reason") != "firmware":
            if armed is None:
                armed, first = r.tick, True
        elif armed is not None and r.source == "plant" and r.kind == "exec" and r.tick > armed:
            addr = r.payload.get("address")
            if first and addr != fs:
                diverge(Divergence(r.tick, "failsafe reachability", f"next address {addr:#x}, expected {fs:#x}"))
            elif not fs <= addr < fs + 4:
                diverge(Divergence(r.tick, "failsafe reachability", f"{addr:#x} outside the failsafe routine"))
            first = False


def verify(path) -> VerifyReport:
    header, records = read_log(path)
    scenario, monitors = _monitors_from_header(header)
    report = VerifyReport(str(path), scenario.horizon_ticks + 1, len(records))
    by_tick = defaultdict(list)
    for r in records:
        if r.tick < 0 or r.tick > scenario.horizon_ticks:
            raise CorruptLog(f"record at tick {r.tick} outside the horizon")
        by_tick[r.tick].append(r)
    _replay(scenario, monitors, by_tick, report)
    diverge = report.divergences.append
    _check_frames(records, diverge)
    _check_gatekeeping(records, diverge)
    _check_timeouts(scenario, records, diverge)
    _check_failsafe(scenario, records, diverge)
    report.divergences.sort(key=lambda d: d.tick)
    return report

