"""Monitors, detection predicates, verdicts and the monitor dependence graph.

A monitor owns its streams (its language), a fixed set of detection
predicates and event-calculus patterns, and one timeline per subject. All of
that is frozen once the simulation starts; nothing outside the monitor can
swap predicates or patterns afterwards.
"""
from __future__ import annotations

import enum
import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from . import ec
from .ec import FluentId, PatternStatus, RuleSet, Timeline
from .errors import CycleWithoutDelay, FrozenMonitorError, UnknownVertex, UnregisteredStream
from .streams import MonitoredStreams, Sample, StreamWindow

log = logging.getLogger(__name__)

Check = Callable[[Sequence[Sample], Mapping[str, bool]], bool]


@dataclass(frozen=True)
class DetectionPredicate:
    """``check(samples, fluents)`` returns True when the window is safe.

    ``samples`` is the stream's k-prefix (gap markers included); ``fluents``
    maps ``str(FluentId)`` to its value at the end of the previous tick.
    With ``on_gaps`` the predicate also runs on silent ticks; otherwise only
    when the stream received a sample at the current tick. ``min_gap`` lets a
    gap-driven predicate skip silent runs no longer than that many ticks
    (it must be safe on them anyway).
    """

    id: str
    stream_id: str
    check: Check
    on_gaps: bool = False
    min_gap: int = 0


@dataclass(frozen=True)
class PatternSpec:
    id: str
    subject: str
    clauses: tuple
    rules: RuleSet


@dataclass(frozen=True)
class BadPrefix:
    stream_id: str
    ticks: tuple[int, int]
    samples: tuple[Sample, ...]
    predicate_id: str
    fluents: tuple[tuple[str, bool], ...] = ()

    def __post_init__(self):
        if not self.samples:
            raise ValueError("a bad prefix is never empty")

    def recheck(self, monitor: "Monitor") -> bool:
        """Re-run the originating check on the stored samples; True if it still fails."""
        pred = monitor.predicate(self.predicate_id)
        if pred is not None:
            return not pred.check(self.samples, dict(self.fluents))
        spec = monitor.pattern(self.predicate_id)
        tl = Timeline.empty(self.ticks[1], monitor.initially(spec.subject))
        for s in self.samples:
            tl = ec.record_happens(tl, s.value["action"], s.tick, s.value.get("ctx"))
        out = ec.evaluate_pattern(spec.clauses, spec.rules, tl, self.ticks[1])
        return out.status is PatternStatus.VIOLATED


class VerdictStatus(enum.Enum):
    HOLDS = "holds"
    REJECTED = "rejected"


@dataclass(frozen=True)
class SafetyVerdict:
    status: VerdictStatus
    at: int
    witnesses: tuple[BadPrefix, ...] = ()

    def __post_init__(self):
        if (self.status is VerdictStatus.REJECTED) != bool(self.witnesses):
            raise ValueError("Rejected iff witnesses are present")

    @property
    def rejected(self) -> bool:
        return self.status is VerdictStatus.REJECTED

    @property
    def witness_ids(self) -> tuple[str, ...]:
        return tuple(sorted(w.predicate_id for w in self.witnesses))


@dataclass(frozen=True)
class MonitorEvent:
    tick: int
    source: str
    label: str
    payload: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def make(cls, tick: int, source: str, label: str, **payload) -> "MonitorEvent":
        return cls(tick, source, label, tuple(sorted(payload.items())))

    @property
    def data(self) -> dict[str, Any]:
        return dict(self.payload)


class Monitor:
    """Base class. Subclasses register streams, predicates and patterns in
    ``__init__`` and implement :meth:`step`."""

    id: str = "monitor"

    def __init__(self, monitor_id: Optional[str] = None):
        self._frozen = False
        self.id = monitor_id or type(self).id
        self._streams = MonitoredStreams()
        self._language: frozenset[str] = frozenset()
        self._predicates: tuple[DetectionPredicate, ...] = ()
        self._patterns: tuple[PatternSpec, ...] = ()
        self.mailbox: deque[MonitorEvent] = deque()
        self.timelines: dict[str, Timeline] = {}
        self._initially: dict[str, frozenset[FluentId]] = {}
        self._rules: dict[str, RuleSet] = {}
        self._state: dict[str, bool] = {}
        self._snapshot: dict[str, bool] = {}
        self._dirty = True
        self._touched: set[str] = set()
        self._failing: Optional[tuple[int, list]] = None
        self.horizon = 0
        # hooks set by the scheduler
        self.emit: Callable[[MonitorEvent], None] = lambda ev: None
        self.record: Callable[..., None] = lambda *a, **k: None

    # -- construction ---------------------------------------------------------

    def _fixed(name):  # noqa: N805 - property factory used in the class body
        def get(self):
            return getattr(self, "_" + name)

        def put(self, value):
            raise FrozenMonitorError(f"{self.id}: {name} can only change through the construction interface")

        return property(get, put)

    streams = _fixed("streams")
    language = _fixed("language")
    predicates = _fixed("predicates")
    patterns = _fixed("patterns")
    del _fixed

    def _check_open(self) -> None:
        if self._frozen:
            raise FrozenMonitorError(f"{self.id}: monitor is frozen")

    def add_stream(self, stream_id: str, depth: int = 32, role: str = "state") -> None:
        self._check_open()
        self._streams.add(StreamWindow(stream_id, depth, role))
        self._language = self._language | {stream_id}

    def add_predicate(self, pred: DetectionPredicate) -> None:
        self._check_open()
        if pred.stream_id not in self.language:
            raise UnregisteredStream(f"{pred.id}: {pred.stream_id} not in {self.id} language")
        self._predicates = self._predicates + (pred,)

    def add_subject(self, subject: str, rules: RuleSet, initially: Iterable[FluentId]) -> None:
        self._check_open()
        self._rules[subject] = rules
        self._initially[subject] = frozenset(initially)
        for f in sorted(rules.fluents | self._initially[subject]):
            self._state[str(f)] = f in self._initially[subject]

    def add_pattern(self, spec: PatternSpec) -> None:
        self._check_open()
        ec._validate(spec.clauses)
        self._patterns = self._patterns + (spec,)

    def freeze(self, horizon: int) -> None:
        self.horizon = horizon
        for subject, init in self._initially.items():
            self.timelines[subject] = Timeline.empty(horizon, init)
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def predicate(self, pid: str) -> Optional[DetectionPredicate]:
        return next((p for p in self.predicates if p.id == pid), None)

    def pattern(self, pid: str) -> Optional[PatternSpec]:
        return next((p for p in self.patterns if p.id == pid), None)

    def initially(self, subject: str) -> frozenset[FluentId]:
        return self._initially[subject]

    # -- per-tick state -------------------------------------------------------

    def begin_tick(self, tick: int) -> None:
        if self._dirty:
            self._snapshot = dict(self._state)
            self._dirty = False
        self._touched = set()
        self._failing = None

    def fluents(self) -> dict[str, bool]:
        """Fluent values at the end of the previous tick."""
        return self._snapshot

    def holds(self, name: str, subject: str) -> bool:
        """Current (same-tick) value, including this tick's occurrences."""
        return self._state[f"{name}@{subject}"]

    def happen(self, subject: str, action: str, tick: int, **ctx) -> None:
        """Record ``Happens(action, tick)`` on the subject's timeline."""
        tl = self.timelines[subject]
        self.timelines[subject] = ec.record_happens(tl, action, tick, ctx or None)
        self._touched.add(subject)
        occ = ec.Occurrence(tick, action, tuple(sorted(ctx.items())))
        init, term = self._rules[subject].effects(occ)
        self.record("event", action, subject=subject, **ctx)
        for f in sorted(init | term):
            key = str(f)
            # termination wins within a tick, so settle against all of this tick's effects
            value = ec.holds_at(self._rules[subject], self.timelines[subject], f, tick)
            if self._state.get(key) != value:
                self._state[key] = value
                self._dirty = True
                self.record("fluent_change", key, holds=value)

    def push(self, samples: Mapping[str, Any], tick: int) -> None:
        self._streams.advance(tick, samples)
        self._failing = None
        if samples:
            for sid in sorted(samples):
                self.record("sample", sid, **samples[sid])

    def step(self, tick: int) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def send(self, tick: int, label: str, **payload) -> None:
        self.emit(MonitorEvent.make(tick, self.id, label, **payload))


# -- verdicts ---------------------------------------------------------------


def failing_predicates(monitor: Monitor, ms: MonitoredStreams, at: int) -> list[BadPrefix]:
    own = ms is monitor._streams
    if own and monitor._failing is not None and monitor._failing[0] == at:
        return list(monitor._failing[1])
    out = []
    fluents = monitor._snapshot
    language = monitor._language
    for p in monitor._predicates:
        if p.stream_id not in language:
            raise UnregisteredStream(f"{p.id}: {p.stream_id}")
        window = ms[p.stream_id]
        gap = window._gap
        if gap is not None:
            if not p.on_gaps or gap[1] - gap[0] < p.min_gap:
                continue
        elif not window._buf:
            continue
        elif not p.on_gaps and window.current(at) is None:
            continue
        samples = window.prefix()
        if not p.check(samples, fluents):
            out.append(BadPrefix(
                p.stream_id, (samples[0].tick, samples[-1].tick), samples, p.id,
                tuple(sorted(fluents.items())),
            ))
    if own:
        monitor._failing = (at, out)
    return list(out)


def violated_patterns(monitor: Monitor, at: int, subjects: Optional[Iterable[str]] = None) -> list[BadPrefix]:
    subjects = monitor._touched if subjects is None else set(subjects)
    out = []
    for spec in monitor.patterns:
        if spec.subject not in subjects:
            continue
        tl = monitor.timelines[spec.subject]
        res = ec.evaluate_pattern(spec.clauses, spec.rules, tl, at)
        if res.status is PatternStatus.VIOLATED and any(t == at for _, t in res.violations):
            occs = tl.upto(at)
            samples = tuple(
                Sample(o.tick, {"action": o.action, "ctx": dict(o.context)}) for o in occs
            )
            out.append(BadPrefix(f"timeline:{spec.subject}", (0, at), samples, spec.id))
    return out


def evaluate(monitor: Monitor, ms: MonitoredStreams, at: int) -> SafetyVerdict:
    """Holds iff every predicate is safe and no pattern newly violates at ``at``."""
    witnesses = failing_predicates(monitor, ms, at)
    if monitor._touched:
        witnesses += violated_patterns(monitor, at)
    if witnesses:
        return SafetyVerdict(VerdictStatus.REJECTED, at, tuple(witnesses))
    return SafetyVerdict(VerdictStatus.HOLDS, at)


# -- graph --------------------------------------------------------------------


class EdgeKind(enum.Enum):
    OBSERVE = "observe"
    EVENT = "event"
    MITIGATE = "mitigate"


class Grouping(enum.Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: EdgeKind
    grouping: Grouping = Grouping.SEQUENTIAL
    labels: frozenset[str] = frozenset()  # empty = any label

    def carries(self, label: str) -> bool:
        return not self.labels or label in self.labels


@dataclass(frozen=True)
class Delivery:
    edge: Edge
    event: MonitorEvent
    deliver_at: int

    @property
    def actuation(self) -> bool:
        return self.edge.kind is EdgeKind.MITIGATE


@dataclass
class MonitorGraph:
    system_vertices: frozenset[str]
    monitor_vertices: tuple[str, ...]  # evaluation order
    edges: tuple[Edge, ...] = ()
    # system vertices that only take actuations addressed to them by payload["sensor"]
    addressable: frozenset[str] = frozenset()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(set(self.monitor_vertices)) != len(self.monitor_vertices):
            raise ValueError("each monitor appears exactly once")
        if set(self.monitor_vertices) & self.system_vertices:
            raise ValueError("system and monitor vertices overlap")
        mons, sys_ = set(self.monitor_vertices), self.system_vertices
        for e in self.edges:
            for v in (e.src, e.dst):
                if v not in mons and v not in sys_:
                    raise UnknownVertex(v)
            ok = {
                EdgeKind.OBSERVE: e.src in sys_ and e.dst in mons,
                EdgeKind.EVENT: e.src in mons and e.dst in mons,
                EdgeKind.MITIGATE: e.src in mons and e.dst in sys_,
            }[e.kind]
            if not ok:
                raise ValueError(f"{e.kind.value} edge {e.src}->{e.dst} has the wrong endpoints")
        self._check_cycles()

    def _check_cycles(self) -> None:
        succ = defaultdict(list)
        for e in self.edges:
            if e.kind is EdgeKind.EVENT and e.grouping is Grouping.SEQUENTIAL:
                succ[e.src].append(e.dst)
        state: dict[str, int] = {}

        def visit(v, path):
            state[v] = 1
            for w in succ[v]:
                if state.get(w) == 1:
                    raise CycleWithoutDelay(" -> ".join(path + [w]))
                if w not in state:
                    visit(w, path + [w])
            state[v] = 2

        for v in self.monitor_vertices:
            if v not in state:
                visit(v, [v])

    def vertices(self) -> frozenset[str]:
        return self.system_vertices | frozenset(self.monitor_vertices)

    def out_edges(self, v: str) -> list[Edge]:
        return [e for e in self.edges if e.src == v]

    def observers(self, system_vertex: str) -> list[str]:
        return [e.dst for e in self.edges if e.kind is EdgeKind.OBSERVE and e.src == system_vertex]


def propagate(graph: MonitorGraph, event: MonitorEvent, target: Optional[str] = None) -> list[Delivery]:
    """Route ``event`` along its source's outgoing event/mitigate edges.

    ``target`` restricts delivery to one destination vertex.
    """
    if event.source not in graph.vertices():
        raise UnknownVertex(event.source)
    out = []
    for e in graph.out_edges(event.source):
        if e.kind is EdgeKind.OBSERVE or not e.carries(event.label):
            continue
        if target is not None and e.dst != target:
            continue
        if e.dst in graph.addressable and event.data.get("sensor") != e.dst:
            continue
        delay = 1 if e.grouping is Grouping.PARALLEL else 0
        if e.kind is EdgeKind.MITIGATE:
            delay = 1  # actuations land at the next tick boundary
        out.append(Delivery(e, event, event.tick + delay))
    if not out:
        log.warning("no route for %s from %s", event.label, event.source)
    return out


# -- scheduler -----------------------------------------------------------------


class Scheduler:
    """Steps monitors in graph order and moves events between them."""

    def __init__(
        self,
        graph: MonitorGraph,
        monitors: Sequence[Monitor],
        actuate: Callable[[Delivery], None],
        record: Callable[..., None] = lambda *a, **k: None,
    ):
        by_id = {m.id: m for m in monitors}
        if set(by_id) != set(graph.monitor_vertices):
            raise ValueError("graph and monitor set disagree")
        self.graph = graph
        self.monitors = [by_id[v] for v in graph.monitor_vertices]
        self.actuate = actuate
        self.record = record
        self._later: list[tuple[int, int, str, MonitorEvent]] = []
        self._ids = {m.id: m for m in self.monitors}
        self._seq = 0
        self._tick = 0
        for m in self.monitors:
            m.emit = self._emitter(m)

    def _emitter(self, monitor: Monitor):
        def emit(ev: MonitorEvent, target: Optional[str] = None) -> None:
            for d in propagate(self.graph, ev, target):
                self._seq += 1
                self.record("delivery", ev.label, src=ev.source, dst=d.edge.dst,
                            edge=d.edge.kind.value, at=d.deliver_at, **ev.data)
                if d.actuation:
                    self.actuate(d)
                elif d.deliver_at <= self._tick:
                    self._by_id(d.edge.dst).mailbox.append(ev)
                else:
                    self._later.append((d.deliver_at, self._seq, d.edge.dst, ev))
        return emit

    def _by_id(self, mid: str) -> Monitor:
        return self._ids[mid]

    def freeze(self, horizon: int) -> None:
        for m in self.monitors:
            m.freeze(horizon)

    def step_all(self, at: int) -> list[tuple[str, SafetyVerdict]]:
        self._tick = at
        if self._later:
            due = sorted(x for x in self._later if x[0] <= at)
            self._later = [x for x in self._later if x[0] > at]
            for _, _, dst, ev in due:
                self._ids[dst].mailbox.append(ev)
        verdicts = []
        for m in self.monitors:
            m.begin_tick(at)
            m.step(at)
            v = evaluate(m, m._streams, at)
            verdicts.append((m.id, v))
        return verdicts


def step_all(scheduler: Scheduler, at: int) -> list[tuple[str, SafetyVerdict]]:
    return scheduler.step_all(at)
