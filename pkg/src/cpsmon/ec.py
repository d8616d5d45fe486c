"""Discrete-time event calculus.

Time is an integer tick starting at 0. Effects of an action occurring at tick
``t`` are visible at ``t`` itself. When the same tick both initiates and
terminates a fluent, termination wins.

The module exposes the classic predicates as plain functions over immutable
values (:class:`Timeline`, :class:`RuleSet`) plus a small clause language for
the sequential detection patterns the monitors are written in.
"""
from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, Union

from .errors import (
    ConflictingRule,
    DuplicateOccurrence,
    InvalidInterval,
    MalformedPattern,
    TickBeyondHorizon,
    UnknownFluent,
)

Tick = int
ActionLabel = str


@dataclass(frozen=True, order=True)
class FluentId:
    name: str
    subject: Optional[str] = None

    def __str__(self) -> str:
        return self.name if self.subject is None else f"{self.name}@{self.subject}"

    @classmethod
    def parse(cls, text: str) -> "FluentId":
        name, _, subject = text.partition("@")
        return cls(name, subject or None)


class RuleKind(enum.Enum):
    INITIATES = "initiates"
    TERMINATES = "terminates"


Guard = Callable[[Mapping[str, Any]], bool]


@dataclass(frozen=True)
class EcRule:
    kind: RuleKind
    trigger: ActionLabel
    fluent: FluentId
    # Evaluated against the context recorded with the occurrence (the stream
    # snapshot at the trigger tick); never sees later data.
    guard: Optional[Guard] = field(default=None, compare=False)
    guard_name: Optional[str] = None

    def fires(self, context: Mapping[str, Any]) -> bool:
        return self.guard is None or bool(self.guard(context))


def initiates(action, fluent, guard=None, guard_name=None) -> EcRule:
    return EcRule(RuleKind.INITIATES, action, _fid(fluent), guard, guard_name)


def terminates(action, fluent, guard=None, guard_name=None) -> EcRule:
    return EcRule(RuleKind.TERMINATES, action, _fid(fluent), guard, guard_name)


def _fid(f: Union[str, FluentId]) -> FluentId:
    return f if isinstance(f, FluentId) else FluentId.parse(f)


class RuleSet:
    """Immutable, indexed collection of effect rules."""

    def __init__(self, rules: Iterable[EcRule] = ()):
        self._rules = tuple(rules)
        by_trigger: dict[str, list[EcRule]] = {}
        for r in self._rules:
            by_trigger.setdefault(r.trigger, []).append(r)
        for trigger, rs in by_trigger.items():
            unguarded = {(r.kind, r.fluent) for r in rs if r.guard is None}
            for kind, fluent in unguarded:
                other = RuleKind.TERMINATES if kind is RuleKind.INITIATES else RuleKind.INITIATES
                if (other, fluent) in unguarded:
                    raise ConflictingRule(
                        f"{trigger!r} both initiates and terminates {fluent}"
                    )
        self._by_trigger = {k: tuple(v) for k, v in by_trigger.items()}
        self.fluents = frozenset(r.fluent for r in self._rules)

    def __iter__(self):
        return iter(self._rules)

    def __len__(self) -> int:
        return len(self._rules)

    def for_action(self, action: str) -> tuple[EcRule, ...]:
        return self._by_trigger.get(action, ())

    def has(self, kind: RuleKind, action: str, fluent: FluentId) -> bool:
        return any(r.kind is kind and r.fluent == fluent for r in self.for_action(action))

    def effects(self, occ: "Occurrence") -> tuple[set[FluentId], set[FluentId]]:
        """Return the (initiated, terminated) fluents of one occurrence."""
        init: set[FluentId] = set()
        term: set[FluentId] = set()
        ctx = occ.ctx
        for r in self.for_action(occ.action):
            if r.fires(ctx):
                (init if r.kind is RuleKind.INITIATES else term).add(r.fluent)
        return init, term


def _ruleset(rules) -> RuleSet:
    return rules if isinstance(rules, RuleSet) else RuleSet(rules)


@dataclass(frozen=True, order=True)
class Occurrence:
    tick: Tick
    action: ActionLabel
    context: tuple[tuple[str, Any], ...] = ()

    @property
    def ctx(self) -> dict[str, Any]:
        return dict(self.context)


@dataclass(frozen=True)
class Timeline:
    horizon: Tick
    occurrences: tuple[Occurrence, ...] = ()
    initially: frozenset[FluentId] = frozenset()

    @classmethod
    def empty(cls, horizon: Tick, initially: Iterable[Union[str, FluentId]] = ()) -> "Timeline":
        return cls(horizon, (), frozenset(_fid(f) for f in initially))

    def upto(self, t: Tick) -> tuple[Occurrence, ...]:
        idx = bisect.bisect_right([o.tick for o in self.occurrences], t)
        return self.occurrences[:idx]

    def ticks_of(self, action: str) -> list[Tick]:
        return [o.tick for o in self.occurrences if o.action == action]


def record_happens(
    timeline: Timeline,
    action: ActionLabel,
    t: Tick,
    context: Optional[Mapping[str, Any]] = None,
) -> Timeline:
    """Return a new timeline with ``Happens(action, t)`` inserted in order."""
    if t < 0 or t > timeline.horizon:
        raise TickBeyondHorizon(f"tick {t} outside [0, {timeline.horizon}]")
    occs = timeline.occurrences
    if any(o.tick == t and o.action == action for o in occs):
        raise DuplicateOccurrence(f"{action!r} already happens at tick {t}")
    occ = Occurrence(t, action, tuple(sorted((context or {}).items())))
    # stable within a tick: same-tick occurrences keep insertion order
    idx = bisect.bisect_right([o.tick for o in occs], t)
    return Timeline(timeline.horizon, occs[:idx] + (occ,) + occs[idx:], timeline.initially)


def _check_query(rules: RuleSet, timeline: Timeline, f: FluentId, t: Tick) -> None:
    if f not in rules.fluents and f not in timeline.initially:
        raise UnknownFluent(str(f))
    if t < 0 or t > timeline.horizon:
        raise TickBeyondHorizon(f"tick {t} outside [0, {timeline.horizon}]")


def _effect_at_or_before(rules: RuleSet, occs: Sequence[Occurrence], f: FluentId, t: Tick):
    """Latest (tick, holds) effect on ``f`` at or before ``t``; None if untouched."""
    i = len(occs) - 1
    while i >= 0 and occs[i].tick > t:
        i -= 1
    while i >= 0:
        tick = occs[i].tick
        initiated = terminated = False
        while i >= 0 and occs[i].tick == tick:
            init, term = rules.effects(occs[i])
            initiated |= f in init
            terminated |= f in term
            i -= 1
        if terminated:
            return tick, False
        if initiated:
            return tick, True
    return None


def holds_at(rules, timeline: Timeline, f: Union[str, FluentId], t: Tick) -> bool:
    rules = _ruleset(rules)
    f = _fid(f)
    _check_query(rules, timeline, f, t)
    last = _effect_at_or_before(rules, timeline.occurrences, f, t)
    if last is None:
        return f in timeline.initially
    return last[1]


def clipped(rules, timeline: Timeline, t1: Tick, f: Union[str, FluentId], t2: Tick) -> bool:
    """True iff ``f`` is terminated by some occurrence in ``(t1, t2]``."""
    rules = _ruleset(rules)
    f = _fid(f)
    if t1 > t2:
        raise InvalidInterval(f"t1={t1} > t2={t2}")
    _check_query(rules, timeline, f, t2)
    for occ in timeline.occurrences:
        if occ.tick <= t1:
            continue
        if occ.tick > t2:
            break
        if f in rules.effects(occ)[1]:
            return True
    return False


def fluent_state(rules, timeline: Timeline, t: Tick) -> dict[FluentId, bool]:
    """Snapshot of every known fluent at tick ``t``."""
    rules = _ruleset(rules)
    known = rules.fluents | timeline.initially
    return {f: holds_at(rules, timeline, f, t) for f in sorted(known)}


def last_change(rules, timeline: Timeline, f: Union[str, FluentId], t: Tick) -> Tick:
    """Tick at which ``f`` last took its value at ``t`` (0 if never changed)."""
    rules = _ruleset(rules)
    f = _fid(f)
    value = holds_at(rules, timeline, f, t)
    since = 0
    prev = f in timeline.initially
    for tick in sorted({o.tick for o in timeline.occurrences if o.tick <= t}):
        cur = holds_at(rules, timeline, f, tick)
        if cur != prev:
            since = tick
        prev = cur
    assert prev == value
    return since


# ---------------------------------------------------------------------------
# Pattern clauses


@dataclass(frozen=True)
class Initially:
    fluent: FluentId


@dataclass(frozen=True)
class Effect:
    kind: RuleKind
    action: ActionLabel
    fluent: FluentId


@dataclass(frozen=True)
class Persists:
    """``~Clipped(ti, guard, tn) & ti < t < tn => HoldsAt(fluent, t)``."""

    guard: FluentId
    fluent: FluentId


@dataclass(frozen=True)
class Happens:
    action: ActionLabel
    at: str = "t"


@dataclass(frozen=True)
class HoldsAt:
    fluent: FluentId
    at: str = "t"
    negated: bool = False


@dataclass(frozen=True)
class Trigger:
    on: str  # "happens" | "rises" | "falls"
    name: Union[ActionLabel, FluentId]
    when: tuple[HoldsAt, ...] = ()


@dataclass(frozen=True)
class Implies:
    """Every trigger instance must be discharged by the consequents.

    ``order`` is the chain of strictly increasing time variables; its first
    element is bound to the trigger tick. A consequent at a later variable
    must occur after its predecessor and no later than the first
    ``closes_on`` occurrence following the trigger; until such a closer is
    seen an undischarged instance is pending.
    """

    triggers: tuple[Trigger, ...]
    consequents: tuple[Union[Happens, HoldsAt], ...]
    order: tuple[str, ...] = ("t",)
    closes_on: tuple[ActionLabel, ...] = ()


Clause = Union[Initially, Effect, Persists, Implies]


class PatternStatus(enum.Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    PENDING = "pending"


@dataclass(frozen=True)
class PatternOutcome:
    status: PatternStatus
    clause: Optional[int] = None  # 1-based index of the first violated clause
    decided_at: Optional[Tick] = None
    fired: frozenset[int] = frozenset()
    violations: tuple[tuple[int, Tick], ...] = ()

    @property
    def ok(self) -> bool:
        return self.status is not PatternStatus.VIOLATED


def _validate(pattern: Sequence[Clause]) -> None:
    for i, clause in enumerate(pattern, 1):
        if not isinstance(clause, Implies):
            if not isinstance(clause, (Initially, Effect, Persists)):
                raise MalformedPattern(f"clause {i}: unsupported {type(clause).__name__}")
            continue
        if not clause.triggers or not clause.order:
            raise MalformedPattern(f"clause {i}: needs a trigger and a time variable")
        if len(set(clause.order)) != len(clause.order):
            raise MalformedPattern(f"clause {i}: repeated time variable")
        t0 = clause.order[0]
        for trig in clause.triggers:
            if trig.on not in ("happens", "rises", "falls"):
                raise MalformedPattern(f"clause {i}: unknown trigger {trig.on!r}")
            for cond in trig.when:
                if cond.at != t0:
                    raise MalformedPattern(f"clause {i}: trigger guard must be at {t0}")
        bound = {t0}
        for c in clause.consequents:
            if c.at in bound:
                continue
            if isinstance(c, HoldsAt):
                raise MalformedPattern(f"clause {i}: HoldsAt at unbound variable {c.at}")
            if c.at not in clause.order:
                raise MalformedPattern(
                    f"clause {i}: time variable {c.at} has no ordering constraint"
                )
            prev = clause.order[clause.order.index(c.at) - 1]
            if prev not in bound:
                raise MalformedPattern(f"clause {i}: {c.at} used before {prev} is bound")
            bound.add(c.at)


class _Eval:
    def __init__(self, rules: RuleSet, timeline: Timeline, at: Tick):
        self.rules = rules
        self.tl = timeline
        self.at = at
        self.occs = timeline.upto(at)
        self.ticks = sorted({o.tick for o in self.occs})
        self._cache: dict[tuple[FluentId, Tick], bool] = {}
        self._by_action: Optional[dict[str, list[Tick]]] = None

    def holds(self, f: FluentId, t: Tick) -> bool:
        key = (f, t)
        if key not in self._cache:
            if t < 0:
                _check_query(self.rules, self.tl, f, 0)
                self._cache[key] = f in self.tl.initially
            else:
                self._cache[key] = holds_at(self.rules, self.tl, f, t)
        return self._cache[key]

    def happens_ticks(self, action: str) -> list[Tick]:
        if self._by_action is None:
            self._by_action = {}
            for o in self.occs:
                self._by_action.setdefault(o.action, []).append(o.tick)
        return self._by_action.get(action, [])

    def since(self, f: FluentId, t: Tick) -> Tick:
        start, prev = 0, self.holds(f, -1)
        for tick in self.ticks:
            if tick > t:
                break
            cur = self.holds(f, tick)
            if cur != prev:
                start = tick
            prev = cur
        return start

    def trigger_ticks(self, trig: Trigger) -> list[Tick]:
        if trig.on == "happens":
            ticks = sorted(set(self.happens_ticks(trig.name)))
        else:
            f = _fid(trig.name)
            want = trig.on == "rises"
            ticks = [
                t for t in self.ticks
                if self.holds(f, t) == want and self.holds(f, t - 1) != want
            ]
        return [
            t for t in ticks
            if all(self.holds(c.fluent, t) != c.negated for c in trig.when)
        ]

    # each clause evaluator returns (violations, fired, pending)
    def initially(self, c: Initially):
        _check_query(self.rules, self.tl, c.fluent, 0)
        if c.fluent in self.tl.initially:
            return [], True, False
        return [0], True, False

    def effect(self, c: Effect):
        rules = [r for r in self.rules.for_action(c.action) if r.kind is c.kind and r.fluent == c.fluent]
        if not rules:
            raise MalformedPattern(f"no {c.kind.value} rule for {c.action} -> {c.fluent}")
        want = c.kind is RuleKind.INITIATES
        violations, fired = [], False
        for occ in self.occs:
            if occ.action != c.action or not any(r.fires(occ.ctx) for r in rules):
                continue
            fired = True
            if self.holds(c.fluent, occ.tick) != want:
                violations.append(occ.tick)
        return violations, fired, not fired

    def persists(self, c: Persists):
        violations, fired = [], False
        for t in self.ticks:
            if not self.holds(c.guard, t):
                continue
            fired = True
            start = self.since(c.guard, t)
            if not clipped(self.rules, self.tl, start, c.guard, t) and not self.holds(c.fluent, t):
                violations.append(t)
        return violations, fired, not fired

    def implies(self, c: Implies):
        t0var = c.order[0]
        instances = sorted({t for trig in c.triggers for t in self.trigger_ticks(trig)})
        closer_ticks = sorted({o.tick for o in self.occs if o.action in c.closes_on})
        violations, pending = [], not instances
        for t0 in instances:
            j = bisect.bisect_right(closer_ticks, t0)
            closer = closer_ticks[j] if j < len(closer_ticks) else None
            bind = {t0var: t0}
            outcome = "ok"
            for q in c.consequents:
                if q.at in bind:
                    tq = bind[q.at]
                    if isinstance(q, Happens):
                        good = tq in self.happens_ticks(q.action)
                    else:
                        good = self.holds(q.fluent, tq) != q.negated
                    if not good:
                        outcome = ("violated", tq)
                        break
                    continue
                prev = c.order[c.order.index(q.at) - 1]
                lo = bind[prev]
                hi = closer if closer is not None else self.at
                hit = next((t for t in self.happens_ticks(q.action) if lo < t <= hi), None)
                if hit is None:
                    outcome = ("violated", closer) if closer is not None else "pending"
                    break
                bind[q.at] = hit
            if outcome == "pending":
                pending = True
            elif outcome != "ok":
                violations.append(outcome[1])
        return violations, bool(instances), pending


def evaluate_pattern(pattern: Sequence[Clause], rules, timeline: Timeline, at: Tick) -> PatternOutcome:
    """Evaluate an ordered clause list over ``timeline`` restricted to ticks <= ``at``."""
    _validate(pattern)
    rules = _ruleset(rules)
    if at < 0 or at > timeline.horizon:
        raise TickBeyondHorizon(f"tick {at} outside [0, {timeline.horizon}]")
    ev = _Eval(rules, timeline, at)
    if not ev.occs:
        return PatternOutcome(PatternStatus.PENDING)
    dispatch = {
        Initially: ev.initially,
        Effect: ev.effect,
        Persists: ev.persists,
        Implies: ev.implies,
    }
    all_violations: list[tuple[int, Tick]] = []
    fired: set[int] = set()
    any_pending = False
    for i, clause in enumerate(pattern, 1):
        violations, was_fired, pending = dispatch[type(clause)](clause)
        if was_fired:
            fired.add(i)
        any_pending |= pending
        all_violations.extend((i, t) for t in violations)
    if all_violations:
        first = min(i for i, _ in all_violations)
        decided = min(t for i, t in all_violations if i == first)
        return PatternOutcome(
            PatternStatus.VIOLATED, first, decided, frozenset(fired), tuple(sorted(all_violations))
        )
    status = PatternStatus.PENDING if any_pending else PatternStatus.SATISFIED
    return PatternOutcome(status, None, None, frozenset(fired))


# ---------------------------------------------------------------------------
# Serialization (documentation/replay only; guards are referenced by name)


def clause_to_dict(c: Clause) -> dict:
    def enc(x):
        if isinstance(x, FluentId):
            return str(x)
        if isinstance(x, RuleKind):
            return x.value
        if isinstance(x, tuple):
            return [enc(v) for v in x]
        if hasattr(x, "__dataclass_fields__"):
            d = {"type": type(x).__name__}
            d.update({k: enc(getattr(x, k)) for k in x.__dataclass_fields__})
            return d
        return x

    return enc(c)


_CLAUSE_TYPES = {cls.__name__: cls for cls in (Initially, Effect, Persists, Happens, HoldsAt, Trigger, Implies)}
_FLUENT_FIELDS = {"fluent", "guard"}


def clause_from_dict(d: dict) -> Clause:
    def dec(x, key=None):
        if isinstance(x, dict) and "type" in x:
            cls = _CLAUSE_TYPES[x["type"]]
            kwargs = {k: dec(v, k) for k, v in x.items() if k != "type"}
            if cls is Trigger and kwargs["on"] != "happens":
                kwargs["name"] = FluentId.parse(kwargs["name"])
            if cls is Effect:
                kwargs["kind"] = RuleKind(kwargs["kind"])
            return cls(**kwargs)
        if isinstance(x, list):
            return tuple(dec(v) for v in x)
        if key in _FLUENT_FIELDS and isinstance(x, str):
            return FluentId.parse(x)
        return x

    return dec(d)
