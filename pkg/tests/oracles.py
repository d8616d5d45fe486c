"""Independent reference implementations used only by the test-suite."""
from cpsmon.ec import RuleKind


def replay_states(rules, timeline):
    """Replay the timeline forward from tick 0, returning per-tick fluent sets."""
    state = set(timeline.initially)
    states = []
    by_tick = {}
    for occ in timeline.occurrences:
        by_tick.setdefault(occ.tick, []).append(occ)
    for tick in range(timeline.horizon + 1):
        start, stop = set(), set()
        for occ in by_tick.get(tick, []):
            ctx = dict(occ.context)
            for r in rules:
                if r.trigger == occ.action and (r.guard is None or r.guard(ctx)):
                    (start if r.kind is RuleKind.INITIATES else stop).add(r.fluent)
        state = (state | start) - stop
        states.append(frozenset(state))
    return states


def naive_holds(rules, timeline, f, t):
    return f in replay_states(rules, timeline)[t]


def naive_clipped(rules, timeline, t1, f, t2):
    for occ in timeline.occurrences:
        if t1 < occ.tick <= t2:
            for r in rules:
                if r.trigger == occ.action and r.fluent == f and r.kind is RuleKind.TERMINATES:
                    if r.guard is None or r.guard(dict(occ.context)):
                        return True
    return False


# -- UART ---------------------------------------------------------------------


def uart_transitions(data: bytes, start: int, period: int) -> list[int]:
    """Level changes of an 8N1 line, computed from a flat bit string."""
    bits = []
    for byte in data:
        bits.append(0)
        bits.extend(int(c) for c in format(byte, "08b")[::-1])
        bits.append(1)
    out, prev = [], 1
    for i, b in enumerate(bits):
        if b != prev:
            out.append(start + i * period)
        prev = b
    return out


def modal_gap(ticks: list[int]) -> int:
    gaps = [b - a for a, b in zip(ticks, ticks[1:])]
    return sorted(set(gaps), key=lambda g: (-gaps.count(g), g))[0]
