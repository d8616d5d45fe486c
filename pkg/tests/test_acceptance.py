"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see only the
summary lines, or as a script: ``python3 tests/test_acceptance.py``.
"""
import io
import sys
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings

from cpsmon import ec, scenario
from cpsmon.attacks import ATTACK_TABLE, ground_truth
from cpsmon.logfmt import iter_log
from cpsmon.plant.isa import FAILSAFE_ADDRESS
from cpsmon.plant.sensors import SensorModel
from cpsmon.plant.bus import BusConfig
from cpsmon.replay import verify
from cpsmon.sim import EXIT_SAFE, Simulation

sys.path.insert(0, str(Path(__file__).parent))
from oracles import naive_clipped, naive_holds  # noqa: E402
from strategies import ec_cases  # noqa: E402

TIME_LIMIT = 10.0
RUNS = 3


class Run:
    def __init__(self, name):
        self.name = name
        self.texts = []
        self.seconds = []
        for _ in range(RUNS):
            buf = io.StringIO()
            t0 = time.perf_counter()
            sim = Simulation(scenario.load(name), buf)
            result = sim.run()
            self.seconds.append(time.perf_counter() - t0)
            self.texts.append(buf.getvalue())
            if len(self.texts) == 1:
                self.sim, self.result = sim, result
        it = iter_log(self.texts[0].splitlines())
        self.header = next(it)
        self.records = list(it)

    def select(self, source=None, kind=None, label=None, **payload):
        return [
            r for r in self.records
            if (source is None or r.source == source) and (kind is None or r.kind == kind)
            and (label is None or r.label == label)
            and all(r.payload.get(k) == v for k, v in payload.items())
        ]


_RUNS = {}


def run(name) -> Run:
    if name not in _RUNS:
        _RUNS[name] = Run(name)
    return _RUNS[name]


_capture = {}


@pytest.fixture(autouse=True)
def _uncaptured(capsys):
    _capture["capsys"] = capsys
    yield
    _capture.clear()


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
    with _capture["capsys"].disabled():
        print("\n" + line, flush=True)
    assert ok, line


def within_limit(r: Run) -> bool:
    return max(r.seconds) < TIME_LIMIT and r.sim.scenario.horizon_ticks <= 200_000


def test_01_nominal_soundness():
    r = run("nominal")
    rejected = r.select(kind="verdict")
    ok = (r.sim.scenario.horizon_ticks >= 100_000 and not rejected and r.result.exit_code == EXIT_SAFE
          and all(st["delivered"] == st["emitted"] for st in r.sim.plant.stats.values())
          and r.sim.plant.cpu.halted and within_limit(r))
    report(1, ok, f"nominal: {len(rejected)} rejected, exit {r.result.exit_code}, {max(r.seconds):.1f}s")


def test_02_baud_attack():
    r = run("baud_attack")
    nominal = run("nominal")
    spec = r.sim.scenario.attacks[0]
    s = next(x for x in r.sim.scenario.plant.sensors if x.id == spec.target)
    first_start = SensorModel(s.id, s.kind, s.emit_period, s.offset, BusConfig(s.id, s.baud)).next_emission(spec.at_tick)
    tick, mid, _ = r.result.rejected[0]
    detect_ok = mid == "hrim" and 0 <= tick - first_start <= 90

    # crossbar and rx line right after the isolation lands
    probe = Simulation(scenario.load("baud_attack"))
    while probe.tick < tick + 1:
        probe.step()
    isolated = probe.plant.crossbar.connection["gps"] == "isolated" and probe.plant.crossbar.rx_line["gps"] == "idle"

    (rec,) = r.select("i2m", "mitigation", "reconnected", sensor="gps")
    # the frame already on the wire at reconnect is lost; count frames that start afterwards

    def after(run_):
        fresh = {x.payload["seq"] for x in run_.select("plant", "frame", "emitted", sensor="gps") if x.tick > rec.tick}
        return [x.tick for x in run_.select("plant", "frame", "delivered", sensor="gps") if x.payload["seq"] in fresh]

    rate_ok = after(r) == after(nominal) and len(after(r)) > 0
    ok = detect_ok and isolated and rate_ok and within_limit(r)
    report(2, ok, f"baud: hrim rejected at {tick} ({tick - first_start} after frame start {first_start}), "
                  f"isolated+idle={isolated}, post-mitigation gps deliveries {len(after(r))}/{len(after(nominal))}")


def test_03_uart_lockup():
    r = run("gps_lockup")
    nominal = run("nominal")
    spec = r.sim.scenario.attacks[0]
    t_d = r.sim.i2m.config.t_d["gps"]
    disc = r.select("i2m", "event", "i2m_send_InfoToDisconnect", subject="gps")
    baro = lambda run_: len(run_.select("i2m", "verify", "pass", sensor="baro"))  # noqa: E731
    ok = bool(disc) and disc[0].tick == spec.at_tick + t_d and baro(r) == baro(nominal) and within_limit(r)
    report(3, ok, f"lockup at {spec.at_tick}: disconnect at {disc[0].tick if disc else None} "
                  f"(expected {spec.at_tick + t_d}), baro passes {baro(r)} vs nominal {baro(nominal)}")


def test_04_stuck_value():
    r = run("stuck_value")
    r_max = r.sim.scenario.monitors.i2m.r_max
    # independent count over what the sensor put on the wire
    run_len, prev, culprit = 0, None, None
    for x in r.select("plant", "frame", "emitted", sensor="baro"):
        run_len = run_len + 1 if x.payload["data"] == prev else 1
        prev = x.payload["data"]
        if run_len == r_max + 1:
            culprit = x.payload["seq"]
            break
    delivered = {x.payload["seq"]: x.tick for x in r.select("plant", "frame", "delivered", sensor="baro")}
    verdicts = [(x.tick, x.label) for x in r.select("i2m", "verify", sensor="baro")]
    fails = [(t, label) for t, label in verdicts if label != "pass"]
    # the first failure must be the parse of the culprit frame: after its delivery, before the next one
    later = [t for seq, t in delivered.items() if culprit is not None and seq > culprit]
    ok = (culprit is not None and bool(fails) and fails[0][1] == "repeat"
          and delivered[culprit] <= fails[0][0] < min(later, default=r.sim.scenario.horizon_ticks + 1)
          and within_limit(r))
    report(4, ok, f"stuck: first failure {fails[0] if fails else None}; frame {r_max + 1} of the identical run "
                  f"is seq {culprit}, delivered at {delivered.get(culprit)}")


def test_05_return_tamper():
    r = run("return_tamper")
    spec = r.sim.scenario.attacks[0]
    slot = spec.address
    # the tampered slot is consumed by the first return after the write
    first = next(x for x in r.select("plant", "branch", "return") if x.tick > spec.at_tick)
    bad = r.select("eim", "branch_verdict")
    nxt = [x for x in r.select("plant", "exec") if x.tick > first.tick]
    flips = r.select("eim", "memory_compare", address=slot)
    flip_ok = any(a.payload["match"] and not b.payload["match"] and b.tick == spec.at_tick
                  for a, b in zip(flips, flips[1:]))
    ok = (bool(bad) and bad[0].tick == first.tick and bad[0].label == "tampered(return)"
          and nxt and nxt[0].payload["address"] == FAILSAFE_ADDRESS and flip_ok and within_limit(r))
    report(5, ok, f"return tamper: {bad[0].label if bad else None} at {bad[0].tick if bad else None} "
                  f"(first affected branch {first.tick}), next address {nxt[0].payload['address']:#010x}, "
                  f"memory_compare flip at injection={flip_ok}")


def test_06_firmware_corrupt():
    r = run("firmware_corrupt")
    withheld = r.select("eim", "permit", "withheld")
    branches = r.select("plant", "branch")
    ok = bool(withheld) and withheld[0].tick == 0 and not r.select("eim", "permit", "granted") and not branches \
        and within_limit(r)
    report(6, ok, f"firmware corrupt: permit {'withheld' if withheld else 'granted'}, {len(branches)} branch events")


def test_07_ec_oracle_equivalence():
    seen = {"cases": 0, "checks": 0, "mismatches": 0}

    @settings(max_examples=1200, deadline=None, database=None, derandomize=True,
              suppress_health_check=list(HealthCheck))
    @given(ec_cases())
    def check(case):
        rules, t, known = case
        seen["cases"] += 1
        for f in known:
            for tick in range(t.horizon + 1):
                seen["checks"] += 1
                if ec.holds_at(rules, t, f, tick) != naive_holds(rules, t, f, tick):
                    seen["mismatches"] += 1
                for t1 in range(tick + 1):
                    seen["checks"] += 1
                    if ec.clipped(rules, t, t1, f, tick) != naive_clipped(rules, t, t1, f, tick):
                        seen["mismatches"] += 1

    check()
    ok = seen["cases"] >= 1000 and seen["mismatches"] == 0
    report(7, ok, f"EC oracle: {seen['cases']} cases, {seen['checks']} queries, {seen['mismatches']} mismatches")


# monitor pattern -> clause expected to fire (or be violated) under each attack
EXPECTED_UNDER_ATTACK = {
    "baud_attack": {"hrim.pattern.gps": 4, "i2m.pattern.gps": 6},
    "gps_lockup": {"i2m.pattern.gps": 6},
    "stuck_value": {"i2m.pattern.baro": 6},
    "return_tamper": {"eim.pattern": 4},
    "firmware_corrupt": {"eim.pattern": 4},
}


def test_08_pattern_conformance():
    problems = []
    for name in scenario.SHIPPED:
        r = run(name)
        horizon = r.sim.scenario.horizon_ticks
        attack_at = min((a.at_tick for a in r.sim.scenario.attacks), default=None)
        expected = EXPECTED_UNDER_ATTACK.get(name, {})
        for m in r.sim.monitors:
            for spec in m.patterns:
                tl = m.timelines[spec.subject]
                if attack_at is None or attack_at > 0:
                    cut = horizon if attack_at is None else attack_at - 1
                    pre = ec.evaluate_pattern(spec.clauses, spec.rules, tl, cut)
                    if pre.status is ec.PatternStatus.VIOLATED:
                        problems.append(f"{name}/{spec.id} violated before the attack")
                end = ec.evaluate_pattern(spec.clauses, spec.rules, tl, horizon)
                if spec.id in expected:
                    if expected[spec.id] not in end.fired and end.clause != expected[spec.id]:
                        problems.append(f"{name}/{spec.id} clause {expected[spec.id]} did not fire")
                elif end.status is ec.PatternStatus.VIOLATED:
                    problems.append(f"{name}/{spec.id} violated without an attack on it")
    report(8, not problems, "patterns: " + ("; ".join(problems) if problems else
                                            f"{len(scenario.SHIPPED)} scenarios conform"))


def test_09_determinism_and_verify(tmp_path):
    problems = []
    for name in scenario.SHIPPED:
        r = run(name)
        if len(set(r.texts)) != 1:
            problems.append(f"{name} logs differ across {RUNS} runs")
        path = tmp_path / f"{name}.jsonl"
        path.write_text(r.texts[0], encoding="utf-8")
        rep = verify(path)
        if not rep.ok:
            problems.append(f"{name}: {len(rep.divergences)} divergences ({rep.divergences[0]})")
    report(9, not problems, "determinism/verify: " + ("; ".join(problems) if problems else
                                                      f"{len(scenario.SHIPPED)} scenarios x {RUNS} runs identical, "
                                                      "0 divergences"))


def test_10_layer_attribution():
    problems, checked = [], 0
    for name in scenario.SHIPPED:
        r = run(name)
        for gt in ground_truth(r.sim.scenario):
            if not gt.reaches_stream:
                continue
            checked += 1
            first = next((x for x in r.result.rejected if x[0] >= gt.spec.at_tick), None)
            want = ATTACK_TABLE[gt.spec.kind].monitor
            if first is None or first[1] != want:
                problems.append(f"{name}: first rejected {first}, expected {want}")
            elif first[0] != gt.observable_at:
                problems.append(f"{name}: detected at {first[0]}, observable from {gt.observable_at}")
    report(10, not problems and checked >= 5,
           "layer attribution: " + ("; ".join(problems) if problems else f"{checked} attacks attributed to their layer monitor"))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
