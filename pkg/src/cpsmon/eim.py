"""Execution integrity monitor.

Boot: the live firmware is compared with the stored reference before the CPU
is allowed to run. Afterwards every branch the CPU takes is checked against
the reference control-flow table; a mismatch redirects execution to the
failsafe routine.

EIM also keeps a memory watch for forensics: the stack slot holding each
pending return address, plus the code word at every reference branch site.
The watch is re-compared whenever plant memory changes and a
``memory_compare`` record is logged whenever a watched word's match status
flips.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .ec import (
    Effect,
    FluentId,
    Happens,
    HoldsAt,
    Implies,
    RuleKind,
    RuleSet,
    Trigger,
    initiates,
    terminates,
)
from .errors import UnknownBranchSite
from .monitor import DetectionPredicate, Monitor, PatternSpec, failing_predicates
from .plant.core import Plant
from .plant.firmware import FirmwareImage, ReferenceControlFlow, verify_firmware
from .plant.isa import BranchEvent

SUBJECT = "fcs"
FIELDS = ("site", "kind", "instruction", "return", "target")


class Permit(enum.Enum):
    GRANTED = "granted"
    WITHHELD = "withheld"


@dataclass(frozen=True)
class BranchVerdict:
    ok: bool
    field: Optional[str] = None

    def __str__(self) -> str:
        return "ok" if self.ok else f"tampered({self.field})"


OK = BranchVerdict(True)


def check_branch(event, ref: ReferenceControlFlow) -> BranchVerdict:
    """Compare a branch (BranchEvent or its dict form) with the reference.

    Fields are checked in the order site, kind, instruction, return, target;
    the first mismatch is reported.
    """
    d = event.as_dict() if isinstance(event, BranchEvent) else event
    entry = ref.get(d["site"])
    try:
        if entry is None:
            raise UnknownBranchSite(hex(d["site"]))
    except UnknownBranchSite:
        return BranchVerdict(False, "site")
    if d["kind"] != entry.kind:
        return BranchVerdict(False, "kind")
    if entry.instruction is not None and d["insn"] != entry.instruction:
        return BranchVerdict(False, "instruction")
    if d["ret"] != entry.ret:
        return BranchVerdict(False, "return")
    if d["target"] != entry.target:
        return BranchVerdict(False, "target")
    return OK


def eim_rules() -> RuleSet:
    fw, cf = FluentId("firmware_ok", SUBJECT), FluentId("control_flow_ok", SUBJECT)
    ok = lambda ctx: bool(ctx.get("ok"))  # noqa: E731
    bad = lambda ctx: not ctx.get("ok")  # noqa: E731
    return RuleSet([
        initiates("check_firmware_ok", fw, ok, "ok"),
        terminates("check_firmware_ok", fw, bad, "not ok"),
        initiates("execute_program", fw),
        initiates("check_control_flow_ok", cf, ok, "ok"),
        terminates("check_control_flow_ok", cf, bad, "not ok"),
        terminates("fail_safe", fw),
        terminates("fail_safe", cf),
    ])


EIM_INITIALLY = (FluentId("control_flow_ok", SUBJECT),)


def EIM_PATTERN() -> tuple:
    fw, cf = FluentId("firmware_ok", SUBJECT), FluentId("control_flow_ok", SUBJECT)
    return (
        Implies((Trigger("happens", "check_firmware_ok"),), (HoldsAt(fw),)),
        Effect(RuleKind.INITIATES, "execute_program", fw),
        Implies((Trigger("happens", "check_control_flow_ok"),), (HoldsAt(cf),)),
        Implies(
            (
                Trigger("happens", "check_firmware_ok", (HoldsAt(fw, negated=True),)),
                Trigger("happens", "check_control_flow_ok", (HoldsAt(cf, negated=True),)),
            ),
            (Happens("fail_safe"), HoldsAt(fw, negated=True), HoldsAt(cf, negated=True)),
        ),
    )


def firmware_predicate(reference_digest: int) -> DetectionPredicate:
    digest = f"{reference_digest:016x}"

    def check(samples, fluents):
        v = samples[-1].value
        return v["digest"] == digest and v["mismatches"] == 0

    return DetectionPredicate("eim.firmware", "firmware", check)


def control_flow_predicate(ref: ReferenceControlFlow) -> DetectionPredicate:
    def check(samples, fluents):
        return check_branch(samples[-1].value, ref).ok

    return DetectionPredicate("eim.control_flow", "branch", check)


def firmware_sample(live: FirmwareImage, reference: FirmwareImage) -> dict:
    verify_firmware(live, reference)  # raises on shape mismatch
    mismatches = sum(a != b for a, b in zip(live.words, reference.words))
    return {"digest": f"{live.digest:016x}", "mismatches": mismatches}


@dataclass
class EimConfig:
    reference: Optional[FirmwareImage]  # None when rebuilt from a log
    cfg: ReferenceControlFlow
    recheck_ticks: tuple[int, ...] = ()
    continuous: bool = False
    reference_digest: int = 0

    def __post_init__(self):
        if self.reference is not None:
            self.reference_digest = self.reference.digest

    @property
    def failsafe_address(self) -> int:
        return self.cfg.failsafe_address


@dataclass
class _Watch:
    address: int
    expected: int
    what: str
    matched: bool = True


class Eim(Monitor):
    id = "eim"

    def __init__(self, config: EimConfig, plant: Optional[Plant] = None):
        super().__init__()
        self.config = config
        self.plant = plant
        self.permit: Optional[Permit] = None
        self.verdicts: list[tuple[int, BranchVerdict]] = []
        self._watches: dict[int, _Watch] = {}
        self._generation = -1
        self.add_stream("firmware", role="state")
        self.add_stream("branch", role="transition")
        self.add_predicate(firmware_predicate(config.reference_digest))
        self.add_predicate(control_flow_predicate(config.cfg))
        rules = eim_rules()
        self.add_subject(SUBJECT, rules, EIM_INITIALLY)
        self.add_pattern(PatternSpec("eim.pattern", SUBJECT, EIM_PATTERN(), rules))

    # -- memory watch -----------------------------------------------------------

    def _watch(self, tick: int, address: int, expected: int, what: str) -> None:
        matched = self.plant.read_memory(address) == expected
        self._watches[address] = _Watch(address, expected, what, matched)
        self.record("memory_compare", what, address=address, expected=expected,
                    live=self.plant.read_memory(address), match=matched, reason="watch")

    def _compare(self, tick: int) -> None:
        gen = self.plant.mem_generation
        if gen == self._generation:
            return
        self._generation = gen
        for addr in sorted(self._watches):
            w = self._watches[addr]
            live = self.plant.read_memory(addr)
            matched = live == w.expected
            if matched != w.matched:
                w.matched = matched
                self.record("memory_compare", w.what, address=addr, expected=w.expected,
                            live=live, match=matched, reason="change")

    # -- gate ------------------------------------------------------------------

    def step(self, tick: int) -> None:
        plant = self.plant
        out = plant.last_output
        cfg = self.config
        samples = {}
        firmware_check = tick == 0 or tick in cfg.recheck_ticks or cfg.continuous
        if firmware_check:
            samples["firmware"] = firmware_sample(plant.live_image(), cfg.reference)
        if tick == 0:
            for site in sorted(cfg.cfg.entries):
                e = cfg.cfg.entries[site]
                if e.instruction is not None:
                    self._watch(tick, site, e.instruction, "code")
        branches = list(out.branches)
        if branches:
            b = branches[-1]
            d = b.as_dict()
            if b.kind == "call":
                d["slot"] = plant.cpu.sp
            samples["branch"] = d
        self.push(samples, tick)
        failing = {w.predicate_id for w in failing_predicates(self, self._streams, tick)}

        if firmware_check:
            gate_execution(self, tick, "eim.firmware" not in failing)

        if branches:
            b, d = branches[-1], samples["branch"]
            verdict = check_branch(b, cfg.cfg)
            assert verdict.ok == ("eim.control_flow" not in failing)
            self.verdicts.append((tick, verdict))
            self.happen(SUBJECT, "check_control_flow_ok", tick, ok=verdict.ok, field=verdict.field or "")
            if verdict.ok:
                if b.kind == "call":
                    self._watch(tick, d["slot"], b.return_address, "return_slot")
                elif b.kind == "return":
                    self._watches.pop(plant.cpu.sp - 1, None)
            else:
                self.record("branch_verdict", str(verdict), site=b.site_address)
                self.happen(SUBJECT, "fail_safe", tick, reason=verdict.field)
                self.send(tick, "fail_safe", address=cfg.failsafe_address)
        self._compare(tick)


def gate_execution(eim: Eim, tick: int, ok: bool) -> Permit:
    """Record the firmware check and grant or withhold execution."""
    first = eim.permit is None
    eim.happen(SUBJECT, "check_firmware_ok", tick, ok=ok)
    if ok:
        if first:
            eim.happen(SUBJECT, "execute_program", tick)
            eim.send(tick, "permit", granted=True)
        eim.permit = Permit.GRANTED
    else:
        eim.happen(SUBJECT, "fail_safe", tick, reason="firmware")
        eim.send(tick, "halt", granted=False)
        eim.permit = Permit.WITHHELD
    eim.record("permit", eim.permit.value, recheck=not first)
    return eim.permit
