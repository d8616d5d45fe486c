"""A word-addressed toy ISA with call/return, enough to exercise control-flow checks.

Instruction word layout::

    31..28 opcode | 27..24 condition | 23..0 operand

Jump and call operands are offsets from the flash base; load/store operands
are offsets from the RAM base; add/cmp operands are signed 24-bit immediates.
The stack grows down in RAM and holds full 32-bit return addresses.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

FLASH_BASE = 0x08000000
RAM_BASE = 0x20000000
RAM_WORDS = 0x400
FAILSAFE_ADDRESS = 0x08006168
FLASH_WORDS = 0x6180  # covers the failsafe routine


class Op(enum.IntEnum):
    HALT = 0
    LOAD = 1
    STORE = 2
    ADD = 3
    CMP = 4
    JUMP = 5
    CALL = 6
    RET = 7


class Cond(enum.IntEnum):
    ALWAYS = 0
    NE = 1  # taken when the zero flag is clear


def encode(op: Op, operand: int = 0, cond: Cond = Cond.ALWAYS) -> int:
    return (int(op) << 28) | (int(cond) << 24) | (operand & 0xFFFFFF)


def decode(word: int) -> tuple[Op, Cond, int]:
    op = (word >> 28) & 0xF
    cond = (word >> 24) & 0xF
    try:
        return Op(op), Cond(cond), word & 0xFFFFFF
    except ValueError:
        return Op.HALT, Cond.ALWAYS, 0


def _signed24(x: int) -> int:
    return x - (1 << 24) if x & 0x800000 else x


@dataclass(frozen=True)
class BranchEvent:
    tick: int
    kind: str  # call | return | jump
    site_address: int
    target_address: int
    return_address: int
    instruction: int

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "site": self.site_address,
            "target": self.target_address,
            "ret": self.return_address,
            "insn": self.instruction,
        }


@dataclass(frozen=True)
class Program:
    """Assembled program: flash words plus a symbol table."""

    words: tuple[int, ...]
    symbols: dict[str, tuple[int, int]]  # name -> [start, end) absolute addresses
    entry: int = FLASH_BASE

    def function_at(self, address: int) -> str:
        for name, (lo, hi) in self.symbols.items():
            if lo <= address < hi:
                return name
        return "unknown"


# RAM variable offsets used by the reference program
ZERO, CNT, DLY, CTRL, SAFE = 0x00, 0x01, 0x02, 0x03, 0x04
MCU_INIT_LOOPS = 20
CONTROL_STEPS = 10


def reference_program(failsafe: int = FAILSAFE_ADDRESS, flash_words: int = FLASH_WORDS) -> Program:
    """``main`` calls ``mcu_init`` once, then ``control_step`` in a loop."""
    if not FLASH_BASE <= failsafe < FLASH_BASE + flash_words - 2:
        raise ValueError("failsafe address outside flash image")
    main, mcu_init, control_step = 0x000, 0x010, 0x020
    fs = failsafe - FLASH_BASE
    image = [encode(Op.HALT)] * flash_words
    code = {
        main: [
            encode(Op.CALL, mcu_init),
            encode(Op.LOAD, ZERO),
            encode(Op.STORE, CNT),
            encode(Op.CALL, control_step),  # main+3: loop head
            encode(Op.LOAD, CNT),
            encode(Op.ADD, 1),
            encode(Op.STORE, CNT),
            encode(Op.CMP, CONTROL_STEPS),
            encode(Op.JUMP, main + 3, Cond.NE),
            encode(Op.HALT),
        ],
        mcu_init: [
            encode(Op.LOAD, ZERO),
            encode(Op.STORE, DLY),
            encode(Op.LOAD, DLY),  # mcu_init+2: delay loop
            encode(Op.ADD, 1),
            encode(Op.STORE, DLY),
            encode(Op.CMP, MCU_INIT_LOOPS),
            encode(Op.JUMP, mcu_init + 2, Cond.NE),
            encode(Op.RET),
        ],
        control_step: [
            encode(Op.LOAD, CTRL),
            encode(Op.ADD, 3),
            encode(Op.STORE, CTRL),
            encode(Op.RET),
        ],
        fs: [
            encode(Op.LOAD, ZERO),
            encode(Op.ADD, 1),
            encode(Op.STORE, SAFE),
            encode(Op.HALT),
        ],
    }
    for base, words in code.items():
        image[base:base + len(words)] = words
    symbols = {
        "main": (FLASH_BASE + main, FLASH_BASE + mcu_init),
        "mcu_init": (FLASH_BASE + mcu_init, FLASH_BASE + control_step),
        "control_step": (FLASH_BASE + control_step, FLASH_BASE + 0x30),
        "failsafe": (failsafe, failsafe + 4),
    }
    return Program(tuple(image), symbols)


@dataclass
class Cpu:
    flash: list[int]
    ram: list[int] = field(default_factory=lambda: [0] * RAM_WORDS)
    pc: int = FLASH_BASE
    sp: int = RAM_BASE + RAM_WORDS
    acc: int = 0
    zero: bool = False
    halted: bool = False

    def read(self, address: int) -> int:
        if FLASH_BASE <= address < FLASH_BASE + len(self.flash):
            return self.flash[address - FLASH_BASE]
        if RAM_BASE <= address < RAM_BASE + len(self.ram):
            return self.ram[address - RAM_BASE]
        return 0  # unmapped reads as HALT

    def write(self, address: int, value: int) -> None:
        if RAM_BASE <= address < RAM_BASE + len(self.ram):
            self.ram[address - RAM_BASE] = value & 0xFFFFFFFF
        elif FLASH_BASE <= address < FLASH_BASE + len(self.flash):
            self.flash[address - FLASH_BASE] = value & 0xFFFFFFFF
        else:
            raise IndexError(hex(address))

    def step(self, tick: int) -> tuple[int, Optional[BranchEvent]]:
        """Execute one instruction; return (executed address, branch event)."""
        site = self.pc
        word = self.read(site)
        op, cond, operand = decode(word)
        branch = None
        nxt = site + 1
        if op is Op.HALT:
            self.halted = True
            nxt = site
        elif op is Op.LOAD:
            self.acc = self.read(RAM_BASE + operand)
        elif op is Op.STORE:
            self.write(RAM_BASE + operand, self.acc)
        elif op is Op.ADD:
            self.acc = (self.acc + _signed24(operand)) & 0xFFFFFFFF
        elif op is Op.CMP:
            self.zero = self.acc == _signed24(operand)
        elif op is Op.JUMP:
            if cond is Cond.ALWAYS or (cond is Cond.NE and not self.zero):
                nxt = FLASH_BASE + operand
                branch = BranchEvent(tick, "jump", site, nxt, site + 1, word)
        elif op is Op.CALL:
            self.sp -= 1
            self.write(self.sp, site + 1)
            nxt = FLASH_BASE + operand
            branch = BranchEvent(tick, "call", site, nxt, site + 1, word)
        elif op is Op.RET:
            nxt = self.read(self.sp)
            self.sp += 1
            branch = BranchEvent(tick, "return", site, nxt, nxt, word)
        self.pc = nxt
        return site, branch


def nominal_trace(program: Program, max_steps: int = 100_000) -> list[BranchEvent]:
    """Branch events of an unperturbed run (tick = instruction index)."""
    cpu = Cpu(list(program.words), pc=program.entry)
    out = []
    for i in range(max_steps):
        if cpu.halted:
            break
        _, br = cpu.step(i)
        if br is not None:
            out.append(br)
    return out
