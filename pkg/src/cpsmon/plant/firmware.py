"""Firmware images and the reference control-flow table.

Digest: 64-bit FNV-1a over the image words serialised little-endian.

Flat binary format: consecutive 32-bit little-endian words; the base address
is supplied by the scenario, not stored in the file.

Reference table format, one entry per line, ``#`` starts a comment::

    failsafe 0x08006168
    <site> <kind> <target> <return> [<instruction>]

Addresses are hexadecimal. ``kind`` is one of call/return/jump. For a return
site the target is the expected return address; for a jump the return column
is ``site + 1`` by convention.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from ..errors import ParseError, ShapeMismatch
from .isa import FAILSAFE_ADDRESS, BranchEvent, Program, nominal_trace

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def words_to_bytes(words: Sequence[int]) -> bytes:
    return struct.pack(f"<{len(words)}I", *words)


@dataclass(frozen=True)
class FirmwareImage:
    base_address: int
    words: tuple[int, ...]
    digest: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "digest", fnv1a64(words_to_bytes(self.words)))

    def __len__(self) -> int:
        return len(self.words)

    def contains(self, address: int) -> bool:
        return self.base_address <= address < self.base_address + len(self.words)

    def word_at(self, address: int) -> int:
        return self.words[address - self.base_address]

    def to_bytes(self) -> bytes:
        return words_to_bytes(self.words)

    @classmethod
    def from_bytes(cls, base_address: int, data: bytes) -> "FirmwareImage":
        if len(data) % 4:
            raise ParseError("firmware image length is not a multiple of 4 bytes")
        return cls(base_address, struct.unpack(f"<{len(data) // 4}I", data))

    @classmethod
    def load(cls, path, base_address: int) -> "FirmwareImage":
        return cls.from_bytes(base_address, Path(path).read_bytes())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def verify_firmware(live: FirmwareImage, reference: FirmwareImage, paranoid: bool = True) -> bool:
    if live.base_address != reference.base_address or len(live) != len(reference):
        raise ShapeMismatch(
            f"live {live.base_address:#x}+{len(live)} vs reference "
            f"{reference.base_address:#x}+{len(reference)}"
        )
    if live.digest != reference.digest:
        return False
    return live.words == reference.words if paranoid else True


@dataclass(frozen=True)
class RefEntry:
    site: int
    kind: str
    target: int
    ret: int
    instruction: Optional[int] = None


@dataclass(frozen=True)
class ReferenceControlFlow:
    entries: dict[int, RefEntry]
    failsafe_address: int = FAILSAFE_ADDRESS

    def __contains__(self, site: int) -> bool:
        return site in self.entries

    def get(self, site: int) -> Optional[RefEntry]:
        return self.entries.get(site)

    @classmethod
    def from_trace(cls, trace: Iterable[BranchEvent], failsafe_address: int = FAILSAFE_ADDRESS) -> "ReferenceControlFlow":
        entries: dict[int, RefEntry] = {}
        for br in trace:
            e = RefEntry(br.site_address, br.kind, br.target_address, br.return_address, br.instruction)
            prev = entries.setdefault(br.site_address, e)
            if prev != e:
                raise ValueError(f"site {br.site_address:#x} has more than one outcome")
        return cls(entries, failsafe_address)

    @classmethod
    def for_program(cls, program: Program, failsafe_address: int = FAILSAFE_ADDRESS) -> "ReferenceControlFlow":
        return cls.from_trace(nominal_trace(program), failsafe_address)

    def dumps(self) -> str:
        lines = [
            "# reference control-flow table",
            "# site kind target return [instruction]",
            f"failsafe {self.failsafe_address:#010x}",
        ]
        for site in sorted(self.entries):
            e = self.entries[site]
            row = f"{e.site:#010x} {e.kind:<6} {e.target:#010x} {e.ret:#010x}"
            if e.instruction is not None:
                row += f" {e.instruction:#010x}"
            lines.append(row)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ReferenceControlFlow":
        entries: dict[int, RefEntry] = {}
        failsafe = FAILSAFE_ADDRESS
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "failsafe" and len(parts) == 2:
                    failsafe = int(parts[1], 16)
                    continue
                if len(parts) not in (4, 5) or parts[1] not in ("call", "return", "jump"):
                    raise ValueError(line)
                nums = [int(p, 16) for p in (parts[0], *parts[2:])]
            except ValueError:
                raise ParseError(f"bad reference entry {raw!r}", line=lineno) from None
            insn = nums[3] if len(nums) == 4 else None
            entries[nums[0]] = RefEntry(nums[0], parts[1], nums[1], nums[2], insn)
        return cls(entries, failsafe)

    @classmethod
    def load(cls, path) -> "ReferenceControlFlow":
        return cls.loads(Path(path).read_text())
