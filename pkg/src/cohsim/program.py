"""Probe instruction set and its line-oriented text assembly.

The DSL covers exactly what timing probes need: loads and stores through
registers, a conditional branch (taken iff the condition register is
non-zero), load/memory fences, cycle-timer reads, line flushes, and a
single-source ALU move that forwards a value between registers.

Grammar (one instruction per line, ``#`` starts a comment)::

    program   := { line }
    line      := [ label ":" ] [ instr ] [ "#" comment ]
    instr     := "load"    reg "," "[" reg "]"
               | "store"   "[" reg "]"
               | "branch"  reg "," target
               | "alu"     reg "," reg
               | "rdtimer" reg
               | "lfence"
               | "mfence"
               | "flush"   "[" reg "]"
    target    := label | integer            # integer = instruction index
    reg       := identifier

A branch target may point one past the last instruction (jump to end).
Register values are supplied to the simulator as presets; registers never
written default to zero.  Loads deposit zero into their destination: the
simulator models dataflow and timing, not memory contents.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass


class Op(enum.Enum):
    LOAD = "load"
    STORE = "store"
    BRANCH = "branch"
    ALU = "alu"
    READ_TIMER = "rdtimer"
    FENCE_LOADS = "lfence"
    FENCE_MEM = "mfence"
    FLUSH = "flush"


MEMORY_OPS = frozenset({Op.LOAD, Op.STORE, Op.FLUSH})


class ProbeParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Instruction:
    op: Op
    dest: str | None = None   # register written (load/alu/rdtimer)
    src: str | None = None    # register read (alu source, branch condition)
    addr: str | None = None   # register holding the line address
    target: int | None = None # branch target instruction index

    def render(self, labels: dict[int, str] | None = None) -> str:
        if self.op is Op.LOAD:
            return f"load {self.dest}, [{self.addr}]"
        if self.op is Op.STORE:
            return f"store [{self.addr}]"
        if self.op is Op.BRANCH:
            tgt = labels.get(self.target, str(self.target)) if labels else str(self.target)
            return f"branch {self.src}, {tgt}"
        if self.op is Op.ALU:
            return f"alu {self.dest}, {self.src}"
        if self.op is Op.READ_TIMER:
            return f"rdtimer {self.dest}"
        if self.op is Op.FLUSH:
            return f"flush [{self.addr}]"
        return self.op.value


def load(dest: str, addr: str) -> Instruction:
    return Instruction(Op.LOAD, dest=dest, addr=addr)


def store(addr: str) -> Instruction:
    return Instruction(Op.STORE, addr=addr)


def branch(cond: str, target: int) -> Instruction:
    return Instruction(Op.BRANCH, src=cond, target=target)


def alu(dest: str, src: str) -> Instruction:
    return Instruction(Op.ALU, dest=dest, src=src)


def read_timer(dest: str) -> Instruction:
    return Instruction(Op.READ_TIMER, dest=dest)


def fence_loads() -> Instruction:
    return Instruction(Op.FENCE_LOADS)


def fence_mem() -> Instruction:
    return Instruction(Op.FENCE_MEM)


def flush(addr: str) -> Instruction:
    return Instruction(Op.FLUSH, addr=addr)


@dataclass(frozen=True)
class ProbeProgram:
    instructions: tuple[Instruction, ...]

    def __post_init__(self):
        n = len(self.instructions)
        for i, ins in enumerate(self.instructions):
            if ins.op is Op.BRANCH and not 0 <= ins.target <= n:
                raise ProbeParseError(
                    f"branch at index {i} targets {ins.target}, outside 0..{n}"
                )

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def __getitem__(self, i: int) -> Instruction:
        return self.instructions[i]


_REG = r"[A-Za-z_]\w*"
_PATTERNS = {
    Op.LOAD: re.compile(rf"^load\s+({_REG})\s*,\s*\[\s*({_REG})\s*\]$"),
    Op.STORE: re.compile(rf"^store\s+\[\s*({_REG})\s*\]$"),
    Op.BRANCH: re.compile(rf"^branch\s+({_REG})\s*,\s*(\S+)$"),
    Op.ALU: re.compile(rf"^alu\s+({_REG})\s*,\s*({_REG})$"),
    Op.READ_TIMER: re.compile(rf"^rdtimer\s+({_REG})$"),
    Op.FLUSH: re.compile(rf"^flush\s+\[\s*({_REG})\s*\]$"),
}
_LABEL = re.compile(rf"^({_REG})\s*:\s*(.*)$")


def parse_probe(text: str) -> ProbeProgram:
    """Parse the text assembly into a ProbeProgram."""
    labels: dict[str, int] = {}
    pending: list[tuple[int, str, int]] = []  # (instr idx, raw target, lineno)
    instructions: list[Instruction] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LABEL.match(line)
        if m:
            name, rest = m.group(1), m.group(2).strip()
            if name in labels:
                raise ProbeParseError(f"duplicate label {name!r}", lineno)
            labels[name] = len(instructions)
            if not rest:
                continue
            line = rest
        ins = _parse_instr(line, lineno, len(instructions), pending)
        instructions.append(ins)

    resolved = list(instructions)
    for idx, target, lineno in pending:
        if target not in labels:
            raise ProbeParseError(f"undefined label {target!r}", lineno)
        old = resolved[idx]
        resolved[idx] = Instruction(Op.BRANCH, src=old.src, target=labels[target])
    try:
        return ProbeProgram(tuple(resolved))
    except ProbeParseError as exc:
        raise ProbeParseError(str(exc)) from None


def _parse_instr(
    line: str, lineno: int, index: int, pending: list[tuple[int, str, int]]
) -> Instruction:
    word = line.split(None, 1)[0].lower()
    if word == "lfence":
        if line.lower() != "lfence":
            raise ProbeParseError("lfence takes no operands", lineno)
        return fence_loads()
    if word == "mfence":
        if line.lower() != "mfence":
            raise ProbeParseError("mfence takes no operands", lineno)
        return fence_mem()
    try:
        op = Op(word)
    except ValueError:
        raise ProbeParseError(f"unknown instruction {word!r}", lineno) from None
    m = _PATTERNS[op].match(line)
    if not m:
        raise ProbeParseError(f"malformed {word} instruction: {line!r}", lineno)
    if op is Op.LOAD:
        return load(m.group(1), m.group(2))
    if op is Op.STORE:
        return store(m.group(1))
    if op is Op.ALU:
        return alu(m.group(1), m.group(2))
    if op is Op.READ_TIMER:
        return read_timer(m.group(1))
    if op is Op.FLUSH:
        return flush(m.group(1))
    # branch: target may be numeric or a label resolved at the end
    cond, target = m.group(1), m.group(2)
    if re.fullmatch(r"\d+", target):
        return branch(cond, int(target))
    pending.append((index, target, lineno))
    return branch(cond, 0)  # placeholder target, resolved in parse_probe


def format_probe(program: ProbeProgram) -> str:
    """Render a program back to its text form (numeric branch targets)."""
    return "\n".join(ins.render() for ins in program) + "\n"
