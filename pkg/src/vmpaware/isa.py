"""
Toy native ISA and the virtualized VM ISA.

Both machines share one execution model: signed 64-bit wrapping arithmetic,
256 memory cells, and two flags (ZF, SF).  Native code addresses registers
``r0``..``r7``; VM code uses an unbounded map of virtual registers (``%vr<k>``
mirrors ``r<k>``) and temporaries (``%vt<k>``).

Text grammar, one item per line::

    add r0, r1                 native instruction
    [VINST-3] vadd %vt0, %vt1  VM instruction with marker
    1a: vmov %vr0, 5           VM instruction at a raw (hex) address
    @loop:                     label definition
    ; anything                 comment
    .debug ...                 debug directive (VM only)

Flag semantics: ``cmp a, b`` evaluates ``a - b`` and ``test a, b`` evaluates
``a & b``; ``add``/``sub``/``inc``/``dec`` set flags from their result;
``mov``/``load``/``store``/``mul``/``and`` leave flags alone.  ZF is
``result == 0`` and SF is ``result < 0``.  ``je`` jumps on ZF, ``jg`` on
``not ZF and not SF``, while ``jle`` and ``jbe`` both jump on ``ZF or SF``
(there is no carry flag, so the unsigned compare collapses onto the signed
one).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Union

from .errors import (
    ExecError,
    MemoryOutOfRange,
    ParseError,
    StepLimitExceeded,
    UnsupportedOpcode,
)

MEM_SIZE = 256
NUM_NATIVE_REGS = 8
NATIVE_REGS = tuple(f"r{i}" for i in range(NUM_NATIVE_REGS))
DEFAULT_STEP_LIMIT = 100_000

_MASK64 = (1 << 64) - 1


def wrap64(x: int) -> int:
    x &= _MASK64
    return x - (1 << 64) if x >> 63 else x


# ---------------------------------------------------------------------------
# Operands and program items
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Reg:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Mem:
    index: int

    def __str__(self):
        return f"[{self.index}]"


@dataclass(frozen=True)
class LabelRef:
    name: str

    def __str__(self):
        return f"@{self.name}"


@dataclass(frozen=True)
class Addr:
    """Absolute code address used as a jump target in raw VM text."""

    value: int

    def __str__(self):
        return f"0x{self.value:x}"


Operand = Union[Reg, Imm, Mem, LabelRef, Addr]


@dataclass(frozen=True)
class LabelDef:
    name: str


@dataclass(frozen=True)
class Comment:
    text: str


@dataclass(frozen=True)
class Directive:
    text: str


@dataclass(frozen=True)
class NativeInstr:
    opcode: str
    operands: tuple = ()


@dataclass(frozen=True)
class VmInstr:
    marker_index: int | None
    opcode: str
    operands: tuple = ()
    address: int | None = None
    comment: str | None = None


@dataclass(frozen=True)
class NativeProgram:
    items: tuple = ()

    @property
    def instructions(self):
        return [it for it in self.items if isinstance(it, NativeInstr)]

    def __len__(self):
        return len(self.instructions)


@dataclass(frozen=True)
class VmProgram:
    items: tuple = ()

    @property
    def instructions(self):
        return [it for it in self.items if isinstance(it, VmInstr)]

    def __len__(self):
        return len(self.instructions)


# Slot kinds: R register, I immediate, M memory, L jump target.
_ALU = ("R", "RI")
NATIVE_ARITY = {
    "mov": _ALU,
    "add": _ALU,
    "sub": _ALU,
    "mul": _ALU,
    "and": _ALU,
    "cmp": _ALU,
    "test": _ALU,
    "inc": ("R",),
    "dec": ("R",),
    "load": ("R", "M"),
    "store": ("M", "RI"),
    "jmp": ("L",),
    "je": ("L",),
    "jle": ("L",),
    "jg": ("L",),
    "jbe": ("L",),
    "ret": (),
}

VM_ARITY = {
    "vmov": _ALU,
    "vadd": _ALU,
    "vsub": _ALU,
    "vmul": _ALU,
    "vand": _ALU,
    "vcmp": _ALU,
    "vtest": _ALU,
    "vinc": ("R",),
    "vdec": ("R",),
    "vload": ("R", "RIM"),
    "vload_reg": ("R", "R"),
    "vstore": ("RM", "RI"),
    "vjmp": ("L",),
    "vje": ("L",),
    "vjle": ("L",),
    "vjg": ("L",),
    "vjbe": ("L",),
    "vret": (),
}

# Parsed with free-form operands, never executed.
VM_FLOAT_OPCODES = frozenset(
    {
        "vfmov",
        "vfload",
        "vfstore",
        "vfadd",
        "vfsub",
        "vfmul",
        "vfdiv",
        "vfand",
        "vfcopy",
        "vfcomp",
        "vfcmp",
    }
)

NATIVE_JUMPS = frozenset({"jmp", "je", "jle", "jg", "jbe"})
VM_JUMPS = frozenset("v" + j for j in NATIVE_JUMPS)


def _kind(op) -> str:
    if isinstance(op, Reg):
        return "R"
    if isinstance(op, Imm):
        return "I"
    if isinstance(op, Mem):
        return "M"
    return "L"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_LABEL_DEF = re.compile(r"^@(\w+)\s*:$")
_IMM = re.compile(r"^[-+]?\d+$")
_MEM = re.compile(r"^\[\s*(\d+)\s*\]$")
_LABEL_REF = re.compile(r"^@(\w+)$")
_ADDR = re.compile(r"^0x([0-9a-fA-F]+)$")
_NATIVE_REG = re.compile(r"^r[0-7]$")
_VM_REG = re.compile(r"^%v[a-z]\w*$")
_MARKER = re.compile(r"^\[VINST-(\d+)\]\s*(.*)$")
_ADDR_PREFIX = re.compile(r"^(?:0x)?([0-9a-fA-F]+):\s*(.*)$")
_BODY = re.compile(r"^([a-z_][a-z0-9_]*)(?:\s+(.*))?$")


def _split_comment(line: str):
    if ";" in line:
        code, _, comment = line.partition(";")
        return code.strip(), comment.strip()
    return line.strip(), None


def _parse_operand(tok: str, lineno: int, vm: bool) -> Operand:
    if _IMM.match(tok):
        return Imm(int(tok))
    m = _MEM.match(tok)
    if m:
        return Mem(int(m.group(1)))
    m = _LABEL_REF.match(tok)
    if m:
        return LabelRef(m.group(1))
    if vm:
        if _VM_REG.match(tok):
            return Reg(tok)
        m = _ADDR.match(tok)
        if m:
            return Addr(int(m.group(1), 16))
    elif _NATIVE_REG.match(tok):
        return Reg(tok)
    raise ParseError(f"bad operand {tok!r}", lineno)


def _parse_body(body: str, lineno: int, vm: bool):
    m = _BODY.match(body)
    if not m:
        raise ParseError(f"malformed instruction {body!r}", lineno)
    opcode, rest = m.group(1), m.group(2)
    operands = ()
    if rest is not None and rest.strip():
        toks = [t.strip() for t in rest.split(",")]
        if any(not t for t in toks):
            raise ParseError("empty operand", lineno)
        operands = tuple(_parse_operand(t, lineno, vm) for t in toks)

    table = VM_ARITY if vm else NATIVE_ARITY
    if vm and opcode in VM_FLOAT_OPCODES:
        return opcode, operands
    if opcode not in table:
        raise ParseError(f"unknown opcode {opcode!r}", lineno)
    slots = table[opcode]
    if len(operands) != len(slots):
        raise ParseError(
            f"{opcode} takes {len(slots)} operand(s), got {len(operands)}", lineno
        )
    for i, (op, allowed) in enumerate(zip(operands, slots)):
        if _kind(op) not in allowed:
            raise ParseError(f"{opcode}: operand {i + 1} ({op}) has wrong kind", lineno)
    return opcode, operands


def _check_labels(items, where):
    defined = {}
    for it, lineno in where:
        if isinstance(it, LabelDef):
            if it.name in defined:
                raise ParseError(f"duplicate label @{it.name}", lineno)
            defined[it.name] = lineno
    addresses = {}
    for it, lineno in where:
        if isinstance(it, VmInstr) and it.address is not None:
            if it.address in addresses:
                raise ParseError(f"duplicate address 0x{it.address:x}", lineno)
            addresses[it.address] = lineno
    for it, lineno in where:
        if isinstance(it, (NativeInstr, VmInstr)):
            for op in it.operands:
                if isinstance(op, LabelRef) and op.name not in defined:
                    raise ParseError(f"undefined label @{op.name}", lineno)
                if isinstance(op, Addr) and op.value not in addresses:
                    raise ParseError(f"dangling address {op}", lineno)


def parse_native(text: str) -> NativeProgram:
    where = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        code, _ = _split_comment(raw)
        if not code:
            continue
        m = _LABEL_DEF.match(code)
        if m:
            where.append((LabelDef(m.group(1)), lineno))
            continue
        opcode, operands = _parse_body(code, lineno, vm=False)
        where.append((NativeInstr(opcode, operands), lineno))
    _check_labels([w[0] for w in where], where)
    return NativeProgram(tuple(w[0] for w in where))


def parse_vm(text: str) -> VmProgram:
    """Parse VM text.  Marker indices and raw addresses are kept verbatim."""
    where = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        code, comment = _split_comment(raw)
        if not code:
            if comment is not None:
                where.append((Comment(comment), lineno))
            continue
        if code.startswith("."):
            if not code.startswith(".debug"):
                raise ParseError(f"unknown directive {code.split()[0]!r}", lineno)
            where.append((Directive(" ".join(code.split())), lineno))
            continue
        m = _LABEL_DEF.match(code)
        if m:
            where.append((LabelDef(m.group(1)), lineno))
            continue
        marker = address = None
        if code.startswith("[VINST"):
            m = _MARKER.match(code)
            if not m or int(m.group(1)) < 1:
                raise ParseError("malformed marker token", lineno)
            marker, code = int(m.group(1)), m.group(2)
        else:
            m = _ADDR_PREFIX.match(code)
            if m:
                address, code = int(m.group(1), 16), m.group(2)
        opcode, operands = _parse_body(code, lineno, vm=True)
        where.append((VmInstr(marker, opcode, operands, address, comment), lineno))
    _check_labels([w[0] for w in where], where)
    return VmProgram(tuple(w[0] for w in where))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _render_instr(opcode, operands):
    if not operands:
        return opcode
    return f"{opcode} {', '.join(str(o) for o in operands)}"


def serialize_native(p: NativeProgram) -> str:
    lines = []
    for it in p.items:
        if isinstance(it, LabelDef):
            lines.append(f"@{it.name}:")
        else:
            lines.append(_render_instr(it.opcode, it.operands))
    return "\n".join(lines)


def serialize_vm(p: VmProgram) -> str:
    lines = []
    for it in p.items:
        if isinstance(it, LabelDef):
            lines.append(f"@{it.name}:")
        elif isinstance(it, Comment):
            lines.append(f"; {it.text}".rstrip())
        elif isinstance(it, Directive):
            lines.append(it.text)
        else:
            body = _render_instr(it.opcode, it.operands)
            if it.marker_index is not None:
                body = f"[VINST-{it.marker_index}] {body}"
            elif it.address is not None:
                body = f"{it.address:x}: {body}"
            if it.comment is not None:
                body = f"{body} ; {it.comment}".rstrip()
            lines.append(body)
    return "\n".join(lines)


def strip_markers(p: VmProgram) -> VmProgram:
    """Drop marker metadata; execution never depends on it."""
    return VmProgram(
        tuple(replace(it, marker_index=None) if isinstance(it, VmInstr) else it for it in p.items)
    )


# ---------------------------------------------------------------------------
# Machine state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MachineState:
    """Registers, memory and flags.  Treat ``registers`` as read-only."""

    registers: dict = field(default_factory=dict)
    memory: tuple = (0,) * MEM_SIZE
    zf: bool = False
    sf: bool = False
    pc: int = 0
    steps: int = 0
    halted: bool = False

    @classmethod
    def zero(cls):
        return cls(registers={r: 0 for r in NATIVE_REGS})


def vm_register(native_name: str) -> str:
    return "%v" + native_name


def lift_state(state: MachineState) -> MachineState:
    """Map a native input state onto the VM register file (rN -> %vrN)."""
    regs = {vm_register(k): v for k, v in state.registers.items()}
    return replace(state, registers=regs, pc=0, steps=0, halted=False)


def native_image(state: MachineState, vm: bool = False):
    """Observable part of a state: native registers, memory, flags."""
    if vm:
        regs = tuple(state.registers.get(vm_register(r), 0) for r in NATIVE_REGS)
    else:
        regs = tuple(state.registers.get(r, 0) for r in NATIVE_REGS)
    return regs, state.memory, state.zf, state.sf


# ---------------------------------------------------------------------------
# Interpreters
# ---------------------------------------------------------------------------

# Kernel opcodes shared by both machines.
_MOVE, _ADD, _SUB, _MUL, _AND, _CMP, _TEST, _INC, _DEC = range(9)
_JMP, _JE, _JLE, _JG, _JBE, _RET = range(9, 15)

_KERNEL = {
    "mov": _MOVE,
    "load": _MOVE,
    "store": _MOVE,
    "load_reg": _MOVE,
    "add": _ADD,
    "sub": _SUB,
    "mul": _MUL,
    "and": _AND,
    "cmp": _CMP,
    "test": _TEST,
    "inc": _INC,
    "dec": _DEC,
    "jmp": _JMP,
    "je": _JE,
    "jle": _JLE,
    "jg": _JG,
    "jbe": _JBE,
    "ret": _RET,
}

# Runtime operand encodings: (0, name) register, (1, value) immediate,
# (2, index) memory cell; jump targets are resolved to instruction indices.


def _compile(items, vm: bool):
    labels = {}
    addresses = {}
    instrs = []
    for it in items:
        if isinstance(it, LabelDef):
            labels[it.name] = len(instrs)
        elif isinstance(it, (NativeInstr, VmInstr)):
            if vm and it.address is not None:
                addresses[it.address] = len(instrs)
            instrs.append(it)

    code = []
    for ins in instrs:
        name = ins.opcode
        if vm:
            if name in VM_FLOAT_OPCODES:
                raise UnsupportedOpcode(f"unsupported opcode {name} (floating point)")
            name = name[1:]
        if name not in _KERNEL:
            raise UnsupportedOpcode(f"unsupported opcode {ins.opcode}")
        k = _KERNEL[name]
        ops = []
        for op in ins.operands:
            if isinstance(op, Reg):
                ops.append((0, op.name))
            elif isinstance(op, Imm):
                ops.append((1, op.value))
            elif isinstance(op, Mem):
                ops.append((2, op.index))
            elif isinstance(op, LabelRef):
                if op.name not in labels:
                    raise ExecError(f"undefined label @{op.name}")
                ops.append(labels[op.name])
            else:
                if op.value not in addresses:
                    raise ExecError(f"dangling address {op}")
                ops.append(addresses[op.value])
        while len(ops) < 2:
            ops.append(None)
        code.append((k, ops[0], ops[1]))
    return code


def _run(code, state: MachineState, step_limit: int) -> MachineState:
    if step_limit <= 0:
        raise ValueError("step_limit must be positive")
    regs = dict(state.registers)
    mem = list(state.memory)
    if len(mem) != MEM_SIZE:
        raise ExecError(f"memory must have {MEM_SIZE} cells")
    zf, sf = state.zf, state.sf
    pc = 0
    steps = 0
    n = len(code)
    reg_get = regs.get

    def read(o):
        kind, x = o
        if kind == 0:
            return reg_get(x, 0)
        if kind == 1:
            return x
        if x >= MEM_SIZE:
            raise MemoryOutOfRange(f"memory index {x} out of range")
        return mem[x]

    halted = False
    while pc < n:
        if steps >= step_limit:
            raise StepLimitExceeded(f"step limit {step_limit} exceeded at pc={pc}")
        k, a, b = code[pc]
        steps += 1
        pc += 1
        if k == _MOVE:
            v = read(b)
            if a[0] == 0:
                regs[a[1]] = v
            else:
                if a[1] >= MEM_SIZE:
                    raise MemoryOutOfRange(f"memory index {a[1]} out of range")
                mem[a[1]] = v
        elif k <= _DEC:
            x = reg_get(a[1], 0)
            if k == _ADD:
                r = wrap64(x + read(b))
            elif k == _SUB:
                r = wrap64(x - read(b))
            elif k == _MUL:
                regs[a[1]] = wrap64(x * read(b))
                continue
            elif k == _AND:
                regs[a[1]] = x & read(b)
                continue
            elif k == _CMP:
                r = wrap64(x - read(b))
                zf, sf = r == 0, r < 0
                continue
            elif k == _TEST:
                r = x & read(b)
                zf, sf = r == 0, r < 0
                continue
            elif k == _INC:
                r = wrap64(x + 1)
            else:
                r = wrap64(x - 1)
            regs[a[1]] = r
            zf, sf = r == 0, r < 0
        elif k == _RET:
            halted = True
            break
        else:
            if (
                k == _JMP
                or (k == _JE and zf)
                or (k in (_JLE, _JBE) and (zf or sf))
                or (k == _JG and not zf and not sf)
            ):
                pc = a
    else:
        halted = True
    return MachineState(regs, tuple(mem), zf, sf, pc, steps, halted)


def exec_native(p: NativeProgram, state: MachineState | None = None,
                step_limit: int = DEFAULT_STEP_LIMIT) -> MachineState:
    if state is None:
        state = MachineState.zero()
    return _run(_compile(p.items, vm=False), state, step_limit)


def exec_vm(p: VmProgram, state: MachineState | None = None,
            step_limit: int = DEFAULT_STEP_LIMIT) -> MachineState:
    """Run a VM program.  Markers are inert; ``vf*`` opcodes are rejected."""
    if state is None:
        state = MachineState()
    return _run(_compile(p.items, vm=True), state, step_limit)
