"""
Native -> VM translation at protection levels L0..L3.

Per native instruction the translation emits a list of *groups*; each group
is a short run of VM instructions tagged with a kind (``load``, the native
opcode, ``store``).  L1 and L2 flatten the groups; L3 puts every group under
its own ``@handler_<kind><ordinal>`` label reached through a ``vjmp``.

For ``add r0, r1`` the instruction counts are 1 / 4 / 6 / 10::

    L1  vload t_a, %vr0 ; vload t_b, %vr1 ; vadd t_a, t_b ; vstore %vr0, t_a
    L2  vload t_a, %vr0 ; vload t_b, %vr1 ; vmov t_s, t_a ; vadd t_s, t_b
        vmov t_a, t_s ; vstore %vr0, t_a

The seed picks the temporary numbering (a base offset plus a permutation per
instruction) and the order of handler ordinals.
"""

from __future__ import annotations

import random
from enum import Enum, IntEnum
from fractions import Fraction

from .errors import VirtualizeError
from .isa import (
    Imm,
    LabelDef,
    LabelRef,
    Mem,
    NativeInstr,
    NativeProgram,
    Reg,
    VmInstr,
    VmProgram,
)


class ProtectionLevel(IntEnum):
    SOURCE = -1
    L0 = 0
    L1 = 1
    L2 = 2
    L3 = 3

    @property
    def label(self) -> str:
        return "source" if self is ProtectionLevel.SOURCE else self.name

    @classmethod
    def parse(cls, text) -> "ProtectionLevel":
        if isinstance(text, int):
            return cls(text)
        t = str(text).strip()
        if t.lower() in ("source", "src", "-1"):
            return cls.SOURCE
        if t.upper() in cls.__members__:
            return cls[t.upper()]
        if t.lstrip("-").isdigit():
            return cls(int(t))
        raise ValueError(f"unknown protection level {text!r}")


VM_LEVELS = (ProtectionLevel.L0, ProtectionLevel.L1, ProtectionLevel.L2, ProtectionLevel.L3)


class OptLevel(str, Enum):
    O0 = "O0"
    O1 = "O1"
    O2 = "O2"


# Two-operand instructions that overwrite their destination register.
DEST_BINOPS = frozenset({"mov", "add", "sub", "mul", "and", "load"})
ARITH_OPS = frozenset({"add", "sub", "mul", "and"})
_TEMP_SPAN = 1024


def _vreg(op):
    if isinstance(op, Reg):
        return Reg("%v" + op.name)
    return op


def _groups(ins: NativeInstr, level: int, temps):
    """Translate one native instruction into (kind, [(opcode, operands)]) groups."""
    op = ins.opcode
    vop = "v" + op
    ta, tb, ts = (Reg(f"%vt{t}") for t in temps)
    ops = tuple(_vreg(o) for o in ins.operands)

    if op == "ret" or vop in ("vjmp", "vje", "vjle", "vjg", "vjbe"):
        return [(op, [(vop, ops)])]

    if level == 0:
        if op in ("mov", "load"):
            vop = "vmov" if op == "mov" else "vload"
        return [(op, [(vop, ops)])]

    split = level >= 2
    if op in DEST_BINOPS:
        dst, src = ops
        core = "vmov" if op in ("mov", "load") else vop
        if split:
            body = [("vmov", (ts, ta)), (core, (ts, tb))]
            store = [("vmov", (ta, ts)), ("vstore", (dst, ta))]
        else:
            body = [(core, (ta, tb))]
            store = [("vstore", (dst, ta))]
        return [
            ("load", [("vload", (ta, dst))]),
            ("load", [("vload", (tb, src))]),
            (op, body),
            ("store", store),
        ]
    if op in ("cmp", "test"):
        a, b = ops
        groups = [("load", [("vload", (ta, a))]), ("load", [("vload", (tb, b))])]
        if split:
            groups.append((op, [("vmov", (ts, ta)), (vop, (ts, tb))]))
            groups.append(("mov", [("vmov", (ta, ts))]))
        else:
            groups.append((op, [(vop, (ta, tb))]))
        return groups
    if op in ("inc", "dec"):
        (dst,) = ops
        if split:
            body = [("vmov", (ts, ta)), (vop, (ts,))]
            store = [("vmov", (ta, ts)), ("vstore", (dst, ta))]
        else:
            body = [(vop, (ta,))]
            store = [("vstore", (dst, ta))]
        return [("load", [("vload", (ta, dst))]), (op, body), ("store", store)]
    if op == "store":
        dst, src = ops
        if split:
            store = [("vmov", (ts, tb)), ("vstore", (dst, ts))]
        else:
            store = [("vstore", (dst, tb))]
        return [("load", [("vload", (tb, src))]), ("store", store)]
    raise VirtualizeError(f"unsupported native opcode {op!r}")


def virtualize(p: NativeProgram, level, seed: int = 0) -> VmProgram:
    level = ProtectionLevel.parse(level)
    if level < 0:
        raise VirtualizeError("virtualize needs a VM protection level (L0..L3)")
    rng = random.Random(seed)
    base = rng.randrange(_TEMP_SPAN)

    names = {it.name for it in p.items if isinstance(it, LabelDef)}
    if any(n.startswith("handler_") for n in names):
        raise VirtualizeError("native labels may not use the reserved handler_ prefix")

    translated = []
    for it in p.items:
        if isinstance(it, LabelDef):
            translated.append(it)
        else:
            temps = rng.sample(range(base, base + 3), 3)
            translated.append(_groups(it, int(level), temps))

    n_handlers = 0
    if level == ProtectionLevel.L3:
        n_handlers = sum(
            len(g) for g in translated if isinstance(g, list) and len(g) > 1
        )
    ordinals = list(range(1, n_handlers + 1))
    rng.shuffle(ordinals)
    next_ord = iter(ordinals)

    items = []
    marker = 0

    def emit(opcode, operands):
        nonlocal marker
        marker += 1
        items.append(VmInstr(marker, opcode, tuple(operands)))

    for entry in translated:
        if isinstance(entry, LabelDef):
            items.append(entry)
            continue
        dispatch = level == ProtectionLevel.L3 and len(entry) > 1
        for kind, body in entry:
            if dispatch:
                name = f"handler_{kind}{next(next_ord)}"
                emit("vjmp", (LabelRef(name),))
                items.append(LabelDef(name))
            for opcode, operands in body:
                emit(opcode, operands)
    return VmProgram(tuple(items))


def expansion_ratio(native: NativeProgram, vm: VmProgram) -> Fraction:
    return Fraction(len(vm.instructions), len(native.instructions))


def arithmetic_fraction(p: NativeProgram) -> Fraction:
    """Share of instructions that are destination-writing two-operand ops."""
    instrs = p.instructions
    return Fraction(sum(i.opcode in DEST_BINOPS for i in instrs), len(instrs))


# Whole-program expansion bands for arithmetic-dominant programs.
EXPANSION_BANDS = {
    ProtectionLevel.L0: (1, 1),
    ProtectionLevel.L1: (2, 4),
    ProtectionLevel.L2: (4, 8),
    ProtectionLevel.L3: (8, 15),
}
PER_OP_EXPANSION = {
    ProtectionLevel.L0: 1,
    ProtectionLevel.L1: 4,
    ProtectionLevel.L2: 6,
    ProtectionLevel.L3: 10,
}
