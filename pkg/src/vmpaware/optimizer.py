"""Peephole passes standing in for compiler optimization levels.

O1 folds ``mov rd, c`` followed by an immediate-only update of ``rd`` into a
single ``mov``.  O2 additionally drops register writes that are overwritten
before any read inside the same basic block.

Flags are treated as dead at ``ret`` (they are not part of a function's
result), so a fold that replaces a flag-setting ``add`` with a ``mov`` is only
done when no later instruction of the block reads the flags before they are
redefined.  Equivalence is therefore over registers and memory.
"""

from __future__ import annotations

from .isa import Imm, LabelDef, NativeInstr, NativeProgram, Reg, wrap64
from .virtualizer import OptLevel

_FOLDABLE = {
    "add": lambda a, b: wrap64(a + b),
    "sub": lambda a, b: wrap64(a - b),
    "mul": lambda a, b: wrap64(a * b),
    "and": lambda a, b: a & b,
    "inc": lambda a, _: wrap64(a + 1),
    "dec": lambda a, _: wrap64(a - 1),
}
_SETS_FLAGS = frozenset({"add", "sub", "inc", "dec", "cmp", "test"})
_READS_FLAGS = frozenset({"je", "jle", "jg", "jbe"})
_BLOCK_END = frozenset({"jmp", "je", "jle", "jg", "jbe", "ret"})


def _flags_dead_after(items, i) -> bool:
    for it in items[i + 1:]:
        if isinstance(it, LabelDef):
            return False
        if it.opcode in _READS_FLAGS:
            return False
        if it.opcode == "ret" or it.opcode in ("cmp", "test"):
            return True
        if it.opcode in _SETS_FLAGS:
            return True
        if it.opcode == "jmp":
            return False
    # falling off the end behaves like ret
    return True


def _fold_once(items):
    for i in range(len(items) - 1):
        a, b = items[i], items[i + 1]
        if not (isinstance(a, NativeInstr) and isinstance(b, NativeInstr)):
            continue
        if a.opcode != "mov" or not isinstance(a.operands[1], Imm):
            continue
        if b.opcode not in _FOLDABLE or b.operands[0] != a.operands[0]:
            continue
        if b.opcode in ("inc", "dec"):
            rhs = 0
        elif isinstance(b.operands[1], Imm):
            rhs = b.operands[1].value
        else:
            continue
        if b.opcode in _SETS_FLAGS and not _flags_dead_after(items, i + 1):
            continue
        value = _FOLDABLE[b.opcode](a.operands[1].value, rhs)
        folded = NativeInstr("mov", (a.operands[0], Imm(value)))
        return items[:i] + [folded] + items[i + 2:]
    return None


def fold_constants(p: NativeProgram) -> NativeProgram:
    items = list(p.items)
    while True:
        nxt = _fold_once(items)
        if nxt is None:
            return NativeProgram(tuple(items))
        items = nxt


def _reads(ins: NativeInstr, reg: Reg) -> bool:
    if ins.opcode in ("mov", "load"):
        return ins.operands[1] == reg
    return reg in ins.operands


def _write_is_dead(items, i) -> bool:
    reg = items[i].operands[0]
    for it in items[i + 1:]:
        if isinstance(it, LabelDef) or it.opcode in _BLOCK_END:
            return False
        if _reads(it, reg):
            return False
        if it.opcode in ("mov", "load") and it.operands[0] == reg:
            return True
    return False


def eliminate_dead_writes(p: NativeProgram) -> NativeProgram:
    items = list(p.items)
    changed = True
    while changed:
        changed = False
        for i, it in enumerate(items):
            if (
                isinstance(it, NativeInstr)
                and it.opcode in ("mov", "load", "mul", "and")
                and _write_is_dead(items, i)
            ):
                del items[i]
                changed = True
                break
    return NativeProgram(tuple(items))


def optimize(p: NativeProgram, o) -> NativeProgram:
    o = OptLevel(o)
    if o is OptLevel.O0:
        return p
    p = fold_constants(p)
    if o is OptLevel.O2:
        p = fold_constants(eliminate_dead_writes(p))
    return p
