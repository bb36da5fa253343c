"""Canonicalization of VM code.

``normalize`` applies, in order:

1. drop comments (full-line and trailing) and ``.debug`` directives;
2. canonical spacing, which falls out of re-serialization;
3. replace absolute code addresses used as operands with ``@sym<k>`` labels,
   numbered by first occurrence, and define each label in front of its target;
4. renumber markers to ``[VINST-1]`` .. ``[VINST-N]`` in program order and
   drop raw instruction addresses.

Memory operands (``[i]``) are data cells, not code addresses, and are kept.
"""

from dataclasses import replace

from .isa import (
    Addr,
    Comment,
    Directive,
    LabelDef,
    LabelRef,
    VmInstr,
    VmProgram,
    parse_vm,
    serialize_vm,
)


def _symbolize(items):
    taken = {it.name for it in items if isinstance(it, LabelDef)}
    names = {}
    k = 0
    for it in items:
        if not isinstance(it, VmInstr):
            continue
        for op in it.operands:
            if isinstance(op, Addr) and op.value not in names:
                k += 1
                while f"sym{k}" in taken:
                    k += 1
                names[op.value] = f"sym{k}"
    if not names:
        return list(items)

    out = []
    for it in items:
        if isinstance(it, VmInstr):
            if it.address in names:
                out.append(LabelDef(names[it.address]))
            ops = tuple(LabelRef(names[o.value]) if isinstance(o, Addr) else o for o in it.operands)
            it = replace(it, operands=ops)
        out.append(it)
    return out


def normalize(vm: VmProgram) -> VmProgram:
    items = [it for it in vm.items if not isinstance(it, (Comment, Directive))]
    items = [replace(it, comment=None) if isinstance(it, VmInstr) else it for it in items]
    items = _symbolize(items)
    out = []
    n = 0
    for it in items:
        if isinstance(it, VmInstr):
            n += 1
            it = replace(it, marker_index=n, address=None)
        out.append(it)
    return VmProgram(tuple(out))


def normalize_text(raw: str) -> str:
    return serialize_vm(normalize(parse_vm(raw)))
