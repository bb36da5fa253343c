"""
Synthetic paired corpora: pseudo-C source, lowered native code, and
normalized VM code for every (optimization level, protection level) cell.

File layout (line-delimited JSON, fixed key order)::

    {"format": "vmpaware-dataset", "version": 1, "fields": [...], ...}
    {"function_id": "f00000", "opt_level": "O0", "protection_level": "L0", ...}
    ...
"""

from __future__ import annotations

import hashlib
import json
import random
import re

from .isa import (
    Imm,
    LabelDef,
    LabelRef,
    MachineState,
    Mem,
    NativeInstr,
    NativeProgram,
    Reg,
    exec_native,
    exec_vm,
    lift_state,
    native_image,
    parse_native,
    parse_vm,
    serialize_native,
    serialize_vm,
    wrap64,
)
from .normalizer import normalize
from .optimizer import optimize
from .virtualizer import OptLevel, ProtectionLevel, virtualize

FORMAT = "vmpaware-dataset"
VERSION = 1
FIELDS = (
    "function_id",
    "opt_level",
    "protection_level",
    "source_text",
    "native_text",
    "normalized_vm_text",
    "prompt",
)

STRAIGHTLINE = "straightline"
LOOP = "loop"

_PROMPT = "# This is the source code with {level} protection: {src}"
_PROMPT_RE = re.compile(r"^# This is the source code with (L[0-3]) protection: ", re.S)


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def render_prompt(source_text: str, level) -> str:
    level = ProtectionLevel.parse(level)
    if level < 0:
        raise ValueError("prompts target a VM protection level")
    return _PROMPT.format(level=level.name, src=source_text)


def prompt_level(prompt: str) -> ProtectionLevel:
    m = _PROMPT_RE.match(prompt)
    if not m:
        raise ValueError("not a protection prompt")
    return ProtectionLevel[m.group(1)]


# ---------------------------------------------------------------------------
# Program generation
# ---------------------------------------------------------------------------

_COMPOUND = {"add": "+=", "sub": "-=", "mul": "*=", "and": "&="}


class _Builder:
    def __init__(self, rng, regs):
        self.rng = rng
        self.regs = regs
        self.src = []
        self.items = []
        self.labels = 0

    def emit(self, opcode, *operands):
        self.items.append(NativeInstr(opcode, tuple(operands)))

    def label(self, stem):
        self.labels += 1
        return f"{stem}{self.labels}"

    def line(self, depth, text):
        self.src.append("  " * depth + text)

    def statement(self, depth):
        rng = self.rng
        d = rng.choice(self.regs)
        kind = rng.choices(
            ["const", "copy", "compound_imm", "compound_reg", "load", "step"],
            weights=[3, 2, 4, 3, 2, 1],
        )[0]
        if kind == "const":
            c = rng.randint(-64, 64)
            self.line(depth, f"v{d} = {c};")
            self.emit("mov", Reg(f"r{d}"), Imm(c))
        elif kind == "copy":
            s = rng.choice([r for r in self.regs if r != d])
            self.line(depth, f"v{d} = v{s};")
            self.emit("mov", Reg(f"r{d}"), Reg(f"r{s}"))
        elif kind == "compound_imm":
            op = rng.choice(list(_COMPOUND))
            c = rng.randint(2, 5) if op == "mul" else rng.randint(1, 64)
            self.line(depth, f"v{d} {_COMPOUND[op]} {c};")
            self.emit(op, Reg(f"r{d}"), Imm(c))
        elif kind == "compound_reg":
            op = rng.choice(list(_COMPOUND))
            s = rng.choice(self.regs)
            self.line(depth, f"v{d} {_COMPOUND[op]} v{s};")
            self.emit(op, Reg(f"r{d}"), Reg(f"r{s}"))
        elif kind == "load":
            i = rng.randint(0, 63)
            self.line(depth, f"v{d} = mem[{i}];")
            self.emit("load", Reg(f"r{d}"), Mem(i))
        else:
            op = rng.choice(["inc", "dec"])
            self.line(depth, f"v{d}{'++' if op == 'inc' else '--'};")
            self.emit(op, Reg(f"r{d}"))

    def if_block(self, depth):
        rng = self.rng
        a, b = rng.sample(self.regs, 2)
        skip = self.label("skip")
        cond = rng.choice([">", "!=", "&"])
        if cond == ">":
            self.line(depth, f"if (v{a} > v{b}) {{")
            self.emit("cmp", Reg(f"r{a}"), Reg(f"r{b}"))
            self.emit("jle", LabelRef(skip))
        elif cond == "!=":
            self.line(depth, f"if (v{a} != v{b}) {{")
            self.emit("cmp", Reg(f"r{a}"), Reg(f"r{b}"))
            self.emit("je", LabelRef(skip))
        else:
            self.line(depth, f"if (v{a} & v{b}) {{")
            self.emit("test", Reg(f"r{a}"), Reg(f"r{b}"))
            self.emit("je", LabelRef(skip))
        for _ in range(rng.randint(1, 2)):
            self.statement(depth + 1)
        self.line(depth, "}")
        self.items.append(LabelDef(skip))

    def stores(self, depth):
        for _ in range(self.rng.randint(1, 2)):
            i = self.rng.randint(0, 63)
            s = self.rng.choice(self.regs)
            self.line(depth, f"mem[{i}] = v{s};")
            self.emit("store", Mem(i), Reg(f"r{s}"))


def gen_program(seed: int, size_class: str = STRAIGHTLINE):
    """Random integer function as (pseudo-C source, lowered NativeProgram)."""
    if size_class not in (STRAIGHTLINE, LOOP):
        raise ValueError(f"unknown size class {size_class!r}")
    rng = random.Random(seed)
    counter = 7
    regs = list(range(7)) if size_class == LOOP else list(range(8))
    b = _Builder(rng, regs)
    b.line(0, "void f(long *mem) {")
    if size_class == STRAIGHTLINE:
        for _ in range(rng.randint(4, 10)):
            b.statement(1)
    else:
        for _ in range(rng.randint(1, 3)):
            b.statement(1)
        n = rng.randint(1, 4)
        top = b.label("loop")
        b.line(1, f"for (v{counter} = {n}; v{counter} > 0; v{counter}--) {{")
        b.emit("mov", Reg(f"r{counter}"), Imm(n))
        b.items.append(LabelDef(top))
        for _ in range(rng.randint(2, 4)):
            if rng.random() < 0.3:
                b.if_block(2)
            else:
                b.statement(2)
        b.line(1, "}")
        b.emit("dec", Reg(f"r{counter}"))
        b.emit("cmp", Reg(f"r{counter}"), Imm(0))
        b.emit("jg", LabelRef(top))
    b.stores(1)
    b.line(0, "}")
    b.emit("ret")
    return "\n".join(b.src), NativeProgram(tuple(b.items))


def random_state(rng: random.Random) -> MachineState:
    def value():
        r = rng.random()
        if r < 0.15:
            return 0
        if r < 0.3:
            return wrap64(rng.getrandbits(64))
        return rng.randint(-100, 100)

    regs = {f"r{i}": value() for i in range(8)}
    mem = tuple(value() for _ in range(256))
    return MachineState(regs, mem, rng.random() < 0.5, rng.random() < 0.5)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


def _function(seed, idx):
    fseed = derive_seed(seed, "function", idx)
    size_class = LOOP if random.Random(fseed).random() < 0.5 else STRAIGHTLINE
    return gen_program(fseed, size_class)


def build_records(n_functions, opt_levels=("O0",), protection_levels=(0, 1, 2, 3), seed=0,
                  start=0):
    if n_functions < 1:
        raise ValueError("n_functions must be >= 1")
    opts = [OptLevel(o) for o in opt_levels]
    levels = [ProtectionLevel.parse(l) for l in protection_levels]
    records = []
    for idx in range(start, start + n_functions):
        src, native = _function(seed, idx)
        fid = f"f{idx:05d}"
        for o in opts:
            opt_native = optimize(native, o)
            native_text = serialize_native(opt_native)
            for lv in levels:
                vm = virtualize(opt_native, lv, derive_seed(seed, "poly", idx, o.value, int(lv)))
                records.append({
                    "function_id": fid,
                    "opt_level": o.value,
                    "protection_level": lv.name,
                    "source_text": src,
                    "native_text": native_text,
                    "normalized_vm_text": serialize_vm(normalize(vm)),
                    "prompt": render_prompt(src, lv),
                })
    return records


def header(n_functions, opt_levels, protection_levels, seed):
    return {
        "format": FORMAT,
        "version": VERSION,
        "fields": list(FIELDS),
        "n_functions": n_functions,
        "opt_levels": [OptLevel(o).value for o in opt_levels],
        "protection_levels": [ProtectionLevel.parse(l).name for l in protection_levels],
        "seed": seed,
    }


def dumps_dataset(records, head) -> str:
    lines = [json.dumps(head, separators=(",", ":"))]
    for r in records:
        lines.append(json.dumps({k: r[k] for k in FIELDS}, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def build_dataset(n_functions, opt_levels, protection_levels, seed, path=None, start=0) -> str:
    """Generate the grid and return (and optionally write) the dataset text."""
    records = build_records(n_functions, opt_levels, protection_levels, seed, start)
    text = dumps_dataset(records, header(n_functions, opt_levels, protection_levels, seed))
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text


def loads_dataset(text: str):
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    head = json.loads(lines[0])
    if head.get("format") != FORMAT or head.get("version") != VERSION:
        raise ValueError("not a vmpaware dataset (bad header)")
    return head, [json.loads(l) for l in lines[1:]]


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())


def check_record(record, n_states=10, seed=0) -> bool:
    """Interpreter equivalence of a record's VM text against its native text."""
    native = parse_native(record["native_text"])
    vm = parse_vm(record["normalized_vm_text"])
    rng = random.Random(derive_seed(seed, record["function_id"], record["opt_level"],
                                    record["protection_level"]))
    for _ in range(n_states):
        st = random_state(rng)
        want = native_image(exec_native(native, st))
        got = native_image(exec_vm(vm, lift_state(st)), vm=True)
        if want != got:
            return False
    return True
