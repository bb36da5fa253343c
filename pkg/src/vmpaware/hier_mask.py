"""
Token streams and attention masks over VM functions.

A function with T instructions is laid out as, per instruction t, its regular
tokens ``x_t^1 .. x_t^m`` followed by the marker token ``[VINST-t]``.
``mask[u, v]`` is True iff position v is visible to position u.

Hierarchical visibility (decoder variant):

* regular ``x_t^k`` sees ``x_t^1 .. x_t^k`` and the markers of instructions
  ``1 .. t-1`` (the preceding marker is one of them);
* marker ``[VINST]_t`` sees every token of instruction t, itself, and all
  earlier markers.

The encoder-literal variant also lets ``x_t^k`` see its own marker.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .isa import LabelDef, VmInstr, VmProgram, parse_vm, serialize_vm

REGULAR = "regular"
MARKER = "marker"
DECODER = "decoder"
ENCODER = "encoder-literal"

_TOKEN = re.compile(r"\[VINST-\d+\]|-?\d+|[%@]?\w+|[^\s\w]")


@dataclass(frozen=True)
class Token:
    text: str
    kind: str
    instr: int  # 1-based
    within: int  # 1-based; the marker takes m_t + 1


@dataclass(frozen=True)
class TokenizedFunction:
    tokens: tuple

    @property
    def instr_count(self) -> int:
        return sum(t.kind == MARKER for t in self.tokens)

    @property
    def token_counts(self) -> list:
        counts = [0] * self.instr_count
        for t in self.tokens:
            if t.kind == REGULAR:
                counts[t.instr - 1] += 1
        return counts

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_counts(cls, counts) -> "TokenizedFunction":
        """Synthetic function with ``counts[t]`` regular tokens in instruction t+1."""
        toks = []
        for t, m in enumerate(counts, start=1):
            for k in range(1, m + 1):
                toks.append(Token(f"x{t}_{k}", REGULAR, t, k))
            toks.append(Token(f"[VINST-{t}]", MARKER, t, m + 1))
        return cls(tuple(toks))


def split_tokens(text: str) -> list:
    return _TOKEN.findall(text)


def tokenize_vm(p: VmProgram) -> TokenizedFunction:
    """Tokenize a (normalized) VM program.

    Label definitions are prepended to the next instruction's tokens; labels
    after the last instruction carry no instruction and are dropped.
    """
    toks = []
    pending = []
    t = 0
    for it in p.items:
        if isinstance(it, LabelDef):
            pending += [f"@{it.name}", ":"]
        elif isinstance(it, VmInstr):
            t += 1
            body = serialize_vm(VmProgram((VmInstr(None, it.opcode, it.operands),)))
            words = pending + split_tokens(body)
            pending = []
            for k, w in enumerate(words, start=1):
                toks.append(Token(w, REGULAR, t, k))
            toks.append(Token(f"[VINST-{t}]", MARKER, t, len(words) + 1))
    return TokenizedFunction(tuple(toks))


def tokenize_vm_text(text: str) -> TokenizedFunction:
    return tokenize_vm(parse_vm(text))


@dataclass(frozen=True)
class HierMask:
    matrix: np.ndarray
    variant: str
    function: TokenizedFunction

    def __post_init__(self):
        n = len(self.function)
        if self.matrix.shape != (n, n):
            raise ValueError("mask shape must match token count")


def build_causal_mask(f: TokenizedFunction) -> HierMask:
    n = len(f)
    return HierMask(np.tril(np.ones((n, n), dtype=bool)), "causal", f)


def build_hier_mask(f: TokenizedFunction, variant: str = DECODER) -> HierMask:
    if variant not in (DECODER, ENCODER):
        raise ValueError(f"unknown mask variant {variant!r}")
    toks = f.tokens
    n = len(toks)
    instr = np.array([t.instr for t in toks])
    within = np.array([t.within for t in toks])
    is_marker = np.array([t.kind == MARKER for t in toks], dtype=bool)

    same = instr[:, None] == instr[None, :]
    earlier_marker = is_marker[None, :] & (instr[None, :] < instr[:, None])
    intra_causal = same & ~is_marker[None, :] & (within[None, :] <= within[:, None])

    regular_rows = intra_causal | earlier_marker
    if variant == ENCODER:
        regular_rows = regular_rows | (same & is_marker[None, :])
    marker_rows = same | earlier_marker

    m = np.where(is_marker[:, None], marker_rows, regular_rows)
    return HierMask(m.reshape(n, n), variant, f)


def reachability(mask, hops: int) -> np.ndarray:
    """Entry [u, v] is True iff a path u -> v of length 1..hops exists."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    a = mask.matrix if isinstance(mask, HierMask) else np.asarray(mask, dtype=bool)
    a_int = a.astype(np.int64)
    reach = a.copy()
    frontier = a.copy()
    for _ in range(hops - 1):
        frontier = (frontier.astype(np.int64) @ a_int) > 0
        reach |= frontier
    return reach


@dataclass
class ExpressivityReport:
    instr_count: int
    checked: int
    violations: list
    vacuous: bool

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.vacuous:
            return f"vacuous: T={self.instr_count} leaves no instruction pair with k>1"
        status = "ok" if self.ok else f"{len(self.violations)} violation(s)"
        return f"{status}: T={self.instr_count}, {self.checked} two-hop paths checked"


def expressivity_check(f: TokenizedFunction, mask: HierMask | None = None) -> ExpressivityReport:
    """Check the marker-mediated path x_{t+k}^j -> [VINST]_t -> x_t^i for every k > 1."""
    if mask is None:
        mask = build_hier_mask(f)
    a = mask.matrix
    T = f.instr_count
    if T < 3:
        return ExpressivityReport(T, 0, [], True)
    instr = np.array([t.instr for t in f.tokens])
    regular = np.array([t.kind == REGULAR for t in f.tokens], dtype=bool)
    markers = {t.instr: pos for pos, t in enumerate(f.tokens) if t.kind == MARKER}
    violations = []
    checked = 0
    for t in range(1, T - 1):
        vt = markers[t]
        own = np.flatnonzero(regular & (instr == t))
        later = np.flatnonzero(regular & (instr >= t + 2))
        checked += len(own) * len(later)
        ok = a[later, vt][:, None] & a[vt, own][None, :]
        for j, i in zip(*np.nonzero(~ok)):
            violations.append((int(later[j]), vt, int(own[i])))
    return ExpressivityReport(T, checked, violations, False)


def format_mask(mask: HierMask) -> str:
    return "\n".join(" ".join("1" if x else "0" for x in row) for row in mask.matrix)


def parse_mask(text: str) -> np.ndarray:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool).reshape(len(rows), -1)
