from dataclasses import replace

import numpy as np

import vmpaware.checks as checks
from vmpaware.hier_mask import build_causal_mask
from vmpaware.isa import parse_native
from vmpaware.virtualizer import virtualize


def test_suites_pass_on_small_budgets():
    for res in checks.run_all(n_programs=5, n_states=2, n_batches=2):
        assert res.ok and res.checked > 0, res.summary()


def test_gradient_check_catches_a_wrong_gradient(monkeypatch):
    real = checks.fcl_loss
    monkeypatch.setattr(checks, "fcl_loss", lambda *a: (real(*a)[0], 1.01 * real(*a)[1]))
    res = checks.gradient_check(n_batches=2, dim=8)
    assert not res.ok and {f[1] for f in res.failures} == {"fcl"}
    assert "FAILED (2)" in res.summary()


def test_mask_check_catches_missing_cross_instruction_paths(monkeypatch):
    # a causal mask links everything directly and passes
    monkeypatch.setattr(checks, "build_hier_mask", build_causal_mask)
    assert checks.mask_check(max_instr=4, max_tokens=2).ok

    def own_only(f):
        m = build_causal_mask(f)
        instr = np.array([t.instr for t in f.tokens])
        return replace(m, matrix=m.matrix & (instr[:, None] == instr[None, :]))

    monkeypatch.setattr(checks, "build_hier_mask", own_only)
    assert not checks.mask_check(max_instr=4, max_tokens=2).ok


def test_semantic_check_catches_a_broken_virtualizer(monkeypatch):
    monkeypatch.setattr(checks, "virtualize",
                        lambda p, lv, seed: virtualize(parse_native("mov r0, 1\nret"), lv, seed))
    assert not checks.semantic_check(n_programs=4, n_states=2).ok


def test_count_patterns_cover_every_pair():
    pats = list(checks.count_patterns(max_instr=4, max_tokens=3))
    assert len(pats) == len(set(pats))
    for a in range(1, 4):
        for b in range(1, 4):
            assert any(p[0] == a and p[-1] == b and len(p) == 4 for p in pats)
