import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from strategies import levels, programs, seeds

from vmpaware.hier_mask import (
    DECODER,
    ENCODER,
    MARKER,
    HierMask,
    TokenizedFunction,
    build_causal_mask,
    build_hier_mask,
    expressivity_check,
    format_mask,
    parse_mask,
    reachability,
    tokenize_vm,
    tokenize_vm_text,
)
from vmpaware.normalizer import normalize
from vmpaware.virtualizer import virtualize

counts_st = st.lists(st.integers(0, 8), min_size=1, max_size=16)


def pos(f, instr, within):
    return next(i for i, t in enumerate(f.tokens) if t.instr == instr and t.within == within)


def visible(mask, u):
    return set(np.flatnonzero(mask.matrix[u]))


class TestTokenize:
    def test_marker_after_instruction_tokens(self):
        f = tokenize_vm_text("[VINST-1] vadd %vt0, %vt1\n[VINST-2] vret")
        assert [t.text for t in f.tokens] == ["vadd", "%vt0", ",", "%vt1", "[VINST-1]",
                                              "vret", "[VINST-2]"]
        assert f.token_counts == [4, 1]

    def test_labels_join_next_instruction(self):
        f = tokenize_vm_text("@a:\n[VINST-1] vjmp @a")
        assert [t.text for t in f.tokens if t.instr == 1] == ["@a", ":", "vjmp", "@a", "[VINST-1]"]

    def test_from_counts(self):
        f = TokenizedFunction.from_counts([2, 0, 1])
        assert f.instr_count == 3 and f.token_counts == [2, 0, 1]
        assert [t.within for t in f.tokens if t.kind == MARKER] == [3, 1, 2]


class TestCausal:
    def test_single_token(self):
        m = build_causal_mask(TokenizedFunction.from_counts([0]))
        assert m.matrix.tolist() == [[True]]

    def test_lower_triangular(self):
        m = build_causal_mask(TokenizedFunction.from_counts([2]))
        assert np.array_equal(m.matrix, np.tril(np.ones((3, 3), bool)))


class TestHierarchical:
    def test_single_instruction(self):
        f = TokenizedFunction.from_counts([2])
        m = build_hier_mask(f)
        x1, x2, mk = pos(f, 1, 1), pos(f, 1, 2), pos(f, 1, 3)
        assert visible(m, x2) == {x1, x2}
        assert visible(m, mk) == {x1, x2, mk}
        assert visible(m, x1) == {x1}

    def test_later_instruction_sees_only_marker(self):
        f = TokenizedFunction.from_counts([1, 1])
        m = build_hier_mask(f)
        x21, x11, v1 = pos(f, 2, 1), pos(f, 1, 1), pos(f, 1, 2)
        assert m.matrix[x21, v1] and not m.matrix[x21, x11]

    def test_encoder_literal_sees_own_marker(self):
        f = TokenizedFunction.from_counts([1])
        enc = build_hier_mask(f, ENCODER)
        assert enc.matrix[0, 1] and not build_hier_mask(f, DECODER).matrix[0, 1]

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            build_hier_mask(TokenizedFunction.from_counts([1]), "bidirectional")

    @given(counts_st)
    def test_decoder_is_causal(self, counts):
        m = build_hier_mask(TokenizedFunction.from_counts(counts))
        assert not np.triu(m.matrix, 1).any()

    @given(counts_st)
    def test_encoder_adds_only_own_marker(self, counts):
        f = TokenizedFunction.from_counts(counts)
        dec = build_hier_mask(f, DECODER).matrix
        enc = build_hier_mask(f, ENCODER).matrix
        assert (dec <= enc).all()
        for u, v in zip(*np.nonzero(enc & ~dec)):
            tu, tv = f.tokens[u], f.tokens[v]
            assert tu.kind != MARKER and tv.kind == MARKER and tu.instr == tv.instr


class TestReachability:
    def test_one_hop_is_mask(self):
        m = build_hier_mask(TokenizedFunction.from_counts([2, 1, 3]))
        assert np.array_equal(reachability(m, 1), m.matrix)

    def test_two_hop_via_marker(self):
        f = TokenizedFunction.from_counts([2, 1, 1])
        m = build_hier_mask(f)
        x31, x12 = pos(f, 3, 1), pos(f, 1, 2)
        assert not m.matrix[x31, x12]
        assert reachability(m, 2)[x31, x12]

    def test_causal_needs_no_marker(self):
        m = build_causal_mask(TokenizedFunction.from_counts([2, 1, 1]))
        assert np.array_equal(reachability(m, 2), m.matrix)

    def test_bad_hops(self):
        with pytest.raises(ValueError):
            reachability(np.eye(2, dtype=bool), 0)


class TestExpressivity:
    def test_vacuous_for_short_functions(self):
        rep = expressivity_check(TokenizedFunction.from_counts([3, 3]))
        assert rep.vacuous and rep.ok and "vacuous" in rep.summary()

    def test_zeroed_marker_row_is_reported(self):
        f = TokenizedFunction.from_counts([2, 2, 2])
        m = build_hier_mask(f).matrix.copy()
        m[pos(f, 1, 3)] = False
        rep = expressivity_check(f, HierMask(m, DECODER, f))
        assert not rep.ok and len(rep.violations) == rep.checked == 4

    @given(counts_st)
    def test_agrees_with_two_hop_reachability(self, counts):
        f = TokenizedFunction.from_counts(counts)
        m = build_hier_mask(f)
        assert expressivity_check(f, m).ok
        r2 = reachability(m, 2)
        for j, tj in enumerate(f.tokens):
            for i, ti in enumerate(f.tokens):
                if tj.kind == ti.kind == "regular" and tj.instr >= ti.instr + 2:
                    assert r2[j, i]

    @given(programs(), seeds, levels)
    def test_virtualized_functions(self, p, seed, level):
        f = tokenize_vm(normalize(virtualize(p, level, seed)))
        assert expressivity_check(f).ok


def test_mask_file_round_trip():
    m = build_hier_mask(TokenizedFunction.from_counts([2, 0, 3]))
    assert np.array_equal(parse_mask(format_mask(m)), m.matrix)
