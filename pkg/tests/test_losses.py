import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vmpaware.checks import numeric_grad, relative_error
from vmpaware.losses import (
    PCL_AS_WRITTEN,
    PCL_LOWER_BOUND,
    EmbeddingRecord,
    LossConfig,
    cosine,
    fcl_loss,
    fcl_loss_records,
    fcl_weight,
    hard_negatives,
    loss_config_from_mapping,
    pcl_loss,
    pcl_loss_records,
    peo_loss,
    peo_loss_records,
    vmp_loss,
    vmp_loss_records,
)

LEVELS = [-1, 0, 1, 2, 3]


def rec(fid, level, *v):
    return EmbeddingRecord(fid, level, np.array(v, dtype=float))


def pair_batch(d, s=0, t=1):
    return [rec("f", s, 0.0, 0.0), rec("f", t, d, 0.0)]


finite = st.floats(-10, 10, allow_nan=False)


@st.composite
def batches(draw, d=4):
    n_f = draw(st.integers(1, 3))
    levels = draw(st.lists(st.sampled_from(LEVELS), min_size=2, max_size=5, unique=True))
    e = draw(arrays(float, (n_f * len(levels), d), elements=finite))
    fids = [f"f{i}" for i in range(n_f) for _ in levels]
    return e, fids, levels * n_f


def oracle_fcl(e, fids, levels, tau):
    total = 0.0
    for i, j in itertools.permutations(range(len(e)), 2):
        if fids[i] == fids[j] and levels[i] != levels[j]:
            total += math.exp(-abs(levels[i] - levels[j]) / tau) * math.dist(e[i], e[j])
    return total


def oracle_pcl(e, fids, levels, cfg):
    total = 0.0
    for i, j in itertools.permutations(range(len(e)), 2):
        if fids[i] == fids[j] and levels[i] < levels[j]:
            d, target = math.dist(e[i], e[j]), cfg.beta * (levels[j] - levels[i])
            if cfg.pcl_variant == PCL_AS_WRITTEN:
                total += max(0.0, d - target + cfg.margin_m)
            else:
                total += max(0.0, target - cfg.margin_m - d)
    return total


class TestSpotValues:
    def test_peo_tied(self):
        cfg = LossConfig(tau=1.0, lambda_h=0.0)
        v, _ = peo_loss([1, 0], [1, 0], [[1, 0]], cfg)
        assert round(v, 6) == 0.693147

    def test_peo_orthogonal_negative(self):
        cfg = LossConfig(tau=1.0, lambda_h=0.0)
        v, _ = peo_loss([1, 0], [1, 0], [[0, 1]], cfg)
        assert round(v, 6) == 0.313262

    def test_fcl_weight(self):
        assert round(fcl_weight(0, 2, 1.0), 6) == 0.135335

    def test_fcl_sums_both_orders(self):
        v, _ = fcl_loss_records(pair_batch(1.0, 0, 2), LossConfig(tau_fcl=1.0))
        assert v == pytest.approx(2 * math.exp(-2))


class TestFcl:
    def test_identical_vectors(self):
        v, g = fcl_loss_records(pair_batch(0.0), LossConfig())
        assert v == 0 and not g.any()

    def test_weights_prefer_close_levels(self):
        ws = [fcl_weight(0, k, 0.7) for k in range(1, 5)]
        assert ws == sorted(ws, reverse=True) and len(set(ws)) == 4

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fcl_loss_records([rec("f", 0, 1.0), rec("f", 1, 1.0, 2.0)], LossConfig())

    @given(batches(), st.floats(0.1, 3))
    def test_matches_oracle(self, b, tau):
        e, fids, levels = b
        v, _ = fcl_loss(e, fids, levels, LossConfig(tau_fcl=tau))
        assert v == pytest.approx(oracle_fcl(e, fids, levels, tau), rel=1e-12, abs=1e-12)


class TestPcl:
    @pytest.mark.parametrize("d,variant,want", [
        (0.2, PCL_AS_WRITTEN, 0.0), (0.6, PCL_AS_WRITTEN, 0.2), (0.2, PCL_LOWER_BOUND, 0.2)])
    def test_examples(self, d, variant, want):
        cfg = LossConfig(beta=0.5, margin_m=0.1, pcl_variant=variant)
        v, _ = pcl_loss_records(pair_batch(d), cfg)
        assert v == pytest.approx(want, abs=1e-15)

    def test_default_is_lower_bound(self):
        assert LossConfig().pcl_variant == PCL_LOWER_BOUND

    @given(spacing=st.floats(0.0, 2.0))
    def test_zero_sets(self, spacing):
        # levels on a line, pair gap k at distance spacing * k
        recs = [rec("f", lv, spacing * lv, 0.0) for lv in range(4)]
        lower = LossConfig(beta=0.35, margin_m=0.05)
        upper = LossConfig(beta=0.35, margin_m=0.05, pcl_variant=PCL_AS_WRITTEN)
        lo_edge, hi_edge = 0.35 - 0.05 / 3, 0.35 - 0.05
        if min(abs(spacing - lo_edge), abs(spacing - hi_edge)) < 1e-9:
            return
        assert (pcl_loss_records(recs, lower)[0] == 0) == (spacing > lo_edge)
        assert (pcl_loss_records(recs, upper)[0] == 0) == (spacing < hi_edge)

    @given(batches(), st.sampled_from([PCL_AS_WRITTEN, PCL_LOWER_BOUND]))
    def test_matches_oracle(self, b, variant):
        e, fids, levels = b
        cfg = LossConfig(pcl_variant=variant)
        v, _ = pcl_loss(e, fids, levels, cfg)
        assert v == pytest.approx(oracle_pcl(e, fids, levels, cfg), rel=1e-12, abs=1e-12)


class TestVmp:
    def test_examples(self):
        assert vmp_loss(1.0, 2.0, 3.0, LossConfig(lam=0.5)) == 3.5
        assert vmp_loss(1.25, 2.0, 3.0, LossConfig(lam=0.0)) == 1.25

    def test_records_and_negative_lm(self):
        recs = pair_batch(0.1)
        cfg = LossConfig(lam=2.0)
        f, _ = fcl_loss_records(recs, cfg)
        p, _ = pcl_loss_records(recs, cfg)
        assert vmp_loss_records(0.5, recs, cfg) == pytest.approx(0.5 + 2.0 * (f + p))
        with pytest.raises(ValueError):
            vmp_loss_records(-1.0, recs, cfg)

    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 2), st.floats(0, 1))
    def test_monotone_in_each_term(self, lm, f, p, lam, bump):
        cfg = LossConfig(lam=lam)
        base = vmp_loss(lm, f, p, cfg)
        assert vmp_loss(lm + bump, f, p, cfg) >= base
        assert vmp_loss(lm, f + bump, p, cfg) >= base
        assert vmp_loss(lm, f, p + bump, cfg) >= base


class TestPeo:
    def test_rank_convention_and_ties(self):
        assert hard_negatives([0.1, 0.9, 0.9, 0.5], 3) == [1, 2, 3]

    def test_kappa_weights(self):
        cfg = LossConfig(tau=1.0, lambda_h=0.5)
        v, _ = peo_loss([1, 0], [1, 0], [[1, 0], [0, 1]], cfg)
        want = -math.log(math.e / (math.e + 1.5 * math.e + 2.0 * 1.0))
        assert v == pytest.approx(want, rel=1e-14)

    def test_hard_set_larger_than_pool(self):
        cfg = LossConfig(k_h=8, tau=0.5)
        v, (_, _, gc) = peo_loss([1, 0], [0, 1], [[1, 1], [-1, 0.5]], cfg)
        assert math.isfinite(v) and np.abs(gc).sum(1).all()

    def test_only_hard_negatives_get_gradient(self):
        cfg = LossConfig(k_h=1)
        _, (_, _, gc) = peo_loss([1, 0], [0, 1], [[1, 0.1], [-1, 0.2]], cfg)
        assert gc[0].any() and not gc[1].any()

    def test_zero_norm_and_empty(self):
        with pytest.raises(ValueError, match="zero-norm"):
            peo_loss([0, 0], [1, 0], [[1, 0]], LossConfig())
        with pytest.raises(ValueError, match="zero-norm"):
            peo_loss([1, 0], [1, 0], [[0, 0]], LossConfig())
        with pytest.raises(ValueError):
            peo_loss([1, 0], [1, 0], np.zeros((0, 2)), LossConfig())

    def test_positive_not_candidate(self):
        q, p = rec("a", 0, 1, 0), rec("a", 3, 1, 1)
        with pytest.raises(ValueError, match="positive"):
            peo_loss_records(q, p, [p], LossConfig())

    @given(arrays(float, 6, elements=st.floats(-1, 1)), st.floats(0, 1), st.floats(0, 1))
    def test_lambda_h_monotone(self, sims, lo, extra):
        q = np.array([1.0, 0.0])
        sims = np.clip(sims, -1, 1)
        cands = np.stack([sims, np.sqrt(1 - sims ** 2)], 1)
        base = LossConfig(lambda_h=lo)
        more = LossConfig(lambda_h=lo + extra)
        assert peo_loss(q, q, cands, more)[0] >= peo_loss(q, q, cands, base)[0]

    def test_margin_at_minimum(self):
        rng = np.random.default_rng(3)
        cfg = LossConfig(tau=0.1, lambda_h=0.5, k_h=4)
        q, p, c = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(6, 8))
        for _ in range(3000):
            _, (gq, gp, gc) = peo_loss(q, p, c, cfg)
            q, p, c = q - 0.05 * gq, p - 0.05 * gp, c - 0.05 * gc
        sp = cosine(q, p)
        sims = [cosine(q, x) for x in c]
        for rank, i in enumerate(hard_negatives(sims, cfg.k_h), start=1):
            assert sp > sims[i] + cfg.tau * math.log(1 + cfg.lambda_h * rank)
        assert sp > max(sims)


@given(batches(), st.sampled_from([PCL_AS_WRITTEN, PCL_LOWER_BOUND]))
def test_values_nonnegative_and_finite(b, variant):
    e, fids, levels = b
    cfg = LossConfig(pcl_variant=variant)
    for fn in (fcl_loss, pcl_loss):
        v, g = fn(e, fids, levels, cfg)
        assert v >= 0 and math.isfinite(v) and np.isfinite(g).all()


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    fids = [f for f in ("a", "b") for _ in LEVELS]
    levels = LEVELS * 2
    e = rng.normal(0, 0.3, (len(fids), 6))
    for variant in (PCL_AS_WRITTEN, PCL_LOWER_BOUND):
        cfg = LossConfig(pcl_variant=variant, tau_fcl=0.5)
        for fn in (fcl_loss, pcl_loss):
            g = fn(e, fids, levels, cfg)[1]
            assert relative_error(g, numeric_grad(lambda x: fn(x, fids, levels, cfg)[0], e)) < 1e-5
    q, p, c = rng.normal(size=6), rng.normal(size=6), rng.normal(size=(5, 6))
    _, (gq, gp, gc) = peo_loss(q, p, c, LossConfig())
    assert relative_error(gp, numeric_grad(lambda x: peo_loss(q, x, c, LossConfig())[0], p)) < 1e-5
    assert relative_error(gq, numeric_grad(lambda x: peo_loss(x, p, c, LossConfig())[0], q)) < 1e-5


def test_coincident_points_have_zero_subgradient():
    _, g = fcl_loss(np.ones((2, 3)), ["f", "f"], [0, 1], LossConfig())
    assert not g.any()


class TestConfig:
    def test_defaults(self):
        c = LossConfig()
        assert (c.beta, c.margin_m, c.lam, c.tau, c.lambda_h, c.k_h, c.alpha) == \
            (0.35, 0.05, 0.1, 0.07, 0.5, 8, 1.0)

    def test_mapping_keys(self):
        c = loss_config_from_mapping({"lambda": "0.2", "K_h": "3", "m": "0.1",
                                      "pcl_variant": PCL_AS_WRITTEN})
        assert (c.lam, c.k_h, c.margin_m, c.pcl_variant) == (0.2, 3, 0.1, PCL_AS_WRITTEN)

    @pytest.mark.parametrize("kw", [{"tau": 0}, {"lam": -1}, {"k_h": 0}, {"pcl_variant": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)
