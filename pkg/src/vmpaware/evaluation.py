"""
Retrieval and embedding-geometry metrics.

Retrieval ranks candidates by cosine similarity to the query.  Ties are
broken by candidate order: an earlier candidate ranks ahead.  Ranking uses a
squared form of the cosine so that exact ties stay exact.

Geometry uses Euclidean distance.  Sums go through :func:`math.fsum` and each
mean is one float division, so results do not depend on summation order.
"""

from __future__ import annotations

import math
import random
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .losses import EmbeddingRecord


class MetricError(ValueError):
    pass


def _rank_keys(query, cands):
    """Order-equivalent to cosine for a fixed query: sign(q.c) (q.c)^2 / |c|^2.

    Equal cosines give equal keys whenever the dot products are exact, which
    a direct cosine does not guarantee.
    """
    q = np.asarray(query, dtype=float)
    c = np.asarray(cands, dtype=float)
    cc = np.einsum("ij,ij->i", c, c)
    if not q.any() or np.any(cc == 0):
        raise MetricError("zero-norm embedding: cosine similarity undefined")
    dot = c @ q
    return dot * np.abs(dot) / cc


def positive_rank(query: EmbeddingRecord, positive_id, pool) -> int:
    """1-based rank of the unique pool member whose id is ``positive_id``."""
    hits = [i for i, c in enumerate(pool) if c.function_id == positive_id]
    if len(hits) != 1:
        raise MetricError(
            f"pool must contain exactly one candidate with id {positive_id!r}, found {len(hits)}"
        )
    p = hits[0]
    sims = _rank_keys(query.vector, [c.vector for c in pool])
    s = sims[p]
    return 1 + int(np.sum(sims > s)) + int(np.sum(sims[:p] == s))


def ranks(queries, pools) -> list:
    if len(queries) != len(pools):
        raise MetricError("one pool per query required")
    if not queries:
        raise MetricError("no queries")
    return [positive_rank(q, pid, pool) for (q, pid), pool in zip(queries, pools)]


def recall_at_k(queries, pools, k: int) -> float:
    if k < 1:
        raise MetricError("k must be >= 1")
    r = ranks(queries, pools)
    return sum(x <= k for x in r) / len(r)


def mrr(queries, pools) -> float:
    r = ranks(queries, pools)
    return float(sum(Fraction(1, x) for x in r) / len(r))


def _mean(xs) -> float:
    return math.fsum(xs) / len(xs)


def _distances(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _by_group(records):
    groups = defaultdict(list)
    for i, r in enumerate(records):
        groups[r.function_id].append(i)
    return groups


def silhouette(records) -> float:
    """Mean silhouette over points, grouped by ``function_id``.

    A point in a singleton group scores 0; a point with a = b = 0 scores 0.
    """
    groups = _by_group(records)
    if len(groups) < 2:
        raise MetricError("silhouette needs at least two groups")
    x = np.array([np.asarray(r.vector, dtype=float) for r in records])
    dist = _distances(x)
    label = [r.function_id for r in records]
    scores = []
    for i in range(len(records)):
        own = [j for j in groups[label[i]] if j != i]
        if not own:
            scores.append(0.0)
            continue
        a = _mean(dist[i, own])
        b = min(_mean(dist[i, idx]) for g, idx in groups.items() if g != label[i])
        top = max(a, b)
        scores.append(0.0 if top == 0 else (b - a) / top)
    return _mean(scores)


def cluster_distances(records):
    """(mean within-group pairwise distance, mean distance between group centroids).

    The within-group mean pools every unordered same-group pair; it is 0 when
    all groups are singletons.
    """
    if not records:
        raise MetricError("empty record set")
    groups = _by_group(records)
    if len(groups) < 2:
        raise MetricError("inter-cluster distance needs at least two groups")
    x = np.array([np.asarray(r.vector, dtype=float) for r in records])
    dist = _distances(x)
    intra = [dist[i, j] for idx in groups.values() for a, i in enumerate(idx) for j in idx[a + 1:]]
    names = list(groups)
    cent = np.array([[math.fsum(col) / len(groups[g]) for col in x[groups[g]].T] for g in names])
    inter = [math.sqrt(math.fsum((cent[a] - cent[b]) ** 2))
             for a in range(len(names)) for b in range(a + 1, len(names))]
    return (_mean(intra) if intra else 0.0), _mean(inter)


@dataclass(frozen=True)
class PairStats:
    count: int
    mean: float
    std: float
    violation_rate: float


def _pair_distances(records):
    by_fn = defaultdict(dict)
    for r in records:
        by_fn[r.function_id][int(r.level)] = np.asarray(r.vector, dtype=float)
    out = defaultdict(list)
    for levels in by_fn.values():
        ls = sorted(levels)
        for a, s in enumerate(ls):
            for t in ls[a + 1:]:
                out[(s, t)].append(float(np.linalg.norm(levels[s] - levels[t])))
    return out


def monotonicity_report(records, beta: float, m: float) -> dict:
    """Per level pair s < t: distance mean/std and the rate of d < beta (t-s) - m."""
    report = {}
    for (s, t), d in sorted(_pair_distances(records).items()):
        mu = _mean(d)
        std = math.sqrt(_mean([(v - mu) ** 2 for v in d]))
        bound = beta * (t - s) - m
        report[(s, t)] = PairStats(len(d), mu, std, sum(v < bound for v in d) / len(d))
    return report


def violation_rate(records, beta: float, m: float) -> float:
    d = _pair_distances(records)
    total = sum(len(v) for v in d.values())
    if total == 0:
        raise MetricError("no same-function level pairs")
    bad = sum(v < beta * (t - s) - m for (s, t), vs in d.items() for v in vs)
    return bad / total


def mean_distance_by_gap(records) -> dict:
    """level difference t - s -> mean distance over all pairs with that gap."""
    by_gap = defaultdict(list)
    for (s, t), d in _pair_distances(records).items():
        by_gap[t - s] += d
    return {g: _mean(v) for g, v in sorted(by_gap.items())}


# ---------------------------------------------------------------------------
# Retrieval pools
# ---------------------------------------------------------------------------


def build_pools(records, k: int, query_levels=(0, 1), candidate_level=3, seed=0):
    """Each query-level embedding against its function's candidate-level
    embedding plus k-1 other functions' candidate-level embeddings."""
    cands = {r.function_id: r for r in records if int(r.level) == candidate_level}
    ids = sorted(cands)
    if len(ids) < k:
        raise MetricError(f"pool size {k} exceeds {len(ids)} candidate functions")
    rng = random.Random(seed)
    queries, pools = [], []
    for r in sorted(records, key=lambda r: (r.function_id, int(r.level))):
        if int(r.level) not in query_levels or r.function_id not in cands:
            continue
        others = rng.sample([i for i in ids if i != r.function_id], k - 1)
        pool = [cands[i] for i in others] + [cands[r.function_id]]
        rng.shuffle(pool)
        queries.append((r, r.function_id))
        pools.append(pool)
    return queries, pools


def retrieval_report(records, ks=(50, 100, 200, 500), query_levels=(0, 1), candidate_level=3,
                     seed=0):
    rows = []
    for k in ks:
        q, p = build_pools(records, k, query_levels, candidate_level, seed)
        rows.append(("recall@1", f"K={k}", recall_at_k(q, p, 1)))
        rows.append(("mrr", f"K={k}", mrr(q, p)))
    return rows


def format_report(rows) -> str:
    return "".join(f"{metric}\t{setting}\t{value!r}\n" for metric, setting, value in rows)


def parse_report(text: str):
    rows = []
    for line in text.splitlines():
        if line.strip():
            metric, setting, value = line.split("\t")
            rows.append((metric, setting, float(value)))
    return rows
