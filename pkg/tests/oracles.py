"""Brute-force reference implementations of the retrieval and geometry metrics."""

import math
from fractions import Fraction


def exact_cos_key(q, c):
    """Sortable exact stand-in for cos(q, c): sign(q.c) * (q.c)^2 / |c|^2."""
    dot = sum(a * b for a, b in zip(q, c))
    return Fraction(dot * abs(dot), sum(x * x for x in c))


def oracle_rank(q, pos_idx, pool):
    keys = [exact_cos_key(q, c) for c in pool]
    s = keys[pos_idx]
    return 1 + sum(k > s for k in keys) + sum(k == s for k in keys[:pos_idx])


def dist(a, b):
    return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)))


def oracle_silhouette(points, labels):
    scores = []
    for i, p in enumerate(points):
        own = [dist(p, points[j]) for j in range(len(points)) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = math.fsum(own) / len(own)
        b = min(
            math.fsum(dist(p, points[j]) for j in range(len(points)) if labels[j] == g)
            / labels.count(g)
            for g in set(labels) - {labels[i]}
        )
        scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return math.fsum(scores) / len(scores)


def oracle_clusters(points, labels):
    names = list(dict.fromkeys(labels))
    intra = [dist(points[i], points[j]) for i in range(len(points)) for j in range(i + 1, len(points))
             if labels[i] == labels[j]]
    cents = []
    for g in names:
        members = [p for p, l in zip(points, labels) if l == g]
        cents.append([math.fsum(col) / len(members) for col in zip(*members)])
    inter = [dist(cents[a], cents[b]) for a in range(len(names)) for b in range(a + 1, len(names))]
    return (math.fsum(intra) / len(intra) if intra else 0.0), math.fsum(inter) / len(inter)


def integer_vector(rng, d=3):
    while True:
        v = [rng.randint(-3, 3) for _ in range(d)]
        if any(v):
            return v


def integer_pool(rng, n):
    return [integer_vector(rng) for _ in range(n)]
