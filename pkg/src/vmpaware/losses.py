"""
Contrastive objectives over function embeddings, with analytic gradients.

Every loss takes an ``(n, d)`` array of embeddings plus per-row function ids
and protection levels, and returns ``(value, grad)`` where ``grad`` has the
shape of the input.  The ``*_records`` wrappers accept
:class:`EmbeddingRecord` lists instead.

Distances are Euclidean; the PEO similarity is cosine.  ``d/de ||e - e'||``
is taken as zero when the two points coincide.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, fields

import numpy as np

PCL_AS_WRITTEN = "as-written"
PCL_LOWER_BOUND = "lower-bound"


@dataclass(frozen=True)
class EmbeddingRecord:
    function_id: str
    level: int
    vector: np.ndarray


@dataclass(frozen=True)
class LossConfig:
    tau_fcl: float = 0.25
    beta: float = 0.35
    margin_m: float = 0.05
    lam: float = 0.1
    tau: float = 0.07
    lambda_h: float = 0.5
    k_h: int = 8
    alpha: float = 1.0
    pcl_variant: str = PCL_LOWER_BOUND

    def __post_init__(self):
        for name in ("tau_fcl", "beta", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("margin_m", "lam", "lambda_h", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.k_h < 1:
            raise ValueError("k_h must be >= 1")
        if self.pcl_variant not in (PCL_AS_WRITTEN, PCL_LOWER_BOUND):
            raise ValueError(f"unknown pcl_variant {self.pcl_variant!r}")


# config-file key -> LossConfig field
CONFIG_KEYS = {
    "tau_fcl": "tau_fcl",
    "beta": "beta",
    "m": "margin_m",
    "margin_m": "margin_m",
    "lambda": "lam",
    "tau": "tau",
    "lambda_h": "lambda_h",
    "k_h": "k_h",
    "K_h": "k_h",
    "alpha": "alpha",
    "pcl_variant": "pcl_variant",
}


def loss_config_from_mapping(values: dict) -> LossConfig:
    kwargs = {}
    types = {f.name: f.type for f in fields(LossConfig)}
    for key, raw in values.items():
        name = CONFIG_KEYS[key]
        t = types[name]
        if t in ("int", int):
            kwargs[name] = int(raw)
        elif t in ("float", float):
            kwargs[name] = float(raw)
        else:
            kwargs[name] = str(raw)
    return LossConfig(**kwargs)


def _stack(records):
    if not records:
        raise ValueError("empty batch")
    d = len(records[0].vector)
    for r in records:
        if len(r.vector) != d:
            raise ValueError("dimension mismatch in batch")
    vecs = np.array([np.asarray(r.vector, dtype=float) for r in records])
    return vecs, [r.function_id for r in records], [int(r.level) for r in records]


def same_function_pairs(fids, levels):
    """Index pairs (i, j) of one function with levels[i] < levels[j]."""
    groups = defaultdict(list)
    for i, f in enumerate(fids):
        groups[f].append(i)
    ii, jj = [], []
    for idx in groups.values():
        for a in idx:
            for b in idx:
                if levels[a] < levels[b]:
                    ii.append(a)
                    jj.append(b)
    return np.array(ii, dtype=int), np.array(jj, dtype=int)


def _pair_dist(e, ii, jj):
    diff = e[ii] - e[jj]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[:, None], diff / safe[:, None], 0.0)
    return dist, unit


def _scatter(e, ii, jj, coef, unit):
    g = np.zeros_like(e)
    np.add.at(g, ii, coef[:, None] * unit)
    np.add.at(g, jj, -coef[:, None] * unit)
    return g


def fcl_weight(s, t, tau_fcl):
    return math.exp(-abs(s - t) / tau_fcl)


def fcl_loss(e, fids, levels, cfg: LossConfig, pairs=None):
    """Sum over functions and ordered level pairs s != t of w_st * ||e_s - e_t||.

    Each unordered pair appears twice, once per order.
    """
    e = np.asarray(e, dtype=float)
    ii, jj = pairs if pairs is not None else same_function_pairs(fids, levels)
    if len(ii) == 0:
        return 0.0, np.zeros_like(e)
    lv = np.asarray(levels, dtype=float)
    w = 2.0 * np.exp(-np.abs(lv[ii] - lv[jj]) / cfg.tau_fcl)
    dist, unit = _pair_dist(e, ii, jj)
    return float(np.dot(w, dist)), _scatter(e, ii, jj, w, unit)


def pcl_loss(e, fids, levels, cfg: LossConfig, pairs=None):
    """Hinge on s < t pairs against the target beta * (t - s).

    ``as-written``: max(0, d - beta (t-s) + m)    (penalizes large distances)
    ``lower-bound``: max(0, beta (t-s) - m - d)   (zero iff d >= beta (t-s) - m)
    """
    e = np.asarray(e, dtype=float)
    ii, jj = pairs if pairs is not None else same_function_pairs(fids, levels)
    if len(ii) == 0:
        return 0.0, np.zeros_like(e)
    lv = np.asarray(levels, dtype=float)
    target = cfg.beta * (lv[jj] - lv[ii])
    dist, unit = _pair_dist(e, ii, jj)
    if cfg.pcl_variant == PCL_AS_WRITTEN:
        arg = dist - target + cfg.margin_m
        sign = 1.0
    else:
        arg = target - cfg.margin_m - dist
        sign = -1.0
    active = arg > 0
    value = float(np.sum(arg[active]))
    coef = np.where(active, sign, 0.0)
    return value, _scatter(e, ii, jj, coef, unit)


def vmp_loss(lm_term, fcl_value, pcl_value, cfg: LossConfig):
    return lm_term + cfg.lam * (fcl_value + pcl_value)


def _unit(v):
    n = float(np.linalg.norm(v))
    if n == 0:
        raise ValueError("zero-norm vector: cosine similarity undefined")
    return v / n, n


def cosine(u, v):
    a, _ = _unit(np.asarray(u, dtype=float))
    b, _ = _unit(np.asarray(v, dtype=float))
    return float(a @ b)


def hard_negatives(sims, k_h):
    """Indices of the k_h most similar candidates, most similar first (stable)."""
    order = sorted(range(len(sims)), key=lambda i: -sims[i])
    return order[:k_h]


def peo_loss(q, pos, cands, cfg: LossConfig):
    """Hard-negative weighted InfoNCE for one query.

    Returns ``(value, (g_query, g_positive, g_candidates))``.  Candidates
    outside the hard set get zero gradient.
    """
    q = np.asarray(q, dtype=float)
    pos = np.asarray(pos, dtype=float)
    cands = np.atleast_2d(np.asarray(cands, dtype=float))
    if len(cands) == 0:
        raise ValueError("need at least one candidate")
    qu, qn = _unit(q)
    pu, pn = _unit(pos)
    norms = np.linalg.norm(cands, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector: cosine similarity undefined")
    cu = cands / norms[:, None]

    s_pos = float(qu @ pu)
    s_neg = cu @ qu
    hard = np.array(hard_negatives(list(s_neg), cfg.k_h), dtype=int)
    ranks = np.arange(1, len(hard) + 1)
    log_kappa = np.log1p(cfg.lambda_h * ranks)

    logits = np.concatenate([[s_pos / cfg.tau], s_neg[hard] / cfg.tau + log_kappa])
    top = logits.max()
    lse = top + math.log(float(np.sum(np.exp(logits - top))))
    value = lse - logits[0]
    p = np.exp(logits - lse)

    # dL/dsim for the positive and each hard negative
    d_pos = (p[0] - 1.0) / cfg.tau
    d_neg = p[1:] / cfg.tau

    def dcos_da(au, an, bu):
        return (bu - (au @ bu) * au) / an

    g_q = d_pos * dcos_da(qu, qn, pu)
    g_q = g_q + (d_neg[:, None] * (cu[hard] - (cu[hard] @ qu)[:, None] * qu[None, :])).sum(0) / qn
    g_pos = d_pos * dcos_da(pu, pn, qu)
    g_c = np.zeros_like(cands)
    hu = cu[hard]
    g_c[hard] = d_neg[:, None] * (qu[None, :] - (hu @ qu)[:, None] * hu) / norms[hard][:, None]
    return float(value), (g_q, g_pos, g_c)


def fcl_loss_records(records, cfg: LossConfig):
    e, fids, levels = _stack(records)
    return fcl_loss(e, fids, levels, cfg)


def pcl_loss_records(records, cfg: LossConfig):
    e, fids, levels = _stack(records)
    return pcl_loss(e, fids, levels, cfg)


def vmp_loss_records(lm_term, records, cfg: LossConfig):
    if lm_term < 0:
        raise ValueError("lm_term must be non-negative")
    f, _ = fcl_loss_records(records, cfg)
    p, _ = pcl_loss_records(records, cfg)
    return vmp_loss(lm_term, f, p, cfg)


def peo_loss_records(query: EmbeddingRecord, positive: EmbeddingRecord, candidates, cfg):
    if any(c is positive for c in candidates):
        raise ValueError("positive must not be among the candidates")
    _, _, _ = _stack([query, positive, *candidates])
    return peo_loss(query.vector, positive.vector, [c.vector for c in candidates], cfg)
