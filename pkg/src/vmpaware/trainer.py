"""
Small embedding model trained with the level-aware contrastive objective and
the retrieval (PEO) objective.

A VM function embeds as the mean over instructions of
``marker_vector + mean(token vectors of that instruction)``; source text
embeds as the mean of its token vectors.  Both are linear in the token
table, so each input is cached as a weight row over the vocabulary.

The language-model term predicts every regular token of an input from that
input's embedding through the shared token table plus a per-level unigram
bias: ``p(y | f) = softmax_y(b[level] + E[y] . e_f)``.  The bias starts at the
corpus log-frequencies, so the embeddings only have to explain what is
specific to each function.

Optimization is plain gradient descent; each step is halved until the batch
objective decreases enough and the update stays within a fixed fraction of
the parameter norm.
"""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged, VmpError
from .hier_mask import MARKER, split_tokens, tokenize_vm
from .isa import NATIVE_ARITY, VM_ARITY, VM_FLOAT_OPCODES, VmProgram, parse_vm
from .losses import EmbeddingRecord, LossConfig, fcl_loss, pcl_loss, peo_loss, same_function_pairs
from .virtualizer import ProtectionLevel

log = logging.getLogger(__name__)

UNK = "<unk>"
IMM_CLASS = "<imm>"
CHECKPOINT_MAGIC = "vmpaware-checkpoint"
N_LEVELS = 5  # source (-1) and L0..L3; bias row = level + 1
CHECKPOINT_VERSION = 1

_VT = re.compile(r"^%vt\d+$")
_VR = re.compile(r"^%vr[0-7]$")
_HANDLER = re.compile(r"^@handler_([a-z_]+?)\d+$")
_SYM = re.compile(r"^@sym\d+$")
_INT = re.compile(r"^-?\d+$")


def vocab_key(tok: str) -> str:
    """Collapse run-specific spellings (temporaries, label ordinals) to classes."""
    if _INT.match(tok):
        return tok if -128 <= int(tok) <= 255 else IMM_CLASS
    if tok.startswith("%v"):
        if _VT.match(tok):
            return "%vt"
        return tok if _VR.match(tok) else "%v*"
    if tok.startswith("@"):
        m = _HANDLER.match(tok)
        if m:
            return f"@handler_{m.group(1)}"
        return "@sym" if _SYM.match(tok) else "@label"
    return tok


def token_keys(tokens) -> list:
    """Vocabulary keys for a token sequence; an integer right after ``[`` is a
    memory cell and keys as ``mem<i>``, apart from immediates."""
    keys = []
    prev = None
    for t in tokens:
        if prev == "[" and _INT.match(t):
            i = int(t)
            keys.append(f"mem{i}" if 0 <= i < 256 else "<mem>")
        else:
            keys.append(vocab_key(t))
        prev = t
    return keys


def base_vocab():
    kinds = sorted(set(NATIVE_ARITY) | {"load", "store", "mov"})
    toks = [UNK, IMM_CLASS, "<mem>", "%vt", "%v*", "@sym", "@label", ",", "[", "]", ":"]
    toks += sorted(set(VM_ARITY) | VM_FLOAT_OPCODES)
    toks += [f"%vr{i}" for i in range(8)]
    toks += [f"@handler_{k}" for k in kinds]
    return toks


def build_vocab(texts_and_levels):
    seen = set()
    for text, level in texts_and_levels:
        seen.update(token_keys(_raw_tokens(text, level)))
    base = base_vocab()
    return base + sorted(seen - set(base))


def idf_scale(vocab, docs, power):
    """Per-row init scale (idf / max idf) ** power over tokenized documents.

    Tokens shared by every input start near zero, so rare operand tokens
    dominate early embeddings.  Unseen rows get the maximum scale.
    """
    index = {t: i for i, t in enumerate(vocab)}
    df = np.zeros(len(vocab))
    for doc in docs:
        for t in set(token_keys(doc)):
            if t in index:
                df[index[t]] += 1
    n = max(len(docs), 1)
    idf = np.log((n + 1) / (df + 1))
    top = idf.max()
    return (idf / top) ** power if top > 0 else np.ones(len(vocab))


def _raw_tokens(text, level):
    if int(level) >= 0:
        return [t.text for t in tokenize_vm(parse_vm(text)).tokens if t.kind != MARKER]
    return split_tokens(text)


@dataclass
class EmbedModel:
    vocab: list
    token_table: np.ndarray
    marker_vector: np.ndarray
    lm_bias: np.ndarray
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")

    @property
    def dim(self) -> int:
        return self.token_table.shape[1]

    @classmethod
    def create(cls, vocab, dim=32, seed=0, row_scale=None):
        """Gaussian token rows (optionally scaled per row); zero marker and bias."""
        if dim < 8:
            raise ValueError("embedding width must be >= 8")
        rng = np.random.default_rng(seed)
        table = rng.normal(0.0, 1.0 / math.sqrt(dim), (len(vocab), dim))
        if row_scale is not None:
            table *= np.asarray(row_scale, dtype=float)[:, None]
        return cls(list(vocab), table, np.zeros(dim), np.zeros((N_LEVELS, len(vocab))))

    def ids(self, tokens):
        unk = self.index.get(UNK, 0)
        return [self.index.get(k, unk) for k in token_keys(tokens)]

    def params(self):
        return {"E": self.token_table, "m": self.marker_vector, "b": self.lm_bias}

    def with_params(self, p):
        return EmbedModel(self.vocab, p["E"], p["m"], p["b"])


@dataclass
class Features:
    """Cached linear view of one input: embedding = is_vm * m + weights @ E.

    ``counts`` holds the vocabulary histogram of its regular tokens.
    """

    weights: np.ndarray
    is_vm: bool
    counts: np.ndarray


def featurize(model: EmbedModel, f, level) -> Features:
    level = int(level)
    V = len(model.vocab)
    w = np.zeros(V)
    if level >= 0:
        prog = parse_vm(f) if isinstance(f, str) else f
        tf = tokenize_vm(prog)
        per_instr = defaultdict(list)
        for t in tf.tokens:
            if t.kind != MARKER:
                per_instr[t.instr].append(t.text)
        T = tf.instr_count
        if T == 0:
            raise VmpError("empty program: no [VINST] markers to average")
        seq = []
        for t in range(1, T + 1):
            ids = model.ids(per_instr[t])
            seq += ids
            if ids:
                np.add.at(w, ids, 1.0 / (T * len(ids)))
        is_vm = True
    else:
        seq = model.ids(split_tokens(f))
        if not seq:
            raise VmpError("empty source: nothing to average")
        np.add.at(w, seq, 1.0 / len(seq))
        is_vm = False
    return Features(w, is_vm, np.bincount(seq, minlength=V).astype(float))


def embed_function(model: EmbedModel, f, level, function_id=None) -> EmbeddingRecord:
    feat = featurize(model, f, level)
    vec = feat.weights @ model.token_table
    if feat.is_vm:
        vec = vec + model.marker_vector
    return EmbeddingRecord(function_id, int(level), vec)


# ---------------------------------------------------------------------------
# Objectives on parameter dicts
# ---------------------------------------------------------------------------


def _embed_rows(p, W, vm):
    return W @ p["E"] + vm[:, None] * p["m"]


def lm_value_grad(p, W, vm, C, levels, need_grad=True):
    """Per-token cross-entropy of ``p(y | f) = softmax(b[level] + E e_f)``.

    Rows of ``W``/``vm`` describe the inputs, rows of ``C`` their token counts.
    """
    rows = np.asarray(levels, dtype=np.int64) + 1
    E, b = p["E"], p["b"]
    N = float(C.sum())
    if N == 0:
        zero = {k: np.zeros_like(v) for k, v in p.items()}
        return 0.0, (zero if need_grad else None)
    e = _embed_rows(p, W, vm)
    logits = e @ E.T + b[rows]
    top = logits.max(1, keepdims=True)
    ex = np.exp(logits - top)
    z = ex.sum(1, keepdims=True)
    lse = (top + np.log(z))[:, 0]
    n = C.sum(1)
    value = float((n @ lse - np.sum(C * logits)) / N)
    if not need_grad:
        return value, None
    d = (n[:, None] * (ex / z) - C) / N
    ge = d @ E
    gb = np.zeros_like(b)
    np.add.at(gb, rows, d)
    return value, {"E": d.T @ e + W.T @ ge, "m": ge[vm].sum(0), "b": gb}


def lm_surrogate(model: EmbedModel, inputs) -> float:
    """Mean per-token cross-entropy over ``(f, level)`` inputs.

    Each regular token of f is predicted from f's own embedding through the
    shared token table plus a per-level unigram bias; positions are
    exchangeable.
    """
    feats = [featurize(model, f, lv) for f, lv in inputs]
    W = np.array([x.weights for x in feats])
    vm = np.array([x.is_vm for x in feats], dtype=bool)
    C = np.array([x.counts for x in feats])
    levels = [int(lv) for _, lv in inputs]
    return lm_value_grad(model.params(), W, vm, C, levels, need_grad=False)[0]


def unigram_bias(C, levels, smoothing=0.5):
    """Per-level smoothed log unigram frequencies, shape (N_LEVELS, V)."""
    rows = np.asarray(levels, dtype=np.int64) + 1
    tot = np.zeros((N_LEVELS, C.shape[1]))
    np.add.at(tot, rows, C)
    tot += smoothing
    return np.log(tot / tot.sum(1, keepdims=True))


def _backprop_embeddings(p, W, vm, G):
    return {"E": W.T @ G, "m": G[vm].sum(0), "b": np.zeros_like(p["b"])}


def _add(a, b, scale=1.0):
    return {k: a[k] + scale * b[k] for k in a}


@dataclass
class Batch:
    W: np.ndarray
    vm: np.ndarray
    fids: list
    levels: list
    counts: np.ndarray
    pairs: tuple = None


def vmp_objective(p, batch: Batch, cfg: LossConfig, need_grad=True):
    lm, g = lm_value_grad(p, batch.W, batch.vm, batch.counts, batch.levels, need_grad)
    parts = {"lm": lm, "fcl": 0.0, "pcl": 0.0}
    total = lm
    if cfg.lam > 0:
        e = _embed_rows(p, batch.W, batch.vm)
        fv, fg = fcl_loss(e, batch.fids, batch.levels, cfg, batch.pairs)
        pv, pg = pcl_loss(e, batch.fids, batch.levels, cfg, batch.pairs)
        parts["fcl"], parts["pcl"] = cfg.lam * fv, cfg.lam * pv
        total += cfg.lam * (fv + pv)
        if need_grad:
            g = _add(g, _backprop_embeddings(p, batch.W, batch.vm, cfg.lam * (fg + pg)))
    return total, g, parts


def peo_objective(p, batch: Batch, queries, cfg: LossConfig, need_grad=True):
    """alpha * sum of PEO losses; queries are (q_row, pos_row, cand_rows)."""
    e = _embed_rows(p, batch.W, batch.vm)
    G = np.zeros_like(e)
    total = 0.0
    for q, pos, cands in queries:
        v, (gq, gp, gc) = peo_loss(e[q], e[pos], e[cands], cfg)
        total += v
        G[q] += gq
        G[pos] += gp
        np.add.at(G, cands, gc)
    g = None
    if need_grad:
        g = _backprop_embeddings(p, batch.W, batch.vm, cfg.alpha * G)
        # the marker is a shared offset of every VM embedding; letting cosine
        # steps move it collapses all similarities toward 1
        g["m"] = np.zeros_like(g["m"])
    return cfg.alpha * total, g, {"peo": cfg.alpha * total}


def gd_step(p, objective, lr, max_halvings=30, armijo=1e-4, max_ratio=None):
    """One backtracking step.  Returns (new_params, value_before, value_after).

    The step is halved until the batch value drops by at least
    ``armijo * step * ||g||^2`` and, when ``max_ratio`` is set, the update is
    no longer than ``max_ratio * ||p||``.  If no step qualifies the parameters
    stay put.
    """
    v0, g, _ = objective(p, True)
    if not math.isfinite(v0):
        raise TrainingDiverged(f"non-finite loss {v0}")
    gg = sum(float(np.sum(x * x)) for x in g.values())
    step = lr
    if max_ratio is not None and gg > 0:
        pn = math.sqrt(sum(float(np.sum(x * x)) for x in p.values()))
        while step * math.sqrt(gg) > max_ratio * pn and max_halvings > 0:
            step *= 0.5
            max_halvings -= 1
    for _ in range(max_halvings):
        trial = {k: p[k] - step * g[k] for k in p}
        v1 = objective(trial, False)[0]
        if math.isfinite(v1) and v1 <= v0 - armijo * step * gg:
            return trial, v0, v1
        step *= 0.5
    return p, v0, v0


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRun:
    seed: int = 0
    dim: int = 32
    pretrain_epochs: int = 20
    finetune_epochs: int = 5
    learning_rate: float = 1.0
    batch_functions: int = 16
    levels: tuple = (-1, 0, 1, 2, 3)
    max_halvings: int = 30
    idf_power: float = 8.0
    max_step_ratio: float = 0.01
    init_scale: float = 4.0


RUN_KEYS = {
    "seed": int,
    "dim": int,
    "pretrain_epochs": int,
    "finetune_epochs": int,
    "learning_rate": float,
    "batch_functions": int,
    "max_halvings": int,
    "idf_power": float,
    "max_step_ratio": float,
    "init_scale": float,
}


def group_dataset(records, levels):
    """(function key) -> {level: text}; the source becomes level -1."""
    wanted = {int(l) for l in levels}
    groups = {}
    for r in records:
        key = f"{r['function_id']}/{r['opt_level']}"
        g = groups.setdefault(key, {})
        lv = int(ProtectionLevel.parse(r["protection_level"]))
        if lv in wanted:
            g[lv] = r["normalized_vm_text"]
        if -1 in wanted:
            g[-1] = r["source_text"]
    return groups


def embed_records(model: EmbedModel, records, levels=(-1, 0, 1, 2, 3)) -> list:
    """EmbeddingRecords for every (function, opt level) key and requested level."""
    out = []
    for key, g in sorted(group_dataset(records, levels).items()):
        for lv in sorted(g):
            out.append(embed_function(model, g[lv], lv, key))
    return out


class _Corpus:
    def __init__(self, model, groups):
        self.keys = sorted(groups)
        self.rows = {}
        feats, fids, levels = [], [], []
        for key in self.keys:
            for lv in sorted(groups[key]):
                self.rows[(key, lv)] = len(feats)
                feats.append(featurize(model, groups[key][lv], lv))
                fids.append(key)
                levels.append(lv)
        self.feats = feats
        self.fids = fids
        self.levels = levels
        self.W = np.array([f.weights for f in feats])
        self.vm = np.array([f.is_vm for f in feats], dtype=bool)
        self.C = np.array([f.counts for f in feats])

    def batch(self, keys):
        idx = [self.rows[(k, lv)] for k in keys for lv in sorted(
            l for (kk, l) in self.rows if kk == k)]
        fids = [self.fids[i] for i in idx]
        levels = [self.levels[i] for i in idx]
        b = Batch(
            self.W[idx],
            self.vm[idx],
            fids,
            levels,
            self.C[idx],
        )
        b.pairs = same_function_pairs(fids, levels)
        return b, idx


def _peo_queries(batch: Batch, rng):
    by_key = defaultdict(dict)
    for row, (k, lv) in enumerate(zip(batch.fids, batch.levels)):
        if lv >= 0:
            by_key[k][lv] = row
    keys = list(by_key)
    queries = []
    for k in keys:
        levels = sorted(by_key[k])
        if len(levels) < 2:
            continue
        s, t = (int(x) for x in rng.choice(levels, size=2, replace=False))
        cands = [by_key[o][t] for o in keys if o != k and t in by_key[o]]
        if cands:
            queries.append((by_key[k][s], by_key[k][t], np.array(cands)))
    return queries


@dataclass
class TrainResult:
    model: EmbedModel
    trace: list


def train(records, cfg: LossConfig, run: TrainRun, on_step=None) -> TrainResult:
    groups = group_dataset(records, run.levels)
    multi = [k for k, g in groups.items() if len(g) >= 2]
    if len(multi) < cfg.k_h + 1:
        raise VmpError(
            f"need >= {cfg.k_h + 1} functions with two or more levels, got {len(multi)}"
        )
    groups = {k: groups[k] for k in multi}
    texts = [(t, lv) for g in groups.values() for lv, t in g.items()]
    vocab = build_vocab(texts)
    docs = [_raw_tokens(t, lv) for t, lv in texts]
    model = EmbedModel.create(vocab, run.dim, run.seed,
                              run.init_scale * idf_scale(vocab, docs, run.idf_power))
    corpus = _Corpus(model, groups)
    model.lm_bias[:] = unigram_bias(corpus.C, corpus.levels)
    rng = np.random.default_rng(run.seed + 1)
    p = model.params()
    trace = []

    for stage, epochs in (("pretrain", run.pretrain_epochs), ("finetune", run.finetune_epochs)):
        for epoch in range(epochs):
            order = [corpus.keys[i] for i in rng.permutation(len(corpus.keys))]
            sums = defaultdict(float)
            counts = defaultdict(int)
            for bi in range(0, len(order), run.batch_functions):
                batch, _ = corpus.batch(order[bi:bi + run.batch_functions])
                use_peo = stage == "pretrain" and (bi // run.batch_functions) % 2 == 1
                if use_peo:
                    if cfg.alpha == 0:
                        continue
                    queries = _peo_queries(batch, rng)
                    if not queries:
                        continue

                    def objective(params, need_grad, batch=batch, queries=queries):
                        return peo_objective(params, batch, queries, cfg, need_grad)
                else:
                    def objective(params, need_grad, batch=batch):
                        return vmp_objective(params, batch, cfg, need_grad)

                p, before, after = gd_step(p, objective, run.learning_rate, run.max_halvings,
                                           max_ratio=run.max_step_ratio)
                parts = objective(p, False)[2]
                for k, v in parts.items():
                    sums[k] += v
                    counts[k] += 1
                if on_step is not None:
                    on_step(stage, use_peo, before, after)
            row = {"stage": stage, "epoch": epoch}
            for k in ("lm", "fcl", "pcl", "peo"):
                row[k] = sums[k] / counts[k] if counts[k] else 0.0
            for v in row.values():
                if isinstance(v, float) and not math.isfinite(v):
                    raise TrainingDiverged(f"non-finite loss in {stage} epoch {epoch}: {row}")
            log.debug("%s", row)
            trace.append(row)
    return TrainResult(model.with_params(p), trace)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _row(v):
    return " ".join(repr(float(x)) for x in v)


def dumps_checkpoint(model: EmbedModel) -> str:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"dim {model.dim} vocab {len(model.vocab)}"]
    lines += model.vocab
    lines.append("marker " + _row(model.marker_vector))
    lines += ["bias " + _row(r) for r in model.lm_bias]
    lines += [_row(r) for r in model.token_table]
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> EmbedModel:
    lines = text.splitlines()
    try:
        magic = lines[0].split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC or int(magic[1]) != CHECKPOINT_VERSION:
            raise VmpError("not a vmpaware checkpoint (bad header)")
        _, dim, _, n = lines[1].split()
        dim, n = int(dim), int(n)
        vocab = lines[2:2 + n]
        pos = 2 + n
        marker = np.array([float(x) for x in lines[pos].split()[1:]])
        bias = np.array([[float(x) for x in l.split()[1:]] for l in lines[pos + 1:pos + 1 + N_LEVELS]])
        pos += 1 + N_LEVELS
        table = np.array([[float(x) for x in l.split()] for l in lines[pos:pos + n]])
    except (IndexError, ValueError) as exc:
        raise VmpError(f"malformed checkpoint: {exc}") from None
    if (table.shape != (n, dim) or marker.shape != (dim,) or bias.shape != (N_LEVELS, n)
            or len(lines) != pos + n):
        raise VmpError("checkpoint shape mismatch")
    return EmbedModel(vocab, table, marker, bias)


def save_checkpoint(model: EmbedModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_checkpoint(model))


def load_checkpoint(path) -> EmbedModel:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
