"""
Self-check suites behind ``vmpaware check`` and the acceptance tests.

Each suite returns a :class:`CheckResult`; ``ok`` is False on any failure.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .dataset import LOOP, STRAIGHTLINE, derive_seed, gen_program, random_state
from .hier_mask import TokenizedFunction, build_hier_mask, expressivity_check
from .isa import exec_native, exec_vm, lift_state, native_image
from .losses import PCL_AS_WRITTEN, PCL_LOWER_BOUND, LossConfig, fcl_loss, pcl_loss, peo_loss
from .normalizer import normalize
from .virtualizer import VM_LEVELS, virtualize


@dataclass
class CheckResult:
    name: str
    checked: int = 0
    failures: list = field(default_factory=list)
    worst: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.ok else f"FAILED ({len(self.failures)})"
        extra = f", worst {self.worst:.3e}" if self.worst else ""
        return f"{self.name}: {status}, {self.checked} checked{extra}"


# ---------------------------------------------------------------------------
# Interpreter equivalence
# ---------------------------------------------------------------------------


def semantic_check(n_programs=1000, n_states=10, seed=0, levels=VM_LEVELS) -> CheckResult:
    """Native vs virtualized (and normalized) execution on random states."""
    res = CheckResult("semantics")
    for idx in range(n_programs):
        pseed = derive_seed(seed, "check-program", idx)
        native = gen_program(pseed, LOOP if idx % 2 else STRAIGHTLINE)[1]
        rng = random.Random(derive_seed(seed, "check-states", idx))
        states = [random_state(rng) for _ in range(n_states)]
        want = [native_image(exec_native(native, st)) for st in states]
        for lv in levels:
            vm = virtualize(native, lv, derive_seed(seed, "check-poly", idx, int(lv)))
            for variant, prog in (("raw", vm), ("normalized", normalize(vm))):
                for k, st in enumerate(states):
                    res.checked += 1
                    got = native_image(exec_vm(prog, lift_state(st)), vm=True)
                    if got != want[k]:
                        res.failures.append((idx, lv.name, variant, k))
    return res


# ---------------------------------------------------------------------------
# Finite-difference gradient audit
# ---------------------------------------------------------------------------


def numeric_grad(fn, x, h=1e-5):
    """Central differences of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _random_batch(rng, d, n_functions=3, levels=(-1, 0, 1, 2, 3)):
    fids = [f"f{i}" for i in range(n_functions) for _ in levels]
    lv = [l for _ in range(n_functions) for l in levels]
    scale = rng.uniform(0.02, 0.3)
    return rng.normal(0.0, scale, (len(fids), d)), fids, lv


def gradient_check(n_batches=100, dim=32, seed=0, tol=1e-5) -> CheckResult:
    """Analytic vs central-difference gradients for FCL, both PCL variants and PEO."""
    res = CheckResult("gradients")
    rng = np.random.default_rng(seed)
    for b in range(n_batches):
        cfg = LossConfig(tau_fcl=rng.uniform(0.25, 2.0), beta=rng.uniform(0.1, 0.5),
                         margin_m=rng.uniform(0.0, 0.1), tau=rng.uniform(0.05, 0.5),
                         lambda_h=rng.uniform(0.0, 1.0), k_h=int(rng.integers(1, 9)))
        e, fids, lv = _random_batch(rng, dim)
        cases = [("fcl", lambda x, c=cfg: fcl_loss(x, fids, lv, c))]
        for variant in (PCL_LOWER_BOUND, PCL_AS_WRITTEN):
            vc = LossConfig(**{**cfg.__dict__, "pcl_variant": variant})
            cases.append((f"pcl/{variant}", lambda x, c=vc: pcl_loss(x, fids, lv, c)))
        for name, fn in cases:
            _, g = fn(e)
            _check(res, (b, name), g, numeric_grad(lambda x: fn(x)[0], e), tol)

        n_cands = int(rng.integers(1, 12))
        q, pos = rng.normal(size=dim), rng.normal(size=dim)
        cands = rng.normal(size=(n_cands, dim))
        _, (gq, gp, gc) = peo_loss(q, pos, cands, cfg)
        _check(res, (b, "peo/query"), gq,
               numeric_grad(lambda x: peo_loss(x, pos, cands, cfg)[0], q), tol)
        _check(res, (b, "peo/positive"), gp,
               numeric_grad(lambda x: peo_loss(q, x, cands, cfg)[0], pos), tol)
        _check(res, (b, "peo/candidates"), gc,
               numeric_grad(lambda x: peo_loss(q, pos, x, cfg)[0], cands), tol)
    return res


def _check(res, where, analytic, numeric, tol):
    err = relative_error(analytic, numeric)
    res.checked += 1
    res.worst = max(res.worst, err)
    if not err < tol:
        res.failures.append((*where, err))


# ---------------------------------------------------------------------------
# Mask expressivity sweep
# ---------------------------------------------------------------------------


def count_patterns(max_instr=16, max_tokens=8):
    """Per-instruction token-count vectors used by the expressivity sweep.

    The two-hop property for a pair of instructions depends only on their own
    token counts, so step vectors (``a`` up to a split point, ``b`` after it)
    cover every (earlier, later) count pair at every position pair.  Uniform
    vectors add empty instructions.
    """
    for T in range(1, max_instr + 1):
        for c in range(max_tokens + 1):
            yield (c,) * T
        for split in range(1, T):
            for a in range(1, max_tokens + 1):
                for b in range(1, max_tokens + 1):
                    if a != b:
                        yield (a,) * split + (b,) * (T - split)


def mask_check(max_instr=16, max_tokens=8) -> CheckResult:
    res = CheckResult("mask-expressivity")
    for counts in count_patterns(max_instr, max_tokens):
        f = TokenizedFunction.from_counts(counts)
        report = expressivity_check(f, build_hier_mask(f))
        res.checked += report.checked
        if not report.ok:
            res.failures.append((counts, len(report.violations)))
    return res


def run_all(n_programs=200, n_states=10, n_batches=20, seed=0):
    return [
        semantic_check(n_programs, n_states, seed),
        gradient_check(n_batches, seed=seed),
        mask_check(),
    ]
