"""Self-contained check suites behind ``partswap metric-check`` and ``partswap gradcheck``.

Each check compares the library against an independent route (brute-force
enumeration, explicit matrices, finite differences) and reports a
:class:`CheckResult`.
"""
from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import ortho_group

from . import autodiff as ad
from .nets import Dense, ModuleGraph, parameter_hashes
from .similarity import (
    MetricSpec,
    cka_dissimilarity,
    dmnn_conditionals,
    dmnn_dissimilarity,
    linear_cka,
    mnn_overlap,
    ucka,
    ucka_dissimilarity,
    unbiased_hsic,
)

__all__ = ["CheckResult", "metric_suite", "gradient_suite", "schedule_audit", "hsic_enumeration", "format_results"]


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<44} {self.value:.3e} <= {self.tol:.0e}{extra}"


def format_results(results) -> str:
    return "\n".join(r.line() for r in results)


def hsic_enumeration(K: np.ndarray, L: np.ndarray) -> float:
    """Unbiased HSIC as an average over ordered distinct 4-tuples. O(b^4)."""
    b = K.shape[0]
    tot, n = 0.0, 0
    for i, j, q, r in itertools.permutations(range(b), 4):
        tot += K[i, j] * L[i, j] + K[i, j] * L[q, r] - 2.0 * K[i, j] * L[i, q]
        n += 1
    return tot / n


def _timed(name, tol, fn, detail=""):
    t = time.perf_counter()
    value = fn()
    return CheckResult(name, float(value), tol, time.perf_counter() - t, detail)


def _hard_limit_gap(tau: float, trials: int, rng, b: int = 16, d: int = 8, k: int = 4) -> float:
    """max over anchors and trials of |k * sum_j P_ij Q_ij - overlap_i|."""
    worst = 0.0
    spec = MetricSpec("dmnn", k=k, tau=tau)
    for _ in range(trials):
        A = rng.normal(size=(b, d))
        B = A + rng.normal(scale=1.0, size=(b, d))
        with ad.no_grad():
            P = dmnn_conditionals(A, spec).P.data
            Q = dmnn_conditionals(B, spec).P.data
        lhs = k * (P * Q).sum(axis=1)
        worst = max(worst, float(np.abs(lhs - mnn_overlap(A, B, k, per_anchor=True)).max()))
    return worst


def metric_suite(seed: int = 0, trials: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    pairs = [(rng.normal(size=(32, 10)), rng.normal(size=(32, 6))) for _ in range(trials)]

    def self_sim():
        return max(abs(linear_cka(A, A).item() - 1.0) for A, _ in pairs)

    def symmetry():
        return max(abs(linear_cka(A, B).item() - linear_cka(B, A).item()) for A, B in pairs)

    def orthogonal():
        worst = 0.0
        for A, B in pairs:
            Q = ortho_group.rvs(A.shape[1], random_state=rng)
            worst = max(worst, abs(linear_cka(A @ Q, B).item() - linear_cka(A, B).item()))
        return worst

    def hsic():
        worst = 0.0
        for b in range(4, 9):
            for _ in range(trials):
                X = rng.normal(size=(b, 5))
                Y = X @ rng.normal(size=(5, 3)) + rng.normal(size=(b, 3))
                K, L = X @ X.T, Y @ Y.T
                ref = hsic_enumeration(K, L)
                got = unbiased_hsic(K, L).item()
                worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
        return worst

    return [
        _timed("cka self-similarity |CKA(A,A)-1|", 1e-10, self_sim),
        _timed("cka symmetry", 1e-12, symmetry),
        _timed("cka orthogonal invariance", 1e-10, orthogonal),
        _timed("unbiased hsic vs 4-tuple enumeration (rel)", 1e-9, hsic, "b=4..8"),
        _timed("dmnn hard-limit identity, tau=1e-3", 1e-3, lambda: _hard_limit_gap(1e-3, trials, rng)),
        _timed("dmnn hard-limit identity, tau=1e6", 1e-3, lambda: _hard_limit_gap(1e6, trials, rng)),
    ]


def gradient_suite(seed: int = 0, b: int = 16, d: int = 8, eps: float = 1e-6) -> list[CheckResult]:
    """Central-difference gradchecks of each dissimilarity through one dense layer."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(b, d))
    G = X @ rng.normal(size=(d, d)) + 0.5 * rng.normal(size=(b, d))
    layer = Dense(d, d, rng)
    layer.bias.data = rng.normal(scale=0.1, size=d)
    params = dict(layer.named_parameters())
    losses = {
        "cka": lambda: cka_dissimilarity(layer(X), G),
        "ucka": lambda: ucka_dissimilarity(layer(X), G),
        "dmnn": lambda: dmnn_dissimilarity(layer(X), G, MetricSpec("dmnn", k=4, tau=1.0)),
    }
    # a loss sitting on its clamp has zero gradient and would pass vacuously
    u = ucka(layer(X), G).item()
    if not 0.0 < u < 1.0:
        raise RuntimeError(f"gradcheck fixture degenerate: UCKA={u}")
    out = []
    for name, fn in losses.items():
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # a degenerate fallback would have no gradient
            out.append(_timed(f"gradcheck {name} dissimilarity ({b}x{d})", 1e-3,
                              lambda fn=fn: max(ad.gradcheck(fn, params, eps).values())))
    return out


def _slot_hashes(model, k):
    h = parameter_hashes(model)
    return {i: tuple(v for n, v in sorted(h.items()) if n.startswith(f"slot{i}.")) for i in range(1, k + 1)}


def audit_stages(kind: str, k: int = 4, seed: int = 0, width: int = 8):
    """Run a small conversion and record, per stage, which slots were trainable and which changed.

    Returns ``(rows, guide_unchanged)`` with rows ``(I_t, trainable, mutated)``.
    """
    from .conversion import ReplacementMapping, make_schedule, run_conversion
    from .training import AlignConfig

    rng = np.random.default_rng(seed)
    slot = {"part": {"kind": "dense", "params": {"out": width}}, "post": [{"kind": "relu"}]}
    guide = ModuleGraph({"input_shape": [width], "slots": [slot] * k}, seed=seed)
    X = rng.normal(size=(64, width))
    schedule = make_schedule(kind, k)
    mapping = ReplacementMapping.uniform({"kind": "low-rank-linear-pair", "params": {"rank": width // 2}}, range(1, k + 1))
    guide_before = parameter_hashes(guide, buffers=True)
    prev = _slot_hashes(guide, k)
    rows = []

    def on_stage(t, hybrid, report):
        nonlocal prev
        now = _slot_hashes(hybrid, k)
        trainable = {i for i in range(1, k + 1) if any(p.requires_grad for p in hybrid.slot(i).parameters())}
        rows.append((set(schedule.stage(t)), trainable, {i for i in now if now[i] != prev[i]}))
        prev = now

    run_conversion(guide, mapping, schedule, MetricSpec("cka"), AlignConfig(epochs=1, lr=1e-2, batch_size=32, seed=seed),
                   X, stage_callback=on_stage)
    return rows, parameter_hashes(guide, buffers=True) == guide_before


def schedule_audit(k: int = 4, seed: int = 0) -> list[CheckResult]:
    """Per schedule kind: count of stages whose trainable or mutated slots differ from I_t."""
    out = []
    for kind in ("progressive", "sequential", "independent", "joint"):
        t0 = time.perf_counter()
        rows, guide_ok = audit_stages(kind, k, seed)
        bad = sum(trainable != I_t or mutated != I_t for I_t, trainable, mutated in rows) + (not guide_ok)
        out.append(CheckResult(f"schedule mask audit: {kind} (k={k})", float(bad), 0.0,
                               time.perf_counter() - t0, f"{len(rows)} stages"))
    return out
