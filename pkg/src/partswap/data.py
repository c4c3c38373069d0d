"""Synthetic datasets standing in for image classification and language modeling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = ["DatasetSpec", "Splits", "gen_dataset", "bigram_cross_entropy", "DATASET_KINDS"]

DATASET_KINDS = ("translated-patterns", "gaussian-blobs", "sequence-copy", "char-stream")


@dataclass
class DatasetSpec:
    kind: str = "translated-patterns"
    n_train: int = 5000
    n_test: int = 1000
    val_fraction: float = 0.1
    classes: int = 10
    size: int = 16  # image side, vector dim, or sequence length
    pattern: int = 5  # template side for translated-patterns
    alphabet: int = 16
    noise: float = 0.1
    separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n_train < 10 or self.n_test < 1:
            raise ValueError("need at least 10 training and 1 test sample")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.kind == "translated-patterns" and not 1 <= self.pattern <= self.size:
            raise ValueError("pattern must fit in the image")
        if self.classes < 2 and self.kind in ("translated-patterns", "gaussian-blobs"):
            raise ValueError("need at least 2 classes")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Splits:
    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    spec: DatasetSpec
    info: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train[0].shape[1:])


def _balanced_labels(n: int, c: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _patterns(spec: DatasetSpec, n: int, rng):
    c, s, p = spec.classes, spec.size, spec.pattern
    templates = (rng.random((c, p, p)) < 0.5).astype(np.float64)
    # no blank or duplicate templates
    for i in range(c):
        while templates[i].sum() == 0 or any(np.array_equal(templates[i], templates[j]) for j in range(i)):
            templates[i] = (rng.random((p, p)) < 0.5).astype(np.float64)
    y = _balanced_labels(n, c, rng)
    X = rng.normal(0.0, spec.noise, size=(n, 1, s, s))
    offs = rng.integers(0, s - p + 1, size=(n, 2))
    for i in range(n):
        r, q = offs[i]
        X[i, 0, r : r + p, q : q + p] += templates[y[i]]
    return X, y, {"templates": templates}


def _blobs(spec: DatasetSpec, n: int, rng):
    c, d = spec.classes, spec.size
    centers = rng.normal(0.0, spec.separation, size=(c, d))
    y = _balanced_labels(n, c, rng)
    X = centers[y] + rng.normal(0.0, 1.0, size=(n, d))
    return X, y, {"centers": centers}


def _copy_task(spec: DatasetSpec, n: int, rng):
    L, A = spec.size, spec.alphabet
    delim = A
    src = rng.integers(0, A, size=(n, L))
    seq = np.concatenate([src, np.full((n, 1), delim), src], axis=1)
    X = seq[:, :-1]
    y = seq[:, 1:].copy()
    y[:, :L] = -1  # only the copied half is scored
    return X, y, {"vocab": A + 1, "delimiter": delim}


def _char_stream(spec: DatasetSpec, n: int, rng):
    A, L = spec.alphabet, spec.size
    # sparse second-order Markov source
    trans = rng.dirichlet(np.full(A, 0.1), size=(A, A))
    seq = np.zeros((n, L + 1), dtype=np.int64)
    seq[:, :2] = rng.integers(0, A, size=(n, 2))
    cum = trans.cumsum(axis=-1)
    for t in range(2, L + 1):
        u = rng.random(n)
        probs = cum[seq[:, t - 2], seq[:, t - 1]]
        seq[:, t] = np.minimum((u[:, None] > probs).sum(axis=1), A - 1)
    return seq[:, :-1], seq[:, 1:], {"vocab": A, "transitions": trans}


_GENERATORS = {
    "translated-patterns": _patterns,
    "gaussian-blobs": _blobs,
    "sequence-copy": _copy_task,
    "char-stream": _char_stream,
}


def gen_dataset(spec: DatasetSpec) -> Splits:
    """Generate train/val/test splits; all three come from one seeded draw, so they are disjoint."""
    rng = np.random.default_rng(spec.seed)
    n_total = spec.n_train + spec.n_test
    X, y, info = _GENERATORS[spec.kind](spec, n_total, rng)
    n_val = max(1, int(round(spec.n_train * spec.val_fraction)))
    n_tr = spec.n_train - n_val
    tr, va, te = slice(0, n_tr), slice(n_tr, spec.n_train), slice(spec.n_train, n_total)
    return Splits((X[tr], y[tr]), (X[va], y[va]), (X[te], y[te]), spec, info)


def bigram_cross_entropy(X_train, y_train, X_eval, y_eval, smoothing: float = 1e-3) -> float:
    """Cross-entropy of the best count-based bigram model (next token given current token).

    Fitted on the scored (``y >= 0``) positions of the training data.
    """
    V = int(max(X_train.max(), y_train.max(), X_eval.max(), y_eval.max())) + 1
    counts = np.full((V, V), smoothing)
    keep = y_train >= 0
    np.add.at(counts, (X_train[keep], y_train[keep]), 1.0)
    probs = counts / counts.sum(axis=1, keepdims=True)
    keep = y_eval >= 0
    return float(-np.log(probs[X_eval[keep], y_eval[keep]]).mean())
