"""Representational similarity and dissimilarity measures.

All differentiable measures accept numpy arrays or :class:`~partswap.autodiff.Tensor`
activations of shape (batch, ...) and flatten everything after the batch
axis. Rows are l2-normalized before any Gram matrix is formed.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "MetricSpec",
    "DegenerateSimilarityError",
    "NeighborConditionals",
    "GramSummary",
    "gram",
    "linear_cka",
    "cka_dissimilarity",
    "biased_hsic",
    "unbiased_hsic",
    "ucka",
    "ucka_dissimilarity",
    "knn_sets",
    "mnn_overlap",
    "dmnn_conditionals",
    "dmnn_loss",
    "dmnn_dissimilarity",
    "dissimilarity",
    "gram_histogram",
]

DEGENERATE_HSIC = 1e-15
KL_EPS = 1e-8


class DegenerateSimilarityError(ValueError):
    """A self-HSIC term vanished, so the normalized similarity is undefined."""


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "cka"  # cka | ucka | dmnn
    k: int = 5
    tau: float = 1.0
    simkind: str = "neg-sqdist"  # neg-sqdist | dot

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in ("cka", "ucka", "dmnn"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "dmnn":
            if self.tau <= 0:
                raise ValueError("temperature must be positive")
            if self.k < 1:
                raise ValueError("k must be >= 1")
            if self.simkind not in ("neg-sqdist", "dot"):
                raise ValueError(f"unknown similarity kind {self.simkind!r}")

    def validate_batch(self, b: int) -> None:
        if self.kind == "dmnn" and self.k > b - 2:
            raise ValueError(f"D-MNN needs k <= b-2 (k={self.k}, b={b})")
        if self.kind == "ucka" and b < 4:
            raise ValueError("unbiased CKA needs at least 4 samples")
        if b < 2:
            raise ValueError("similarity needs at least 2 samples")


def _rows(x, normalize: bool = True) -> Tensor:
    x = ad.as_tensor(x)
    x = x.flatten_rows() if x.ndim != 2 else x
    return ad.l2_normalize_rows(x) if normalize else x


def gram(x, normalize: bool = True) -> Tensor:
    a = _rows(x, normalize)
    return a @ a.T


def _center(k: Tensor) -> Tensor:
    b = k.shape[0]
    h = np.eye(b) - np.full((b, b), 1.0 / b)
    return Tensor(h) @ k @ Tensor(h)


def biased_hsic(K: Tensor, L: Tensor) -> Tensor:
    """tr(HKH HLH), without the 1/(b-1)^2 factor (it cancels in CKA)."""
    K, L = ad.as_tensor(K), ad.as_tensor(L)
    return (_center(K) * _center(L).T).sum()


def linear_cka(A, B, normalize: bool = True) -> Tensor:
    """Linear CKA between two activation sets; a differentiable scalar in [0, 1]."""
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    if A.shape[0] < 2:
        raise ValueError("CKA needs at least 2 samples")
    Kc = _center(gram(A, normalize))
    Lc = _center(gram(B, normalize))
    hkl = (Kc * Lc).sum()
    hkk = (Kc * Kc).sum()
    hll = (Lc * Lc).sum()
    if hkk.item() < DEGENERATE_HSIC or hll.item() < DEGENERATE_HSIC:
        raise DegenerateSimilarityError("self-HSIC is zero (constant activations)")
    return hkl / ad.sqrt(hkk * hll)


def cka_dissimilarity(A, B) -> Tensor:
    try:
        return 1.0 - linear_cka(A, B)
    except DegenerateSimilarityError as e:
        warnings.warn(f"degenerate CKA ({e}); dissimilarity set to 1")
        return Tensor(1.0)


def unbiased_hsic(K, L, literal: bool = False) -> Tensor:
    """Unbiased U-statistic HSIC estimator from two Gram matrices (b >= 4).

    ``literal=True`` evaluates the expression with tr(K~L~) in all three
    bracketed terms instead; it is kept only as a diagnostic and is not an
    unbiased estimator.
    """
    K, L = ad.as_tensor(K), ad.as_tensor(L)
    m = K.shape[0]
    if m < 4:
        raise ValueError("unbiased HSIC needs at least 4 samples")
    off = 1.0 - np.eye(m)
    Kt = K * off
    Lt = L * off
    tr_kl = (Kt * Lt.T).sum()
    if literal:
        inner = tr_kl + tr_kl * (1.0 / ((m - 1) * (m - 2))) - tr_kl * (2.0 / (m - 2))
    else:
        inner = (
            tr_kl
            + Kt.sum() * Lt.sum() * (1.0 / ((m - 1) * (m - 2)))
            - (Kt @ Lt).sum() * (2.0 / (m - 2))
        )
    return inner * (1.0 / (m * (m - 3)))


def ucka(A, B, normalize: bool = True) -> Tensor:
    """CKA with unbiased HSIC. Not clamped; can be slightly negative."""
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    K, L = gram(A, normalize), gram(B, normalize)
    hkk = unbiased_hsic(K, K)
    hll = unbiased_hsic(L, L)
    if hkk.item() <= DEGENERATE_HSIC or hll.item() <= DEGENERATE_HSIC:
        raise DegenerateSimilarityError("non-positive unbiased self-HSIC")
    return unbiased_hsic(K, L) / ad.sqrt(hkk * hll)


def ucka_dissimilarity(A, B) -> Tensor:
    try:
        return 1.0 - ad.clamp(ucka(A, B), 0.0, 1.0)
    except DegenerateSimilarityError as e:
        warnings.warn(f"degenerate UCKA ({e}); dissimilarity set to 1")
        return Tensor(1.0)


# -- nearest neighbours ------------------------------------------------------------

def _sim_matrix(x: np.ndarray, simkind: str) -> np.ndarray:
    if simkind == "dot":
        return x @ x.T
    sq = (x * x).sum(axis=1)
    return -(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T))


def knn_sets(x, k: int, normalize: bool = True) -> np.ndarray:
    """(b, k) indices of each row's k nearest other rows; ties go to the lower index."""
    x = _rows(x, normalize).data
    b = x.shape[0]
    if not 1 <= k <= b - 2:
        raise ValueError(f"k must be in [1, b-2] (k={k}, b={b})")
    d = -_sim_matrix(x, "neg-sqdist")
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def mnn_overlap(A, B, k: int, per_anchor: bool = False):
    """Mean over anchors of |kNN_A(i) & kNN_B(i)| / k."""
    sa, sb = knn_sets(A, k), knn_sets(B, k)
    scores = np.array([len(set(ra) & set(rb)) / k for ra, rb in zip(sa, sb)])
    return scores if per_anchor else float(scores.mean())


@dataclass
class NeighborConditionals:
    """Row-stochastic neighbour distributions over the top-k non-anchor indices.

    ``P`` is stored as a (b, b) tensor with an all-zero diagonal; ``offdiag``
    gives the (b, b-1) view over the non-anchor indices.
    """

    P: Tensor
    support: np.ndarray  # (b, k)
    mask: np.ndarray = field(repr=False)  # (b, b) bool

    @property
    def offdiag(self) -> np.ndarray:
        b = self.P.shape[0]
        keep = ~np.eye(b, dtype=bool)
        return self.P.data[keep].reshape(b, b - 1)

    def detach(self) -> NeighborConditionals:
        return NeighborConditionals(self.P.detach(), self.support, self.mask)


def dmnn_conditionals(X, spec: MetricSpec) -> NeighborConditionals:
    if spec.tau <= 0:
        raise ValueError("temperature must be positive")
    x = _rows(X)
    b = x.shape[0]
    spec.validate_batch(b)
    if spec.simkind == "dot":
        s = (x @ x.T) * (1.0 / spec.tau)
    else:
        sq = (x * x).sum(axis=1, keepdims=True)
        s = (x @ x.T * 2.0 - sq - sq.T) * (1.0 / spec.tau)
    sd = s.data.copy()
    np.fill_diagonal(sd, -np.inf)
    order = np.argsort(-sd, axis=1, kind="stable")[:, : spec.k]
    mask = np.zeros((b, b), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    # shift by the row max over the support; the shift is a constant
    shift = np.where(mask, sd, -np.inf).max(axis=1, keepdims=True)
    logits = s - shift
    e = ad.exp(ad.clamp(logits, -700.0, 0.0)) * mask.astype(np.float64)
    P = e / e.sum(axis=1, keepdims=True)
    return NeighborConditionals(P, order, mask)


def dmnn_loss(P_guide: NeighborConditionals, Q_target: NeighborConditionals, eps: float = KL_EPS) -> Tensor:
    """Mean over anchors of KL(P_i || Q_i), with Q smoothed by ``eps`` over non-anchor entries."""
    P = P_guide.P.data
    b = P.shape[0]
    off = 1.0 - np.eye(b)
    Q = Q_target.P
    Qs = (Q + eps * off) * (1.0 / (1.0 + (b - 1) * eps))
    Qs = Qs + np.eye(b)  # keep log finite on the anchor; P is zero there
    pos = P > 0
    logP = np.where(pos, np.log(np.where(pos, P, 1.0)), 0.0)
    kl = (Tensor(P * logP) - Tensor(P) * ad.log(Qs)).sum()
    return kl * (1.0 / b)


def dmnn_dissimilarity(A_target, A_guide, spec: MetricSpec) -> Tensor:
    with ad.no_grad():
        P = dmnn_conditionals(A_guide, spec)
    return dmnn_loss(P, dmnn_conditionals(A_target, spec))


def dissimilarity(A_target, A_guide, spec: MetricSpec) -> Tensor:
    """The alignment loss for ``spec`` (target first, guide second)."""
    if spec.kind == "cka":
        return cka_dissimilarity(A_target, A_guide)
    if spec.kind == "ucka":
        return ucka_dissimilarity(A_target, A_guide)
    return dmnn_dissimilarity(A_target, A_guide, spec)


# -- Gram diagnostics ----------------------------------------------------------------

@dataclass
class GramSummary:
    diag_mean: float
    offdiag_mean: float
    diag_quantiles: dict[float, float]
    offdiag_quantiles: dict[float, float]
    edges: np.ndarray
    diag_counts: np.ndarray
    offdiag_counts: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "is_diagonal"])
        for counts, flag in ((self.diag_counts, 1), (self.offdiag_counts, 0)):
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c), flag])
        return buf.getvalue()


def gram_histogram(A, bins: int = 20, normalize: bool = False,
                   quantiles=(0.0, 0.25, 0.5, 0.75, 1.0)) -> GramSummary:
    """Distribution of Gram entries, split into diagonal and off-diagonal parts."""
    a = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    a = a.reshape(a.shape[0], -1)
    if normalize:
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    K = a @ a.T
    b = K.shape[0]
    dmask = np.eye(b, dtype=bool)
    diag, offd = K[dmask], K[~dmask]
    lo, hi = float(K.min()), float(K.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    q = lambda v: {float(p): float(np.quantile(v, p)) for p in quantiles} if v.size else {}
    return GramSummary(
        diag_mean=float(diag.mean()),
        offdiag_mean=float(offd.mean()) if offd.size else float("nan"),
        diag_quantiles=q(diag),
        offdiag_quantiles=q(offd),
        edges=edges,
        diag_counts=np.histogram(diag, edges)[0],
        offdiag_counts=np.histogram(offd, edges)[0],
    )
