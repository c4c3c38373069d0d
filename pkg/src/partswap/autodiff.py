"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation runs eagerly and records a closure that maps the output
gradient to gradients for its inputs. ``Tensor.backward`` walks the tape in
reverse topological order.

Reductions go through numpy's fixed (pairwise) summation, so a given shape
always sums in the same order and repeated runs are bitwise identical.
Threaded or reordered reductions would break that guarantee.
"""
from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "backward",
    "gradcheck",
    "matmul",
    "conv2d",
    "relu",
    "gelu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "log_softmax",
    "maximum",
    "clamp",
    "concat",
    "stack",
    "cross_entropy",
    "l2_normalize_rows",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return _mul(self, other ** -1.0)

    def __rtruediv__(self, other):
        return _mul(as_tensor(other), self ** -1.0)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(p)
        x = self.data
        return _make(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),), "pow")

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        shape = self.shape

        def bw(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), bw, "getitem")

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),), "reshape")

    def flatten_rows(self) -> Tensor:
        """(b, ...) -> (b, prod(...))."""
        return self.reshape(self.shape[0], -1)

    def transpose(self, *axes) -> Tensor:
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def var(self, axis=None, keepdims: bool = False) -> Tensor:
        """Biased (population) variance."""
        mu = self.mean(axis=axis, keepdims=True)
        return ((self - mu) ** 2).mean(axis=axis, keepdims=keepdims)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        _run_backward(self, np.asarray(grad, dtype=np.float64))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"operation '{op}' produced non-finite values (shape {data.shape})")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    return _make(
        x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul"
    )


def _run_backward(root: Tensor, grad: np.ndarray) -> None:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Backpropagate ``loss`` and return one gradient per entry of ``params``.

    Trainable leaves that the loss does not depend on get a zero gradient and a
    warning; frozen leaves (``requires_grad=False``) are returned as ``None``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    for p in params:
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    out = []
    for p in params:
        if not p.requires_grad:
            out.append(None)
        elif p.grad is None:
            warnings.warn(f"parameter {p.name or p.shape} is disconnected from the loss; gradient set to zero")
            p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        else:
            out.append(p.grad)
    return out


# -- elementwise / nonlinear ------------------------------------------------

def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(y, (x,), bw, "gelu")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor) with a constant floor; no gradient where clamped."""
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "maximum")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit l2 norm. Rows with norm below ``eps`` stay zero."""
    x2 = x.flatten_rows() if x.ndim != 2 else x
    sq = (x2 * x2).sum(axis=1, keepdims=True)
    norm = sqrt(maximum(sq, eps * eps))
    return x2 / norm


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {x.shape} and {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return _make(x @ y, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: (N, C, Hp, Wp) -> (N, Ho, Wo, C, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, lowered to a single matmul."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {xd.shape}, {wd.shape}")
    n, c, h, w = xd.shape
    f, cw, kh, kw = wd.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d kernel larger than padded input")
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, stride)).reshape(n * ho * wo, c * kh * kw)
    wmat = wd.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, bw, "conv2d")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy. ``logits`` is (..., C), ``labels`` integer (...)."""
    labels = np.asarray(labels)
    flat = logits.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    lp = log_softmax(flat, axis=1)
    picked = lp[np.arange(lab.size), lab]
    return -picked.mean()


# -- gradient checking --------------------------------------------------------

def gradcheck(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    eps: float = 1e-6,
) -> dict[str, float]:
    """Compare analytic and central-difference gradients of ``fn()``.

    Returns, per parameter, ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    Errors are relative to the gradient's own scale so near-zero entries do
    not blow up the ratio.
    """
    named = dict(params) if isinstance(params, dict) else {
        (p.name or f"param{i}"): p for i, p in enumerate(params)
    }
    plist = list(named.values())
    analytic = backward(fn(), plist)
    report = {}
    with no_grad():
        for (name, p), ga in zip(named.items(), analytic):
            if ga is None:
                continue
            ga = ga.copy()
            p.data = np.ascontiguousarray(p.data)
            num = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
            scale = max(np.abs(ga).max(), np.abs(num).max(), 1e-300)
            report[name] = float(np.abs(ga - num).max() / scale)
    return report
