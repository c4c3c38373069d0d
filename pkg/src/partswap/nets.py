"""Model zoo: a small module system, replaceable parts, and the slot graph.

A :class:`ModuleGraph` is ``stem -> slot 1 -> ... -> slot k -> head``. Every
slot holds one replaceable *part* plus optional fixed post-ops (batchnorm,
activation), and its output is the activation tap for that position.
Parts are described by :class:`PartSpec` and built by :func:`build_part`, so
an architecture round-trips through a plain JSON manifest.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Parameter",
    "Module",
    "Sequential",
    "PartSpec",
    "LayerSlot",
    "ModuleGraph",
    "ShapeError",
    "build_part",
    "infer_out_shape",
    "tap_activations",
    "group_boundaries",
    "parameter_hashes",
    "save_checkpoint",
    "load_checkpoint",
    "count_parameters",
]


class ShapeError(ValueError):
    pass


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=requires_grad, name=name)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "meta", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, np.asarray(value, dtype=np.float64))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, Module]]:
        yield from self._modules.items()

    def modules(self) -> Iterator[Module]:
        yield self
        for _, m in self.children():
            yield from m.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self.children():
            yield from m.named_parameters(prefix + n + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for n in self._buffers:
            yield prefix + n, getattr(self, n)
        for n, m in self.children():
            yield from m.named_buffers(prefix + n + ".")

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def requires_grad_(self, flag: bool) -> Module:
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data.copy() for n, p in self.named_parameters()}
        out.update({n: b.copy() for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for n, p in params.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: checkpoint shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)
        for m_name, m in self._iter_named_modules():
            for b in m._buffers:
                key = f"{m_name}{b}"
                if key in state:
                    object.__setattr__(m, b, np.array(state[key], dtype=np.float64))

    def _iter_named_modules(self, prefix: str = ""):
        yield prefix, self
        for n, m in self.children():
            yield from m._iter_named_modules(prefix + n + ".")


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, m in enumerate(layers):
            self._modules[str(i)] = m

    def forward(self, x):
        for m in self.layers:
            x = m(x)
        return x

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # LeCun uniform: variance 1/fan_in
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    """Affine map on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        super().__init__()
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in))
        if bias:
            self.bias = Parameter(np.zeros(d_out))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        y = ad.as_tensor(x) @ self.weight
        return y + self.bias if self.bias is not None else y


class Linear(Module):
    """Dense layer on the flattened sample, reshaped to ``out_shape``."""

    def __init__(self, in_shape, out_shape, rng):
        super().__init__()
        self.out_shape = tuple(out_shape)
        self.fc = Dense(int(np.prod(in_shape)), int(np.prod(out_shape)), rng)

    def forward(self, x):
        x = ad.as_tensor(x)
        return self.fc(x.flatten_rows()).reshape((x.shape[0],) + self.out_shape)


class LowRankLinear(Module):
    """Flatten, project down to ``rank``, project up, reshape back."""

    def __init__(self, in_shape, out_shape, rank: int, rng):
        super().__init__()
        self.out_shape = tuple(out_shape)
        self.down = Dense(int(np.prod(in_shape)), rank, rng, bias=False)
        self.up = Dense(rank, int(np.prod(out_shape)), rng)

    def forward(self, x):
        x = ad.as_tensor(x)
        return self.up(self.down(x.flatten_rows())).reshape((x.shape[0],) + self.out_shape)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, rng):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return ad.conv2d(ad.as_tensor(x), self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Per-channel batch normalization over axis 1.

    ``frozen`` pins the running statistics: normalization always uses them and
    they are never updated, regardless of train/eval mode. ``momentum=None``
    switches the running update to a cumulative average.
    """

    def __init__(self, channels: int, momentum: float | None = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("num_batches", np.zeros(()))
        self.momentum = momentum
        self.eps = eps
        self.frozen = False

    def reset_running_stats(self) -> None:
        c = self.running_mean.shape[0]
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.num_batches = np.zeros(())

    def forward(self, x):
        x = ad.as_tensor(x)
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        if self.training and not self.frozen:
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
            n = x.size // x.shape[1]
            bm = mu.data.reshape(-1)
            bv = var.data.reshape(-1) * n / max(n - 1, 1)
            self.num_batches = self.num_batches + 1
            m = self.momentum if self.momentum is not None else 1.0 / float(self.num_batches)
            self.running_mean = (1 - m) * self.running_mean + m * bm
            self.running_var = (1 - m) * self.running_var + m * bv
            xhat = (x - mu) / ad.sqrt(var + self.eps)
        else:
            mu = self.running_mean.reshape(bshape)
            sd = np.sqrt(self.running_var + self.eps).reshape(bshape)
            xhat = (x - mu) * (1.0 / sd)
        return xhat * self.gamma.reshape(bshape) + self.beta.reshape(bshape)


class Activation(Module):
    _fns = {"relu": ad.relu, "gelu": ad.gelu, "tanh": ad.tanh, "identity": lambda x: x}

    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x):
        return self._fns[self.kind](ad.as_tensor(x))


class TokenwiseMLP(Module):
    """The same two-layer MLP applied to every token independently."""

    def __init__(self, d: int, hidden: int, rng):
        super().__init__()
        self.fc1 = Dense(d, hidden, rng)
        self.fc2 = Dense(hidden, d, rng)

    def forward(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class SingleHeadAttention(Module):
    def __init__(self, d: int, rng, causal: bool = True):
        super().__init__()
        self.q = Dense(d, d, rng)
        self.k = Dense(d, d, rng)
        self.v = Dense(d, d, rng)
        self.o = Dense(d, d, rng)
        self.causal = causal
        self.scale = 1.0 / np.sqrt(d)

    def forward(self, x):
        x = ad.as_tensor(x)
        t = x.shape[1]
        scores = (self.q(x) @ self.k(x).transpose(0, 2, 1)) * self.scale
        if self.causal:
            scores = scores + np.triu(np.full((t, t), -1e9), k=1)
        return self.o(ad.softmax(scores, axis=-1) @ self.v(x))


class ElmanRNN(Module):
    """Stacked tanh RNN over (batch, time, features)."""

    def __init__(self, d_in: int, hidden: int, layers: int, d_out: int, rng):
        super().__init__()
        self.hidden = hidden
        self.n_layers = layers
        for li in range(layers):
            fan = d_in if li == 0 else hidden
            setattr(self, f"wx{li}", Parameter(_uniform(rng, (fan, hidden), fan)))
            setattr(self, f"wh{li}", Parameter(_uniform(rng, (hidden, hidden), hidden)))
            setattr(self, f"b{li}", Parameter(np.zeros(hidden)))
        if d_out != hidden:
            self.proj = Dense(hidden, d_out, rng)
        else:
            object.__setattr__(self, "proj", None)

    def forward(self, x):
        x = ad.as_tensor(x)
        b, t, _ = x.shape
        seq = x
        for li in range(self.n_layers):
            wx, wh, bias = (getattr(self, f"{n}{li}") for n in ("wx", "wh", "b"))
            xw = seq @ wx + bias
            h = Tensor(np.zeros((b, self.hidden)))
            outs = []
            for step in range(t):
                h = ad.tanh(xw[:, step, :] + h @ wh)
                outs.append(h)
            seq = ad.stack(outs, axis=1)
        return self.proj(seq) if self.proj is not None else seq


class ResidualMLPGroup(Module):
    """``blocks`` residual MLP blocks on vectors: x <- relu(x + W2 relu(W1 x))."""

    def __init__(self, width: int, hidden: int, blocks: int, rng):
        super().__init__()
        self.blocks = []
        for i in range(blocks):
            blk = Sequential(Dense(width, hidden, rng), Activation("relu"), Dense(hidden, width, rng))
            self.blocks.append(blk)
            self._modules[f"block{i}"] = blk

    def forward(self, x):
        x = ad.as_tensor(x)
        for blk in self.blocks:
            x = ad.relu(x + blk(x))
        return x


class Embedding(Module):
    """Token + learned positional embedding. Input is an integer array (b, t)."""

    def __init__(self, vocab: int, d: int, max_len: int, rng):
        super().__init__()
        self.tok = Parameter(rng.normal(0, 1.0, size=(vocab, d)))
        self.pos = Parameter(rng.normal(0, 0.1, size=(max_len, d)))

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return self.tok[ids] + self.pos[: ids.shape[1]]


class GlobalAvgPool(Module):
    """(b, C, ...) -> (b, C): mean over every axis after the channel axis."""

    def forward(self, x):
        x = ad.as_tensor(x)
        return x.mean(axis=tuple(range(2, x.ndim)))


class Residual(Module):
    def __init__(self, inner: Module):
        super().__init__()
        self.inner = inner

    def forward(self, x):
        x = ad.as_tensor(x)
        return x + self.inner(x)


# -- part specifications -----------------------------------------------------

PART_KINDS = (
    "conv2d",
    "low-rank-linear-pair",
    "linear",
    "dense",
    "tokenwise-mlp",
    "single-head-attention",
    "elman-rnn",
    "batchnorm",
    "block-group",
    "embedding",
    "residual",
    "avgpool",
    "relu",
    "gelu",
    "tanh",
    "identity",
)


@dataclass
class PartSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PART_KINDS:
            raise ValueError(f"unknown part kind {self.kind!r}; expected one of {PART_KINDS}")

    def to_dict(self) -> dict:
        params = dict(self.params)
        if "inner" in params and isinstance(params["inner"], PartSpec):
            params["inner"] = params["inner"].to_dict()
        return {"kind": self.kind, "params": params}

    @classmethod
    def from_dict(cls, d) -> PartSpec:
        if isinstance(d, PartSpec):
            return d
        if isinstance(d, str):
            return cls(d)
        params = dict(d.get("params", {}))
        params.update({k: v for k, v in d.items() if k not in ("kind", "params")})
        if "out_shape" in params:
            params["out_shape"] = tuple(params["out_shape"])
        if isinstance(params.get("inner"), dict):
            params["inner"] = cls.from_dict(params["inner"])
        return cls(d["kind"], params)


def infer_out_shape(spec: PartSpec, in_shape) -> tuple[int, ...]:
    """Per-sample output shape of ``spec`` applied to ``in_shape``."""
    in_shape = tuple(in_shape)
    p, kind = spec.params, spec.kind
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d needs (C, H, W) input, got {in_shape}")
        stride = p.get("stride", 1)
        return (p.get("channels", in_shape[0]), -(-in_shape[1] // stride), -(-in_shape[2] // stride))
    if kind == "linear":
        out = p.get("out_shape", p.get("out"))
        return (out,) if isinstance(out, int) else tuple(out)
    if kind == "low-rank-linear-pair":
        return tuple(p.get("out_shape", in_shape))
    if kind == "dense":
        return in_shape[:-1] + (p["out"],)
    if kind == "embedding":
        return (in_shape[0], p["dim"])
    if kind == "elman-rnn":
        return in_shape[:-1] + (p.get("out", in_shape[-1]),)
    if kind == "avgpool":
        return in_shape[:1]
    return in_shape


def build_part(spec: PartSpec | dict, in_shape, out_shape=None, seed=0) -> Module:
    """Instantiate ``spec`` for the per-sample interface ``in_shape -> out_shape``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    spec = PartSpec.from_dict(spec)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    in_shape = tuple(in_shape)
    p, kind = spec.params, spec.kind
    if out_shape is None:
        out_shape = infer_out_shape(spec, in_shape)
    out_shape = tuple(out_shape)
    if kind == "low-rank-linear-pair":
        spec = PartSpec(kind, {**p, "out_shape": out_shape})
    natural = infer_out_shape(spec, in_shape)
    if natural != out_shape:
        raise ShapeError(f"{kind} maps {in_shape} to {natural}, slot needs {out_shape}")

    if kind == "conv2d":
        k = p.get("kernel", 3)
        part = Conv2d(in_shape[0], out_shape[0], k, p.get("stride", 1), p.get("padding", k // 2), rng)
    elif kind == "low-rank-linear-pair":
        rank = p["rank"]
        d_in, d_out = int(np.prod(in_shape)), int(np.prod(out_shape))
        if not 1 <= rank <= min(d_in, d_out):
            raise ValueError(f"rank {rank} outside [1, {min(d_in, d_out)}]")
        part = LowRankLinear(in_shape, out_shape, rank, rng)
    elif kind == "linear":
        part = Linear(in_shape, out_shape, rng)
    elif kind == "dense":
        part = Dense(in_shape[-1], out_shape[-1], rng)
    elif kind == "tokenwise-mlp":
        part = TokenwiseMLP(in_shape[-1], p.get("hidden", 4 * in_shape[-1]), rng)
    elif kind == "single-head-attention":
        part = SingleHeadAttention(in_shape[-1], rng, causal=p.get("causal", True))
    elif kind == "elman-rnn":
        part = ElmanRNN(in_shape[-1], p.get("hidden", in_shape[-1]), p.get("layers", 2), out_shape[-1], rng)
    elif kind == "batchnorm":
        part = BatchNorm(in_shape[0] if len(in_shape) > 1 else in_shape[-1])
    elif kind == "block-group":
        if len(in_shape) != 1:
            raise ShapeError(f"block-group works on vectors, got {in_shape}")
        part = ResidualMLPGroup(in_shape[0], p.get("hidden", in_shape[0]), p.get("blocks", 1), rng)
    elif kind == "embedding":
        part = Embedding(p["vocab"], p["dim"], in_shape[0], rng)
    elif kind == "residual":
        part = Residual(build_part(p["inner"], in_shape, in_shape, rng))
    elif kind == "avgpool":
        part = GlobalAvgPool()
    else:
        part = Activation(kind)
    part.meta.update(
        {"spec": spec.to_dict(), "in_shape": list(in_shape), "out_shape": list(out_shape), "init": "lecun-uniform, zero bias"}
    )
    return part


# -- slot graph ----------------------------------------------------------------

class LayerSlot(Module):
    """One replaceable position: ``post(part(x) [+ x])``."""

    def __init__(self, index: int, spec: PartSpec, part: Module, post: Sequential,
                 in_shape, out_shape, residual: bool = False, post_specs=()):
        super().__init__()
        self.index = index
        self.spec = spec
        self.part = part
        self.post = post
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.residual = residual
        self.post_specs = [PartSpec.from_dict(s) for s in post_specs]
        self.origin = "guide"
        self.frozen = False

    def forward(self, x):
        y = self.part(x)
        if self.residual:
            y = ad.as_tensor(x) + y
        return self.post(y)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.requires_grad_(not frozen)


class ModuleGraph(Module):
    """``stem -> slots -> head``; built from and serialisable to an arch dict.

    Arch dict layout::

        {"input_shape": [...], "input_kind": "float" | "tokens",
         "stem": [spec...], "slots": [{"part": spec, "post": [spec...], "residual": bool}],
         "head": [spec...]}
    """

    def __init__(self, arch: dict, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.arch = copy.deepcopy(arch)
        self.input_kind = arch.get("input_kind", "float")
        shape = tuple(arch["input_shape"])
        self.input_shape = shape
        self.stem, shape = self._build_seq(arch.get("stem", []), shape, rng)
        self.slots: list[LayerSlot] = []
        for i, s in enumerate(arch["slots"], start=1):
            spec = PartSpec.from_dict(s["part"])
            out_shape = tuple(s["out_shape"]) if "out_shape" in s else infer_out_shape(spec, shape)
            part = build_part(spec, shape, out_shape, rng)
            post, post_out = self._build_seq(s.get("post", []), out_shape, rng)
            if post_out != out_shape:
                raise ShapeError("slot post-ops must preserve shape")
            slot = LayerSlot(i, spec, part, post, shape, out_shape, s.get("residual", False), s.get("post", []))
            self.slots.append(slot)
            self._modules[f"slot{i}"] = slot
            shape = out_shape
        self.head, self.out_shape = self._build_seq(arch.get("head", []), shape, rng)

    @staticmethod
    def _build_seq(specs, shape, rng):
        layers = []
        for s in specs:
            spec = PartSpec.from_dict(s)
            layer = build_part(spec, shape, None, rng)
            shape = infer_out_shape(spec, shape)
            layers.append(layer)
        return Sequential(*layers), tuple(shape)

    @property
    def k(self) -> int:
        return len(self.slots)

    def slot(self, i: int) -> LayerSlot:
        if not 1 <= i <= self.k:
            raise IndexError(f"slot {i} outside 1..{self.k}")
        return self.slots[i - 1]

    def stem_forward(self, x):
        if self.input_kind == "float":
            x = ad.as_tensor(x)
        return self.stem(x)

    def run(self, x, taps=(), start: int = 1, start_input=None, stop: int | None = None, head: bool = True):
        """Forward pass returning ``(output, {slot index: tap tensor})``.

        ``start_input`` feeds slot ``start`` directly (bypassing the stem and
        earlier slots); ``stop`` ends the pass after that slot.
        """
        taps = set(taps)
        h = self.stem_forward(x) if start_input is None else ad.as_tensor(start_input)
        stop = self.k if stop is None else stop
        out = {}
        for slot in self.slots[start - 1 : stop]:
            h = slot(h)
            if slot.index in taps:
                out[slot.index] = h
        if head and stop == self.k:
            h = self.head(h)
        return h, out

    def forward(self, x):
        return self.run(x)[0]

    def replace(self, i: int, spec: PartSpec | dict, seed=0, part: Module | None = None) -> Module:
        """Swap the part in slot ``i`` for a new one with the same interface."""
        slot = self.slot(i)
        spec = PartSpec.from_dict(spec)
        if part is None:
            part = build_part(spec, slot.in_shape, slot.out_shape, seed)
        slot.part = part
        slot.spec = spec
        slot.origin = "target"
        return part

    def manifest(self) -> dict:
        arch = copy.deepcopy(self.arch)
        for slot, s in zip(self.slots, arch["slots"]):
            s["part"] = slot.spec.to_dict()
            s["out_shape"] = list(slot.out_shape)
        return {
            "arch": arch,
            "slots": [
                {"index": s.index, "spec": s.spec.to_dict(), "origin": s.origin, "frozen": s.frozen}
                for s in self.slots
            ],
        }


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def tap_activations(model: ModuleGraph, x, indices) -> dict[int, np.ndarray]:
    """Per-slot activations flattened to (batch, features), in inference mode."""
    indices = sorted(set(indices))
    for i in indices:
        model.slot(i)  # validates
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            _, taps = model.run(x, taps=indices, stop=max(indices) if indices else 0, head=False)
    finally:
        model.train(was_training)
    return {i: taps[i].data.reshape(taps[i].shape[0], -1).copy() for i in indices}


def group_boundaries(model_or_k, group_size: int) -> list[tuple[int, int]]:
    """Contiguous 1-based inclusive slot ranges of size ``group_size``; the last may be shorter."""
    k = model_or_k.k if isinstance(model_or_k, ModuleGraph) else int(model_or_k)
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    return [(s, min(s + group_size - 1, k)) for s in range(1, k + 1, group_size)]


def parameter_hashes(model: Module, buffers: bool = False) -> dict[str, str]:
    out = {n: hashlib.sha256(p.data.tobytes()).hexdigest() for n, p in model.named_parameters()}
    if buffers:
        out.update({n: hashlib.sha256(b.tobytes()).hexdigest() for n, b in model.named_buffers()})
    return out


def save_checkpoint(model: ModuleGraph, path) -> tuple[Path, Path]:
    """Write ``<path>.npz`` (named tensors) and ``<path>.manifest.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npz = path.with_suffix(".npz")
    man = path.with_suffix(".manifest.json")
    np.savez(npz, **model.state_dict())
    man.write_text(json.dumps(model.manifest(), indent=2), encoding="utf-8")
    return npz, man


def load_checkpoint(path) -> ModuleGraph:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".manifest.json").read_text(encoding="utf-8"))
    model = ModuleGraph(manifest["arch"])
    with np.load(path.with_suffix(".npz")) as z:
        model.load_state_dict({k: z[k] for k in z.files})
    for s, rec in zip(model.slots, manifest["slots"]):
        s.origin = rec["origin"]
        s.set_frozen(rec["frozen"])
    return model
