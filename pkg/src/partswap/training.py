"""Optimizers, learning-rate control, BN handling, alignment and task training."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .nets import BatchNorm, Module

log = logging.getLogger(__name__)

__all__ = [
    "AdamW",
    "OptimizerState",
    "clip_grad_norm",
    "optimizer_step",
    "WarmupCosine",
    "ReduceOnPlateau",
    "EMAController",
    "replay_ema",
    "AlignConfig",
    "TaskConfig",
    "StageReport",
    "StageDivergedError",
    "align_stage",
    "auto_align_stage",
    "freeze_bn",
    "recalibrate_bn",
    "batchnorm_layers",
    "evaluate",
    "task_train",
    "naive_baseline",
    "distill_kl",
    "progressive_distill",
    "MetricsLog",
    "iterate_minibatches",
]


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    """Rescale so the global l2 norm is at most ``max_norm``. Returns (grads, pre-clip norm)."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm is None or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> float:
    """One AdamW update in place (decoupled weight decay, global-norm clipping first).

    Returns the pre-clip gradient norm.
    """
    grads, norm = clip_grad_norm(grads, state.clip)
    if not all(np.isfinite(g).all() for g in grads):
        raise NonFiniteError("non-finite gradient after clipping")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, weight_decay=0.0, clip=None, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState.for_params(
            self.params, lr=lr, weight_decay=weight_decay, clip=clip, betas=betas, eps=eps
        )

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, loss: Tensor) -> float:
        """Backpropagate ``loss`` and update. Returns the pre-clip gradient norm."""
        grads = ad.backward(loss, self.params)
        return optimizer_step(self.params, grads, self.state)


# -- learning-rate control ---------------------------------------------------------

@dataclass
class WarmupCosine:
    """Per-epoch schedule: linear warmup to ``lr_max`` then cosine to ``min_ratio * lr_max``.

    Warmup epoch e (0-based) runs at ``lr_max * (e + 1) / warmup``; the cosine
    starts at epoch ``warmup`` and reaches its floor on the final epoch.
    """

    lr_max: float
    epochs: int
    warmup: int = 0
    min_ratio: float = 1e-3

    def __call__(self, epoch: int) -> float:
        lo = self.lr_max * self.min_ratio
        if epoch < self.warmup:
            return self.lr_max * (epoch + 1) / self.warmup
        span = self.epochs - 1 - self.warmup
        if span <= 0:
            return self.lr_max
        frac = min(max((epoch - self.warmup) / span, 0.0), 1.0)
        return lo + 0.5 * (self.lr_max - lo) * (1.0 + math.cos(math.pi * frac))


class ReduceOnPlateau:
    """Multiply the lr by ``factor`` once ``patience`` epochs pass without a relative improvement."""

    def __init__(self, lr: float, patience: int = 4, factor: float = 0.5, threshold: float = 1e-4, min_lr: float = 1e-12):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
            return True
        return False


class EMAController:
    """Loss EMA driving lr reduction (epoch-level plateau) and stage stopping.

    The EMA uses decay ``2 / (window + 1)`` and is seeded with the first loss.
    ``update`` is called once per step, ``end_epoch`` once per epoch; both
    return the events they fired. The plateau test sees only the EMA value at
    each epoch boundary.
    """

    def __init__(self, lr: float = 1e-3, window: int = 500, threshold: float = 0.01, max_epochs: int = 100,
                 patience: int = 4, factor: float = 0.5):
        self.alpha = 2.0 / (window + 1)
        self.threshold = threshold
        self.max_epochs = max_epochs
        self.plateau = ReduceOnPlateau(lr, patience=patience, factor=factor)
        self.ema: float | None = None
        self.step_count = 0
        self.epoch = 0
        self.stopped = False

    @property
    def lr(self) -> float:
        return self.plateau.lr

    def update(self, loss: float) -> list[dict]:
        self.step_count += 1
        self.ema = loss if self.ema is None else self.alpha * loss + (1.0 - self.alpha) * self.ema
        if not self.stopped and self.ema < self.threshold:
            self.stopped = True
            return [{"event": "stop", "reason": "ema_below_threshold", "step": self.step_count,
                     "epoch": self.epoch, "ema": self.ema}]
        return []

    def end_epoch(self) -> list[dict]:
        events = []
        self.epoch += 1
        if self.stopped:
            return events
        if self.ema is not None and self.plateau.step(self.ema):
            events.append({"event": "lr_reduce", "epoch": self.epoch, "step": self.step_count, "lr": self.lr,
                           "ema": self.ema})
        if self.epoch >= self.max_epochs:
            self.stopped = True
            events.append({"event": "stop", "reason": "max_epochs", "epoch": self.epoch, "step": self.step_count,
                           "ema": self.ema})
        return events


def replay_ema(stream: Iterable[float], steps_per_epoch: int, **kw) -> list[dict]:
    """Feed a recorded loss stream through a fresh controller; returns all events."""
    ctl = EMAController(**kw)
    events = []
    for i, loss in enumerate(stream, start=1):
        events += ctl.update(float(loss))
        if ctl.stopped:
            break
        if i % steps_per_epoch == 0:
            events += ctl.end_epoch()
            if ctl.stopped:
                break
    return events


# -- alignment stages ----------------------------------------------------------------

@dataclass
class AlignConfig:
    epochs: int | list[int] = 20
    lr: float | list[float] = 1e-3
    batch_size: int = 64
    clip: float | None = 1.0
    weight_decay: float = 0.0
    lr_schedule: str = "constant"  # constant | cosine
    auto: bool = False
    ema_window: int = 500
    ema_threshold: float = 0.01
    max_epochs: int = 100
    plateau_patience: int = 4
    plateau_factor: float = 0.5
    init: str = "random"  # random | copy
    seed: int = 0

    def for_stage(self, t: int) -> tuple[int, float]:
        ep = self.epochs[min(t - 1, len(self.epochs) - 1)] if isinstance(self.epochs, list) else self.epochs
        lr = self.lr[min(t - 1, len(self.lr) - 1)] if isinstance(self.lr, list) else self.lr
        return int(ep), float(lr)


@dataclass
class StageReport:
    stage: int
    indices: list[int]
    records: list[dict] = field(default_factory=list)
    final_per_layer: dict[int, float] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)

    def to_jsonl(self, **extra) -> str:
        lines = []
        pending = list(self.events)
        for r in self.records:
            ev = [e for e in pending if e.get("step", -1) == r["step"]]
            lines.append(json.dumps({**extra, "stage": self.stage, "epoch": r["epoch"], "step": r["step"],
                                     "per_layer_loss": r["per_layer_loss"], "lr": r["lr"], "events": ev}))
        unmatched = [e for e in pending if all(e.get("step", -1) != r["step"] for r in self.records)]
        if unmatched:
            lines.append(json.dumps({**extra, "stage": self.stage, "epoch": None, "step": None,
                                     "per_layer_loss": [], "lr": None, "events": unmatched}))
        return "\n".join(lines)

    def summary(self) -> dict:
        return {"stage": self.stage, "indices": self.indices,
                "final_per_layer": {str(k): v for k, v in self.final_per_layer.items()},
                "events": self.events, "steps": len(self.records)}


class StageDivergedError(RuntimeError):
    pass


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = True):
    idx = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for s in range(0, stop, batch_size):
        yield idx[s : s + batch_size]


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p.data = s.copy()


def align_stage(
    params: Sequence[Tensor],
    X,
    layer_losses: Callable[[object], list[Tensor]],
    indices: Sequence[int],
    config: AlignConfig,
    stage: int = 1,
    rng: np.random.Generator | None = None,
) -> StageReport:
    """Minimize the mean of ``layer_losses(batch)`` over ``params``.

    ``X`` is the unlabeled input array; mini-batches are drawn from it with
    ``rng``. On a non-finite loss or gradient the stage restarts once from its
    initial parameters at half the learning rate, then gives up.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    epochs, lr = config.for_stage(stage)
    start = _snapshot(params)
    rng_state = rng.bit_generator.state
    events: list[dict] = []
    for attempt in range(2):
        try:
            report = _align_loop(params, X, layer_losses, indices, config, stage, rng, epochs, lr)
            report.events = events + report.events
            return report
        except NonFiniteError as e:
            if attempt == 1:
                _restore(params, start)
                raise StageDivergedError(f"stage {stage} diverged twice: {e}") from e
            events.append({"event": "diverged_restart", "step": 0, "reason": str(e), "new_lr": lr / 2})
            log.warning("stage %d diverged (%s); restarting at lr=%g", stage, e, lr / 2)
            _restore(params, start)
            rng.bit_generator.state = rng_state
            lr /= 2


def _align_loop(params, X, layer_losses, indices, config, stage, rng, epochs, lr) -> StageReport:
    report = StageReport(stage, list(indices))
    params = [p for p in params if p.requires_grad]
    opt = AdamW(params, lr=lr, weight_decay=config.weight_decay, clip=config.clip)
    n = len(X)
    bs = min(config.batch_size, n)
    ctl = None
    if config.auto:
        ctl = EMAController(lr=lr, window=config.ema_window, threshold=config.ema_threshold,
                            max_epochs=config.max_epochs, patience=config.plateau_patience,
                            factor=config.plateau_factor)
        epochs = config.max_epochs
    sched = WarmupCosine(lr, max(epochs, 1), 0) if config.lr_schedule == "cosine" else None
    step = 0
    for epoch in range(epochs):
        if sched is not None:
            opt.lr = sched(epoch)
        elif ctl is not None:
            opt.lr = ctl.lr
        for idx in iterate_minibatches(n, bs, rng):
            losses = layer_losses(X[idx])
            loss = losses[0] if len(losses) == 1 else sum(losses[1:], losses[0]) * (1.0 / len(losses))
            if not np.isfinite(loss.item()):
                raise NonFiniteError("non-finite alignment loss")
            if params:
                opt.step(loss)
            step += 1
            per_layer = [float(l.item()) for l in losses]
            report.records.append({"epoch": epoch, "step": step, "per_layer_loss": per_layer, "lr": opt.lr})
            if ctl is not None:
                for e in ctl.update(loss.item()):
                    report.events.append({**e, "step": step})
                if ctl.stopped:
                    break
        if ctl is not None:
            if ctl.stopped:
                break
            for e in ctl.end_epoch():
                report.events.append({**e, "step": step})
            if ctl.stopped:
                break
    report.final_per_layer = _final_losses(X, layer_losses, indices, bs)
    return report


def _final_losses(X, layer_losses, indices, bs) -> dict[int, float]:
    totals = np.zeros(len(indices))
    count = 0
    with ad.no_grad():
        for s in range(0, len(X) - bs + 1, bs):
            totals += [l.item() for l in layer_losses(X[s : s + bs])]
            count += 1
    return {int(i): float(v / max(count, 1)) for i, v in zip(indices, totals)}


def auto_align_stage(params, X, layer_losses, indices, config: AlignConfig, stage: int = 1, rng=None) -> StageReport:
    """``align_stage`` with the EMA controller choosing lr reductions and the stopping point."""
    return align_stage(params, X, layer_losses, indices, _replace(config, auto=True), stage, rng)


def _replace(cfg, **kw):
    out = copy.copy(cfg)
    for k, v in kw.items():
        setattr(out, k, v)
    return out


# -- batch normalization -------------------------------------------------------------

def batchnorm_layers(model: Module) -> list[BatchNorm]:
    return [m for m in model.modules() if isinstance(m, BatchNorm)]


def freeze_bn(model: Module) -> list[BatchNorm]:
    """Pin running statistics of every BatchNorm in ``model``."""
    layers = batchnorm_layers(model)
    for bn in layers:
        bn.frozen = True
    return layers


def recalibrate_bn(model: Module, X, batch_size: int = 64, passes: int = 1) -> list[BatchNorm]:
    """Re-estimate BatchNorm running statistics from ``X``; touches nothing else.

    Statistics are reset and re-accumulated as a cumulative average over every
    batch of every pass. Afterwards the layers are unfrozen and the model is in
    eval mode.
    """
    layers = batchnorm_layers(model)
    if not layers:
        warnings.warn("recalibrate_bn: model has no BatchNorm layers; nothing to do")
        return layers
    model.eval()
    saved = [bn.momentum for bn in layers]
    for bn in layers:
        bn.frozen = False
        bn.reset_running_stats()
        bn.momentum = None
        object.__setattr__(bn, "training", True)
    n = len(X)
    with ad.no_grad():
        for _ in range(passes):
            for s in range(0, n, batch_size):
                if n - s < 2:
                    continue
                model(X[s : s + batch_size])
    for bn, m in zip(layers, saved):
        bn.momentum = m
    model.eval()
    return layers


# -- task training -------------------------------------------------------------------

@dataclass
class TaskConfig:
    epochs: int = 20
    lr: float = 1e-3
    warmup: int = 2
    batch_size: int = 64
    clip: float | None = 1.0
    weight_decay: float = 1e-4
    min_ratio: float = 1e-3
    seed: int = 0


def _is_lm(y) -> bool:
    return np.asarray(y).ndim == 2


def _ce(logits: Tensor, y: np.ndarray) -> Tensor:
    y = np.asarray(y)
    if _is_lm(y):
        keep = y.reshape(-1) >= 0
        flat = logits.reshape(-1, logits.shape[-1])
        return ad.cross_entropy(flat[np.nonzero(keep)[0]], y.reshape(-1)[keep])
    return ad.cross_entropy(logits, y)


def evaluate(model: Module, X, y, batch_size: int = 256) -> dict:
    """Loss plus accuracy (classification) or perplexity (token targets), in eval mode."""
    was = model.training
    model.eval()
    tot, n, correct = 0.0, 0, 0
    with ad.no_grad():
        for s in range(0, len(X), batch_size):
            yb = np.asarray(y[s : s + batch_size])
            logits = model(X[s : s + batch_size])
            if _is_lm(yb):
                keep = yb.reshape(-1) >= 0
                cnt = int(keep.sum())
                pred = logits.data.reshape(-1, logits.shape[-1]).argmax(1)[keep]
                correct += int((pred == yb.reshape(-1)[keep]).sum())
            else:
                cnt = len(yb)
                correct += int((logits.data.argmax(1) == yb).sum())
            tot += _ce(logits, yb).item() * cnt
            n += cnt
    model.train(was)
    loss = tot / max(n, 1)
    out = {"loss": loss, "accuracy": correct / max(n, 1)}
    if _is_lm(y):
        out["perplexity"] = math.exp(min(loss, 700.0))
    return out


class MetricsLog:
    """Rows of (seed, phase, stage, epoch, loss, accuracy_or_perplexity, lr)."""

    columns = ("seed", "phase", "stage", "epoch", "loss", "accuracy_or_perplexity", "lr")

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row) -> None:
        self.rows.append({c: row.get(c) for c in self.columns})

    def extend(self, other: MetricsLog) -> None:
        self.rows.extend(other.rows)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=self.columns)
            w.writeheader()
            w.writerows(self.rows)


def task_train(model: Module, data, config: TaskConfig, log_to: MetricsLog | None = None,
               phase: str = "task", seed=None) -> list[dict]:
    """Cross-entropy training with AdamW and warmup+cosine; keeps the lowest-val-loss weights.

    ``data`` needs ``train`` and ``val`` attributes holding ``(X, y)`` pairs.
    """
    Xtr, ytr = data.train
    Xva, yva = data.val
    rng = np.random.default_rng(config.seed)
    model.requires_grad_(True)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay, clip=config.clip)
    sched = WarmupCosine(config.lr, config.epochs, config.warmup, config.min_ratio)
    best, best_state, history = math.inf, model.state_dict(), []
    for epoch in range(config.epochs):
        opt.lr = sched(epoch)
        model.train()
        tot, nb = 0.0, 0
        for idx in iterate_minibatches(len(Xtr), config.batch_size, rng):
            loss = _ce(model(Xtr[idx]), ytr[idx])
            opt.step(loss)
            tot += loss.item()
            nb += 1
        val = evaluate(model, Xva, yva)
        metric = val.get("perplexity", val["accuracy"])
        rec = {"epoch": epoch, "train_loss": tot / max(nb, 1), "val_loss": val["loss"], "val_metric": metric, "lr": opt.lr}
        history.append(rec)
        if log_to is not None:
            log_to.add(seed=seed, phase=phase, stage=None, epoch=epoch, loss=val["loss"],
                       accuracy_or_perplexity=metric, lr=opt.lr)
        if val["loss"] < best:
            best, best_state = val["loss"], model.state_dict()
    model.load_state_dict(best_state)
    model.eval()
    return history


def naive_baseline(build_target: Callable[[], Module], data, config: TaskConfig, log_to=None, seed=None):
    """Train the full target architecture from scratch, no alignment. Returns (model, history)."""
    model = build_target()
    history = task_train(model, data, config, log_to=log_to, phase="naive", seed=seed)
    return model, history


# -- distillation baseline -------------------------------------------------------------

def distill_kl(student_logits: Tensor, teacher_logits, temperature: float = 2.0) -> Tensor:
    """T^2 * mean KL(softmax(teacher/T) || softmax(student/T)) over all rows."""
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    t = t.reshape(-1, t.shape[-1]) / temperature
    t = t - t.max(axis=1, keepdims=True)
    logp = t - np.log(np.exp(t).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    s = student_logits.reshape(-1, student_logits.shape[-1]) * (1.0 / temperature)
    logq = ad.log_softmax(s, axis=1)
    kl = (Tensor(p * logp) - Tensor(p) * logq).sum() * (1.0 / p.shape[0])
    return kl * (temperature ** 2)


def progressive_distill(guide, mapping, schedule, X, config: AlignConfig, temperature: float = 2.0):
    """Stage-wise replacement trained on logit distillation instead of representations.

    Returns ``(hybrid, reports)`` like :func:`partswap.conversion.run_conversion`.
    """
    from .conversion import run_conversion

    return run_conversion(guide, mapping, schedule, None, config, X, objective="distill",
                          temperature=temperature)
