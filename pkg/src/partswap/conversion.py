"""Replacement schedules, trainable-slot bookkeeping and the staged conversion driver."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nets import ModuleGraph, PartSpec, ShapeError, build_part, group_boundaries
from .similarity import MetricSpec, dissimilarity
from .training import AlignConfig, StageReport, align_stage, distill_kl, freeze_bn

log = logging.getLogger(__name__)

__all__ = [
    "SCHEDULE_KINDS",
    "Schedule",
    "make_schedule",
    "ReplacementMapping",
    "ConversionState",
    "UnsupportedConfigurationError",
    "trainable_parameters",
    "apply_mask",
    "route_inputs",
    "build_group_target",
    "run_conversion",
]

SCHEDULE_KINDS = ("progressive", "sequential", "independent", "joint", "group-progressive")


class UnsupportedConfigurationError(ValueError):
    pass


@dataclass
class Schedule:
    kind: str
    stages: list[tuple[int, ...]]
    k: int
    group_size: int = 1
    reverse: bool = False

    @property
    def T(self) -> int:
        return len(self.stages)

    @property
    def grouped(self) -> bool:
        return self.kind == "group-progressive"

    def stage(self, t: int) -> tuple[int, ...]:
        if not 1 <= t <= self.T:
            raise IndexError(f"stage {t} outside 1..{self.T}")
        return self.stages[t - 1]

    def covered(self) -> set[int]:
        return set().union(*map(set, self.stages)) if self.stages else set()


def make_schedule(kind: str, k: int, group_size: int | None = None, reverse: bool = False,
                  slots=None) -> Schedule:
    """Index sets per stage. Slots are 1-based; ``reverse`` relabels slot i as k+1-i.

    ``slots`` restricts the schedule to an ordered subset of the k slots (the
    stages then walk that subset). For ``group-progressive`` the indices name
    target slots, one per group of ``group_size`` guide slots.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule {kind!r}; expected one of {SCHEDULE_KINDS}")
    if k < 1:
        raise ValueError("k must be >= 1")
    g = 1
    if kind == "group-progressive":
        if group_size is None or group_size < 1:
            raise ValueError("group-progressive needs group_size >= 1")
        if slots is not None:
            raise ValueError("group-progressive always covers every group")
        g = group_size
        order = list(range(1, len(group_boundaries(k, g)) + 1))
    elif slots is None:
        order = list(range(1, k + 1))
    else:
        order = sorted({int(i) for i in slots})
        if not order or order[0] < 1 or order[-1] > k:
            raise ValueError(f"slots must be a non-empty subset of 1..{k}")
    if reverse:
        order = order[::-1]
    n = len(order)
    if kind in ("progressive", "group-progressive"):
        stages = [tuple(order[:t]) for t in range(1, n + 1)]
    elif kind in ("sequential", "independent"):
        stages = [(i,) for i in order]
    else:
        stages = [tuple(order)]
    return Schedule(kind, stages, k, g, reverse)


@dataclass
class ReplacementMapping:
    """Slot (or target-slot, for grouped schedules) -> replacement PartSpec.

    ``frozen`` lists slots whose replacement is never trained. ``init`` is
    ``random`` (fresh parameters) or ``copy`` (copy the guide part's
    parameters, only valid when the spec equals the guide's).
    """

    entries: dict[int, PartSpec]
    init: str = "random"
    frozen: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.entries = {int(i): PartSpec.from_dict(s) for i, s in self.entries.items()}

    @classmethod
    def uniform(cls, spec, slots, **kw) -> ReplacementMapping:
        return cls({i: spec for i in slots}, **kw)

    def validate(self, guide: ModuleGraph, schedule: Schedule | None = None) -> None:
        """Build every mapped part once to check it fits its interface."""
        for i, spec in self.entries.items():
            in_shape, out_shape = self.interface(guide, i, schedule)
            try:
                build_part(spec, in_shape, out_shape, 0)
            except (ShapeError, ValueError) as e:
                raise ShapeError(f"mapping for slot {i}: {e}") from e
        if schedule is not None and not schedule.covered() <= set(self.entries):
            missing = sorted(schedule.covered() - set(self.entries))
            raise ValueError(f"mapping does not cover scheduled slots {missing}")

    @staticmethod
    def interface(guide: ModuleGraph, i: int, schedule: Schedule | None = None):
        if schedule is not None and schedule.grouped:
            lo, hi = group_boundaries(guide.k, schedule.group_size)[i - 1]
            return guide.slot(lo).in_shape, guide.slot(hi).out_shape
        s = guide.slot(i)
        return s.in_shape, s.out_shape


@dataclass
class ConversionState:
    stage: int = 0
    replaced: set[int] = field(default_factory=set)
    reports: list[StageReport] = field(default_factory=list)


def trainable_parameters(model: ModuleGraph, schedule: Schedule, t: int, frozen=()) -> dict[str, bool]:
    """Mask over ``model``'s parameters: True exactly for the slots in stage ``t``."""
    active = set(schedule.stage(t)) - set(frozen)
    prefixes = tuple(f"slot{i}." for i in active)
    return {name: name.startswith(prefixes) for name, _ in model.named_parameters()}


def apply_mask(model: ModuleGraph, mask: dict[str, bool]) -> None:
    for name, p in model.named_parameters():
        p.requires_grad = mask[name]
    for slot in model.slots:
        slot.frozen = not any(mask[n] for n, _ in slot.named_parameters(f"slot{slot.index}."))


def route_inputs(kind: str, hybrid: ModuleGraph, guide: ModuleGraph, i: int, x):
    """Input tensor for slot ``i``: guide activations for ``independent``, the hybrid prefix otherwise."""
    if kind == "independent":
        if i == 1:
            with ad.no_grad():
                return guide.stem_forward(x).detach()
        with ad.no_grad():
            h, _ = guide.run(x, stop=i - 1, head=False)
        return h.detach()
    if i == 1:
        return hybrid.stem_forward(x)
    h, _ = hybrid.run(x, stop=i - 1, head=False)
    return h


def build_group_target(guide: ModuleGraph, mapping: ReplacementMapping, schedule: Schedule, seed=0) -> ModuleGraph:
    """A standalone target chain: guide stem, one new slot per group, guide head."""
    bounds = group_boundaries(guide.k, schedule.group_size)
    arch = copy.deepcopy(guide.arch)
    arch["slots"] = [
        {"part": mapping.entries[j].to_dict(), "out_shape": list(guide.slot(hi).out_shape)}
        for j, (_, hi) in enumerate(bounds, start=1)
    ]
    target = ModuleGraph(arch, seed=seed)
    state = guide.state_dict()
    for prefix in ("stem.", "head."):
        for name, p in target.named_parameters():
            if name.startswith(prefix) and name in state and state[name].shape == p.shape:
                p.data = state[name].copy()
    for s in target.slots:
        s.origin = "target"
    return target


def run_conversion(
    guide: ModuleGraph,
    mapping: ReplacementMapping,
    schedule: Schedule,
    metric: MetricSpec | None,
    config: AlignConfig,
    X,
    objective: str = "representation",
    temperature: float = 2.0,
    stage_callback=None,
):
    """Convert ``guide`` stage by stage; returns ``(target model, [StageReport, ...])``.

    The guide is never modified: it is put in eval mode with frozen
    normalization statistics and no trainable parameters. The hybrid also
    runs with frozen normalization statistics throughout; recalibrate them
    afterwards with :func:`partswap.training.recalibrate_bn`.

    ``objective="distill"`` swaps the per-layer dissimilarity for logit
    distillation against the guide (the progressive distillation baseline).
    """
    if objective == "distill" and schedule.grouped:
        raise UnsupportedConfigurationError("distillation needs shape-compatible replacements end to end")
    if objective == "representation" and metric is None:
        raise ValueError("representation objective needs a MetricSpec")
    mapping.validate(guide, schedule)
    rng = np.random.default_rng(config.seed)

    guide.eval()
    freeze_bn(guide)
    guide.requires_grad_(False)

    if schedule.grouped:
        bounds = group_boundaries(guide.k, schedule.group_size)
        guide_tap = {j: hi for j, (_, hi) in enumerate(bounds, start=1)}
        hybrid = build_group_target(guide, mapping, schedule, seed=int(rng.integers(2**31)))
    else:
        guide_tap = {i: i for i in range(1, guide.k + 1)}
        hybrid = copy.deepcopy(guide)
    hybrid.eval()
    freeze_bn(hybrid)
    hybrid.requires_grad_(False)

    state = ConversionState()
    prev: set[int] = set()
    for t in range(1, schedule.T + 1):
        I_t = schedule.stage(t)
        new = [i for i in I_t if i not in state.replaced]
        for i in new:
            if schedule.grouped:
                continue
            if mapping.init == "copy":
                part = copy.deepcopy(guide.slot(i).part)
                hybrid.replace(i, mapping.entries[i], part=part)
            else:
                hybrid.replace(i, mapping.entries[i], seed=int(rng.integers(2**31)))
        state.replaced |= set(I_t)
        mask = trainable_parameters(hybrid, schedule, t, frozen=mapping.frozen)
        apply_mask(hybrid, mask)
        params = [p for p in hybrid.parameters() if p.requires_grad]

        if objective == "distill":
            def layer_losses(xb, I_t=I_t):
                with ad.no_grad():
                    teacher = guide(xb)
                return [distill_kl(hybrid(xb), teacher, temperature)]
        else:
            def layer_losses(xb, I_t=I_t):
                gidx = [guide_tap[i] for i in I_t]
                with ad.no_grad():
                    _, gtaps = guide.run(xb, taps=gidx, stop=max(gidx), head=False)
                if schedule.kind == "independent":
                    outs = {i: hybrid.slot(i)(route_inputs("independent", hybrid, guide, i, xb)) for i in I_t}
                else:
                    _, outs = hybrid.run(xb, taps=I_t, stop=max(I_t), head=False)
                return [dissimilarity(outs[i], gtaps[guide_tap[i]], metric) for i in I_t]

        report = align_stage(params, X, layer_losses, I_t, config, stage=t, rng=rng)
        if objective == "distill":
            report.final_per_layer = {"logits": v for v in report.final_per_layer.values()}
        state.reports.append(report)
        state.stage = t
        if stage_callback is not None:
            stage_callback(t, hybrid, report)
        log.info("stage %d/%d slots=%s final=%s", t, schedule.T, I_t, report.final_per_layer)
        prev = set(I_t)

    for s in hybrid.slots:
        if schedule.grouped or s.index in state.replaced:
            s.origin = "target"
    hybrid.requires_grad_(True)
    for s in hybrid.slots:
        s.frozen = False
    return hybrid, state.reports
