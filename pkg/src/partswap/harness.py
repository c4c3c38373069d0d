"""Experiment configs, seed sweeps, reports and the comparison table.

An experiment is one YAML file. ``run`` trains (or skips training of) the
guide once per seed, converts it under every configured schedule, fine-tunes,
runs the baselines and writes everything as JSON/CSV under the output
directory. Environment variables ``PARTSWAP_SEEDS`` (comma separated) and
``PARTSWAP_OUTPUT_DIR`` override the seed list and output directory.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import nets
from .conversion import SCHEDULE_KINDS, ReplacementMapping, make_schedule, run_conversion
from .data import DatasetSpec, Splits, gen_dataset
from .nets import ModuleGraph, group_boundaries
from .similarity import MetricSpec, gram_histogram
from .training import (
    AlignConfig,
    MetricsLog,
    TaskConfig,
    evaluate,
    recalibrate_bn,
    task_train,
)

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "RunReport",
    "Comparison",
    "ConfigError",
    "PRESETS",
    "preset_arch",
    "target_arch",
    "load_config",
    "run",
    "compare",
    "aggregate",
    "load_report",
    "gram_table",
]

BASELINES = ("naive", "distill")


class ConfigError(ValueError):
    pass


# -- architecture presets --------------------------------------------------------

def _toy_cnn(input_shape, classes, channels=(8, 16, 16), strides=(1, 2, 2)):
    post = [{"kind": "batchnorm"}, {"kind": "relu"}]
    slots = [
        {"part": {"kind": "conv2d", "params": {"channels": c, "stride": s}}, "post": post}
        for c, s in zip(channels, strides)
    ]
    return {
        "input_shape": list(input_shape),
        "stem": [],
        "slots": slots,
        "head": [{"kind": "avgpool"}, {"kind": "linear", "params": {"out": classes}}],
    }


def _deep_mlp(input_shape, classes, width=32, depth=8, blocks=1, hidden=None):
    group = {"kind": "block-group", "params": {"blocks": blocks, "hidden": hidden or width}}
    return {
        "input_shape": list(input_shape),
        "stem": [{"kind": "dense", "params": {"out": width}}, {"kind": "relu"}],
        "slots": [{"part": copy.deepcopy(group)} for _ in range(depth)],
        "head": [{"kind": "dense", "params": {"out": classes}}],
    }


def _tiny_transformer(input_shape, classes, dim=32, layers=2, hidden=None):
    slots = []
    for _ in range(layers):
        slots.append({"part": {"kind": "single-head-attention"}, "residual": True})
        slots.append({"part": {"kind": "tokenwise-mlp", "params": {"hidden": hidden or 2 * dim}}, "residual": True})
    return {
        "input_shape": list(input_shape),
        "input_kind": "tokens",
        "stem": [{"kind": "embedding", "params": {"vocab": classes, "dim": dim}}],
        "slots": slots,
        "head": [{"kind": "dense", "params": {"out": classes}}],
    }


PRESETS = {"toy-cnn": _toy_cnn, "deep-mlp": _deep_mlp, "tiny-transformer": _tiny_transformer}


def preset_arch(name: str, data: Splits, **params) -> dict:
    """Arch dict for a named preset, sized to the dataset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    if data.spec.kind in ("sequence-copy", "char-stream"):
        classes = int(data.info["vocab"])
    else:
        classes = data.spec.classes
    return PRESETS[name](data.input_shape, classes, **params)


def target_arch(guide: ModuleGraph, mapping: ReplacementMapping, schedule) -> dict:
    """The architecture the conversion produces, for building naive baselines."""
    arch = guide.manifest()["arch"]
    if schedule.grouped:
        bounds = group_boundaries(guide.k, schedule.group_size)
        arch["slots"] = [
            {"part": mapping.entries[j].to_dict(), "out_shape": list(guide.slot(hi).out_shape)}
            for j, (_, hi) in enumerate(bounds, start=1)
        ]
        return arch
    for i, spec in mapping.entries.items():
        arch["slots"][i - 1]["part"] = spec.to_dict()
    return arch


# -- config ----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetSpec
    guide: dict
    mapping: dict
    schedules: list[str]
    metric: MetricSpec
    align: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    baselines: list[str] = field(default_factory=lambda: ["naive"])
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/experiment"
    group_size: int | None = None
    min_guide_accuracy: float = 0.9
    gram_bins: int = 40
    gram_batch: int = 128
    save_checkpoints: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.schedules:
            raise ConfigError("at least one schedule is required")
        for s in self.schedules:
            if s not in SCHEDULE_KINDS:
                raise ConfigError(f"unknown schedule {s!r}")
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}; expected one of {BASELINES}")
        if "group-progressive" in self.schedules and not self.group_size:
            raise ConfigError("group-progressive needs group_size")
        if "preset" not in self.guide and "arch" not in self.guide:
            raise ConfigError("guide needs a preset or an explicit arch")
        if "part" not in self.mapping:
            raise ConfigError("mapping needs a replacement part")
        nets.PartSpec.from_dict(self.mapping["part"])
        AlignConfig(**self.align)
        TaskConfig(**self.task)
        TaskConfig(**self.guide.get("train", {}))

    @property
    def pretrain_guide(self) -> bool:
        return bool(self.guide.get("pretrain", True))

    @property
    def mode(self) -> str:
        if not self.pretrain_guide:
            return "untrained-guide"
        if len(self.schedules) > 1:
            return "schedule-comparison"
        return "standard"

    @classmethod
    def from_dict(cls, d: dict, env=None) -> ExperimentConfig:
        d = copy.deepcopy(d)
        env = os.environ if env is None else env
        if env.get("PARTSWAP_SEEDS"):
            d["seeds"] = [int(s) for s in env["PARTSWAP_SEEDS"].split(",") if s.strip()]
        if env.get("PARTSWAP_OUTPUT_DIR"):
            d["output_dir"] = env["PARTSWAP_OUTPUT_DIR"]
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            d["dataset"] = DatasetSpec(**d.get("dataset", {}))
            d["metric"] = MetricSpec(**d.get("metric", {"kind": "cka"}))
            if isinstance(d.get("schedules"), str):
                d["schedules"] = [d["schedules"]]
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dataset"] = self.dataset.to_dict()
        out["metric"] = asdict(self.metric)
        return out


def load_config(path, env=None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_dict(raw, env=env)


# -- report ----------------------------------------------------------------------

def aggregate(values) -> dict:
    """Median, mean and standard error; SE needs at least two values."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    out = {"n": int(v.size)}
    if v.size == 0:
        return out
    out["median"] = float(np.median(v))
    out["mean"] = float(v.mean())
    if v.size >= 2:
        out["se"] = float(v.std(ddof=1) / math.sqrt(v.size))
    return out


@dataclass
class RunReport:
    name: str
    mode: str
    task_metric: str  # accuracy (higher is better) or perplexity (lower)
    dataset: dict
    seeds: list[int]
    per_seed: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def higher_is_better(self) -> bool:
        return self.task_metric != "perplexity"

    def variants(self) -> list[str]:
        names: list[str] = []
        for rec in self.per_seed:
            names += [v for v in rec.get("variants", {}) if v not in names]
        return names

    def values(self, variant: str, key: str = "test") -> list[float]:
        out = []
        for rec in self.per_seed:
            r = rec.get("variants", {}).get(variant)
            if r and r.get("status") == "ok":
                out.append(r[key][self.task_metric])
        return out

    def summarize(self) -> None:
        agg = {v: aggregate(self.values(v)) for v in self.variants()}
        agg["guide"] = aggregate([r["guide"]["test"][self.task_metric] for r in self.per_seed if "guide" in r])
        self.aggregate = agg

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_jsonable)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "report.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


def load_report(path) -> RunReport:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunReport(**d)


# -- artifact writers ------------------------------------------------------------

class _Artifacts:
    def __init__(self, out_dir: Path, bins: int = 40):
        self.dir = out_dir
        self.bins = bins
        self.dir.mkdir(parents=True, exist_ok=True)
        self.metrics = MetricsLog()
        self.stage_lines: list[str] = []
        self.layer_rows: list[list] = []
        self.curve_rows: list[list] = []
        self.gram_rows: list[list] = []

    def add_stages(self, seed, variant, reports):
        for rep in reports:
            text = rep.to_jsonl(seed=seed, variant=variant)
            if text:
                self.stage_lines.append(text)
            for slot, v in rep.final_per_layer.items():
                self.layer_rows.append([seed, variant, rep.stage, slot, repr(float(v))])
            for r in rep.records:
                for slot, v in zip(rep.indices, r["per_layer_loss"]):
                    self.curve_rows.append([seed, variant, rep.stage, r["epoch"], r["step"], slot, repr(float(v))])

    def add_gram(self, seed, variant, model: ModuleGraph, X):
        rows = list(csv.reader(io.StringIO(gram_table(model, X, self.bins))))[1:]
        self.gram_rows += [[seed, variant] + r for r in rows]

    def flush(self):
        self.metrics.write_csv(self.dir / "metrics.csv")
        (self.dir / "stages.jsonl").write_text("\n".join(self.stage_lines) + ("\n" if self.stage_lines else ""),
                                              encoding="utf-8")
        _write_csv(self.dir / "layer_losses.csv", ["seed", "variant", "stage", "slot", "final_loss"], self.layer_rows)
        _write_csv(self.dir / "loss_curves.csv", ["seed", "variant", "stage", "epoch", "step", "slot", "loss"],
                   self.curve_rows)
        _write_csv(self.dir / "gram_hist.csv",
                   ["seed", "model", "slot", "bin_left", "bin_right", "count", "is_diagonal"], self.gram_rows)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# -- the experiment loop -----------------------------------------------------------

def _task_config(d: dict, seed: int) -> TaskConfig:
    return TaskConfig(**{**d, "seed": seed})


def _finish(model, data: Splits, cfg: ExperimentConfig, seed: int, arts: _Artifacts, phase: str) -> dict:
    """BN recalibration, then task training; returns the evaluation record."""
    after_align = evaluate(model, *data.test)
    if _has_bn(model):
        recalibrate_bn(model, data.train[0], batch_size=cfg.task.get("batch_size", 64))
    history = task_train(model, data, _task_config(cfg.task, seed), log_to=arts.metrics, phase=phase, seed=seed)
    return {
        "after_align": after_align,
        "val": evaluate(model, *data.val),
        "test": evaluate(model, *data.test),
        "epochs": len(history),
    }


def _has_bn(model) -> bool:
    return any(isinstance(m, nets.BatchNorm) for m in model.modules())


def _build_guide(cfg: ExperimentConfig, data: Splits, seed: int) -> ModuleGraph:
    g = cfg.guide
    arch = g["arch"] if "arch" in g else preset_arch(g["preset"], data, **g.get("params", {}))
    return ModuleGraph(arch, seed=seed)


def _mapping(cfg: ExperimentConfig, guide: ModuleGraph, schedule) -> ReplacementMapping:
    m = cfg.mapping
    n = len(group_boundaries(guide.k, schedule.group_size)) if schedule.grouped else guide.k
    slots = m.get("slots", "all")
    slots = range(1, n + 1) if slots == "all" else slots
    return ReplacementMapping.uniform(m["part"], slots, init=m.get("init", "random"),
                                      frozen=set(m.get("frozen", ())))


def _schedule(cfg: ExperimentConfig, kind: str, k: int):
    slots = cfg.mapping.get("slots", "all")
    if kind == "group-progressive" or slots == "all":
        return make_schedule(kind, k, group_size=cfg.group_size)
    return make_schedule(kind, k, slots=slots)


def _run_seed(cfg: ExperimentConfig, data: Splits, seed: int, arts: _Artifacts, flags: list[str]) -> dict:
    rec: dict = {"seed": seed, "variants": {}}
    t0 = time.perf_counter()
    guide = _build_guide(cfg, data, seed)
    if cfg.pretrain_guide:
        task_train(guide, data, _task_config(cfg.guide.get("train", {}), seed), log_to=arts.metrics,
                   phase="guide", seed=seed)
    else:
        guide.eval()
    rec["guide"] = {"pretrained": cfg.pretrain_guide, "val": evaluate(guide, *data.val),
                    "test": evaluate(guide, *data.test), "parameters": nets.count_parameters(guide)}
    metric_name = "perplexity" if "perplexity" in rec["guide"]["val"] else "accuracy"
    if cfg.pretrain_guide and metric_name == "accuracy" and rec["guide"]["val"]["accuracy"] < cfg.min_guide_accuracy:
        flags.append(f"seed {seed}: guide val accuracy {rec['guide']['val']['accuracy']:.3f} "
                     f"below {cfg.min_guide_accuracy}")
    if cfg.save_checkpoints:
        nets.save_checkpoint(guide, arts.dir / "checkpoints" / f"seed{seed}_guide")
    Xg = data.val[0][: cfg.gram_batch]
    arts.add_gram(seed, "guide", guide, Xg)

    target = None
    for kind in cfg.schedules:
        schedule = _schedule(cfg, kind, guide.k)
        mapping = _mapping(cfg, guide, schedule)
        target = target or (schedule, mapping)
        rec["variants"][kind] = _variant(cfg, data, seed, arts, kind, guide, mapping, schedule, "representation")
    schedule, mapping = target
    if "distill" in cfg.baselines:
        sched = _schedule(cfg, "progressive", guide.k)
        rec["variants"]["distill"] = _variant(cfg, data, seed, arts, "distill", guide,
                                              _mapping(cfg, guide, sched), sched, "distill")
    if "naive" in cfg.baselines:
        try:
            naive = ModuleGraph(target_arch(guide, mapping, schedule), seed=seed + 7919)
            task_train(naive, data, _task_config(cfg.task, seed), log_to=arts.metrics, phase="naive", seed=seed)
            rec["variants"]["naive"] = {"status": "ok", "val": evaluate(naive, *data.val),
                                        "test": evaluate(naive, *data.test),
                                        "parameters": nets.count_parameters(naive)}
            arts.add_gram(seed, "naive", naive, Xg)
        except Exception as e:  # recorded, run continues
            rec["variants"]["naive"] = _failure(e)
    rec["seconds"] = time.perf_counter() - t0
    return rec


def _variant(cfg, data, seed, arts, name, guide, mapping, schedule, objective) -> dict:
    try:
        align = AlignConfig(**{**cfg.align, "seed": seed})
        t0 = time.perf_counter()
        hybrid, reports = run_conversion(guide, mapping, schedule, cfg.metric, align, data.train[0],
                                         objective=objective)
        arts.add_stages(seed, name, reports)
        out = _finish(hybrid, data, cfg, seed, arts, phase=name)
        out.update(status="ok", seconds=time.perf_counter() - t0,
                   stages=[r.summary() for r in reports], parameters=nets.count_parameters(hybrid))
        arts.add_gram(seed, name, hybrid, data.val[0][: cfg.gram_batch])
        if cfg.save_checkpoints:
            nets.save_checkpoint(hybrid, arts.dir / "checkpoints" / f"seed{seed}_{name}")
        return out
    except Exception as e:  # recorded, run continues
        log.exception("variant %s failed for seed %s", name, seed)
        return _failure(e)


def _failure(e: Exception) -> dict:
    return {"status": "failed", "error": f"{type(e).__name__}: {e}", "traceback": traceback.format_exc()}


def run(cfg: ExperimentConfig | dict | str | Path) -> RunReport:
    """Execute an experiment; writes report.json, metrics.csv, stages.jsonl and the CSV diagnostics."""
    if isinstance(cfg, (str, Path)):
        cfg = load_config(cfg)
    elif isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    data = gen_dataset(cfg.dataset)
    arts = _Artifacts(Path(cfg.output_dir), cfg.gram_bins)
    metric = "perplexity" if cfg.dataset.kind in ("sequence-copy", "char-stream") else "accuracy"
    report = RunReport(cfg.name, cfg.mode, metric, cfg.dataset.to_dict(), list(cfg.seeds), config=cfg.to_dict())
    for seed in cfg.seeds:
        log.info("%s: seed %d", cfg.name, seed)
        try:
            report.per_seed.append(_run_seed(cfg, data, seed, arts, report.flags))
        except Exception as e:  # guide failure: keep going with the other seeds
            report.per_seed.append({"seed": seed, "variants": {}, "error": _failure(e)})
            report.flags.append(f"seed {seed}: {type(e).__name__}: {e}")
        report.summarize()
        report.write(arts.dir)  # partial artifacts survive a later crash
        arts.flush()
    return report


# -- comparison ------------------------------------------------------------------

@dataclass
class Comparison:
    rows: list[dict]
    flags: list[str]
    task_metric: str

    columns = ("rank", "report", "variant", "median", "mean", "se", "n", "seeds")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: r.get(c, "") for c in self.columns})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'rank':>4}  {'report':<24} {'variant':<18} {'median':>9} {'mean':>9} {'se':>9}  n"]
        for r in self.rows:
            se = f"{r['se']:.4f}" if r.get("se") is not None else "-"
            lines.append(f"{r['rank']:>4}  {r['report']:<24} {r['variant']:<18} {r['median']:>9.4f} "
                         f"{r['mean']:>9.4f} {se:>9}  {r['n']}")
        lines += [f"note: {f}" for f in self.flags]
        return "\n".join(lines)


def compare(reports) -> Comparison:
    """Rank every (report, variant) pair by median task metric; ties keep name order."""
    reports = [load_report(r) if isinstance(r, (str, Path)) else r for r in reports]
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    task = {(r.dataset.get("kind"), r.dataset.get("classes"), r.task_metric) for r in reports}
    if len(task) > 1:
        raise ValueError(f"reports are on different tasks: {sorted(map(str, task))}")
    metric = reports[0].task_metric
    flags = []
    seed_sets = [set(r.seeds) for r in reports]
    if any(a.isdisjoint(b) for i, a in enumerate(seed_sets) for b in seed_sets[i + 1:]):
        flags.append("reports use disjoint seeds; aggregate over the union is not computed")
    rows = []
    for r in sorted(reports, key=lambda r: r.name):
        for v in sorted(r.variants()):
            agg = aggregate(r.values(v))
            if agg["n"] == 0:
                continue
            rows.append({"report": r.name, "variant": v, "median": agg["median"], "mean": agg["mean"],
                         "se": agg.get("se"), "n": agg["n"], "seeds": " ".join(map(str, r.seeds))})
    sign = -1.0 if metric != "perplexity" else 1.0
    rows.sort(key=lambda r: sign * r["median"])  # stable: equal medians keep name order
    for i, r in enumerate(rows, start=1):
        r["rank"] = i
    return Comparison(rows, flags, metric)


def gram_table(model: ModuleGraph, X, bins: int = 40) -> str:
    """Per-slot Gram-entry histograms of ``model`` on ``X`` as one CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slot", "bin_left", "bin_right", "count", "is_diagonal"])
    for i, act in nets.tap_activations(model, X, range(1, model.k + 1)).items():
        for row in csv.reader(io.StringIO(gram_histogram(act, bins=bins).to_csv())):
            if row[0] != "bin_left":
                w.writerow([i] + row)
    return buf.getvalue()
