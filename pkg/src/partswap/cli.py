"""Command line entry point: ``partswap {run,compare,metric-check,gramstats,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import yaml

from . import checks, harness
from .data import DATASET_KINDS, DatasetSpec, gen_dataset
from .nets import load_checkpoint


def _cmd_run(args) -> int:
    env = dict(os.environ)
    if args.seeds:
        env["PARTSWAP_SEEDS"] = args.seeds
    if args.output_dir:
        env["PARTSWAP_OUTPUT_DIR"] = args.output_dir
    cfg = harness.load_config(args.config, env=env)
    t = time.perf_counter()
    report = harness.run(cfg)
    print(f"{report.name} [{report.mode}] seeds={report.seeds} ({time.perf_counter() - t:.0f}s)")
    for variant, agg in report.aggregate.items():
        if agg.get("n"):
            se = f" +- {agg['se']:.4f}" if "se" in agg else ""
            print(f"  {variant:<16} median {report.task_metric} {agg['median']:.4f}  mean {agg['mean']:.4f}{se}")
    failed = [(rec["seed"], v) for rec in report.per_seed for v, r in rec.get("variants", {}).items()
              if r.get("status") != "ok"]
    failed += [(rec["seed"], "guide") for rec in report.per_seed if "error" in rec]
    for seed, v in failed:
        print(f"  FAILED seed {seed}: {v}")
    for f in report.flags:
        print(f"  flag: {f}")
    print(f"artifacts in {cfg.output_dir}")
    return 1 if failed or report.flags else 0


def _cmd_compare(args) -> int:
    result = harness.compare(args.reports)
    print(result.to_text())
    if args.csv:
        Path(args.csv).write_text(result.to_csv(), encoding="utf-8")
    return 0


def _suite(results) -> int:
    print(checks.format_results(results))
    bad = sum(not r.passed for r in results)
    print(f"{len(results) - bad}/{len(results)} passed")
    return 1 if bad else 0


def _cmd_metric_check(args) -> int:
    return _suite(checks.metric_suite(seed=args.seed))


def _cmd_gradcheck(args) -> int:
    return _suite(checks.gradient_suite(seed=args.seed))


def _dataset_spec(arg: str) -> DatasetSpec:
    if arg in DATASET_KINDS:
        return DatasetSpec(kind=arg)
    raw = yaml.safe_load(Path(arg).read_text(encoding="utf-8"))
    if isinstance(raw, dict) and "dataset" in raw:  # a full experiment config
        raw = raw["dataset"]
    return DatasetSpec(**raw)


def _cmd_gramstats(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = gen_dataset(_dataset_spec(args.dataset))
    text = harness.gram_table(model, data.val[0][: args.batch], bins=args.bins)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partswap", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (YAML)")
    r.add_argument("config")
    r.add_argument("--seeds", help="comma-separated seeds, overrides the config")
    r.add_argument("--output-dir", help="overrides the config's output_dir")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="rank variants across report.json files")
    c.add_argument("reports", nargs="+")
    c.add_argument("--csv", help="also write the table as CSV")
    c.set_defaults(func=_cmd_compare)

    m = sub.add_parser("metric-check", help="similarity metrics against brute-force oracles")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=_cmd_metric_check)

    g = sub.add_parser("gradcheck", help="central-difference gradient checks of every dissimilarity")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("gramstats", help="per-slot Gram-value histograms of a checkpoint")
    s.add_argument("checkpoint", help="checkpoint path (with or without .npz)")
    s.add_argument("dataset", help=f"dataset kind ({', '.join(DATASET_KINDS)}) or a YAML file")
    s.add_argument("--bins", type=int, default=40)
    s.add_argument("--batch", type=int, default=128)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=_cmd_gramstats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
