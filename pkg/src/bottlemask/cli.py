"""Command-line surface: generate, train, eval, oracle, plot.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import infotheory, metrics, plotting, runconfig
from .archspec import ArchParseError, ShapeInferenceError
from .datasets import GENERATORS, DataError, load_dataset, save_dataset
from .maskmodel import RandomizationPolicy
from .runconfig import ConfigError
from .training import (
    TrainingDiverged,
    _as_tensors,
    load_models,
    train,
    train_baseline_classifier,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

TEST_SEED_OFFSET = 7919


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bottlemask",
        description="Learn boolean saliency masks by trading compression against prediction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset directory")
    p.add_argument("dataset", choices=sorted(GENERATORS))
    p.add_argument("count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train from a run config and/or flags")
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--dataset", help="dataset name (overrides config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--objective", choices=["ib", "ceb", "cond-ib"])
    p.add_argument("--beta-mode", choices=["fixed", "adaptive", "grad-gate"])
    p.add_argument("--vae-target")
    p.add_argument("--randomize", choices=["on", "off"])
    p.add_argument("--steps", type=int)
    p.add_argument("--count", type=int, help="training sample count")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset name or directory")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--randomized", action="store_true",
                   help="also evaluate under grown masks, per category")
    p.add_argument("--baseline-steps", type=int,
                   help="step budget for the raw-image baseline (default: run's)")

    p = sub.add_parser("oracle", help="run the exact-enumeration identity suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--worlds", type=int, default=20)
    p.add_argument("--out")

    p = sub.add_parser("plot", help="emit figures for a finished run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--samples", type=int, default=8)
    return parser


def _items_from_args(args) -> dict[str, str]:
    items: dict[str, str] = {}
    if args.config:
        items.update(runconfig.parse_config_text(Path(args.config).read_text()))
    if args.dataset:
        items["dataset.name"] = args.dataset
    if args.seed is not None:
        items["train.seed"] = str(args.seed)
        items.setdefault("dataset.seed", str(args.seed))
    if args.objective:
        items["train.objective"] = args.objective
    if args.beta_mode:
        items["beta.mode"] = args.beta_mode.replace("-", "_")
    if args.vae_target:
        items["beta.vae_target"] = args.vae_target
    if args.randomize:
        items["randomize.enabled"] = args.randomize
    if args.steps is not None:
        items["train.steps"] = str(args.steps)
    if args.count is not None:
        items["dataset.count"] = str(args.count)
    if args.out:
        items["out.dir"] = args.out
    return items


def _materialize_datasets(run: runconfig.RunConfig):
    if run.dataset_path:
        full = load_dataset(run.dataset_path)
        split = int(0.8 * len(full))
        order = np.arange(len(full))
        return full.subset(order[:split]), full.subset(order[split:])
    generator = GENERATORS.get(run.dataset_name)
    if generator is None:
        raise ConfigError(f"unknown dataset name {run.dataset_name!r}")
    train_ds = generator(run.dataset_count, run.dataset_seed)
    test_ds = generator(run.dataset_test_count, run.dataset_seed + TEST_SEED_OFFSET)
    return train_ds, test_ds


def cmd_generate(args) -> int:
    generator = GENERATORS[args.dataset]
    dataset = generator(args.count, args.seed)
    out = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    items = _items_from_args(args)
    run = runconfig.build_run_config(items)
    if not run.out_dir:
        run.out_dir = f"runs/{run.dataset_name or 'dataset'}-{run.train.objective}-s{run.train.seed}"
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(runconfig.format_config(run.resolved_items()))

    train_ds, test_ds = _materialize_datasets(run)
    started = time.time()
    result = train(run.train, train_ds, out_dir=out_dir, test_dataset=test_ds)
    final = result.log.last_eval() or {}
    print(f"finished {run.train.steps} steps in {time.time() - started:.1f}s; "
          f"test accuracy {final.get('accuracy', float('nan')):.3f}; "
          f"checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    models = load_models(args.checkpoint).eval_mode()
    config = models.config

    dataset_arg = args.dataset
    if Path(dataset_arg).exists():
        dataset = load_dataset(dataset_arg)
    else:
        generator = GENERATORS.get(dataset_arg)
        if generator is None:
            raise ConfigError(f"unknown dataset {dataset_arg!r} (no such name or directory)")
        dataset = generator(args.count, args.seed + TEST_SEED_OFFSET)
    images, labels = _as_tensors(dataset)

    baseline_ds = None
    if Path(dataset_arg).exists():
        baseline_ds = dataset
    else:
        baseline_ds = GENERATORS[dataset_arg](args.count, args.seed)
    baseline = train_baseline_classifier(config, baseline_ds, dataset,
                                         steps=args.baseline_steps)

    from .io import MetricLog
    log_path = Path(args.checkpoint).parent / "metrics.jsonl"
    log = MetricLog.load(log_path) if log_path.exists() else MetricLog()

    report = metrics.acceptance_report(
        models, log, images, labels,
        baseline_accuracy=baseline["accuracy"],
        seed=args.seed,
    )
    if args.randomized:
        policy = RandomizationPolicy(enabled=True, rect_count=config.rect_count,
                                     rect_size_range=config.rect_size_range)
        report["randomized"] = metrics.randomized_mask_accuracy(
            models, images, labels, policy, seed=args.seed + 1,
        )
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    started = time.time()
    reports = infotheory.run_oracle_suite(args.seed, n_worlds=args.worlds)
    passed = infotheory.suite_passed(reports)
    worst: dict[str, float] = {}
    for r in reports:
        if "max_deviation" in r:
            worst[r["check"]] = max(worst.get(r["check"], 0.0), r["max_deviation"])
    for check, dev in sorted(worst.items()):
        print(f"{check}: max deviation {dev:.3e}")
    probes = [r for r in reports if r["check"] == "growth_monotonicity_probe"]
    if probes:
        ok = sum(p["satisfied"] for p in probes)
        print(f"growth_monotonicity_probe: ordering held in {ok}/{len(probes)} sampled worlds")
    print(f"{'PASS' if passed else 'FAIL'} ({len(reports)} records, {time.time() - started:.1f}s)")
    if args.out:
        with open(args.out, "w") as fh:
            for r in reports:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK if passed else 1


def cmd_plot(args) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config.resolved"
    if not config_path.exists():
        raise DataError(f"no resolved config at {config_path}")
    items = runconfig.parse_config_text(config_path.read_text())
    run = runconfig.build_run_config(items)
    models = load_models(run_dir / "checkpoint").eval_mode()
    out_dir = Path(args.out) if args.out else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)

    _, test_ds = _materialize_datasets(run)
    images, labels = _as_tensors(test_ds)
    masks = metrics.collect_masks(models, images, seed=run.train.seed)

    sample = slice(0, args.samples)
    plotting.save_mask_grid(test_ds.images[sample],
                            masks[sample].numpy(),
                            out_dir / "masks.png")
    stats = metrics.mask_l1_stats(masks, labels, test_ds.n_classes)
    plotting.save_l1_histograms(stats, out_dir / "l1_hist.png", out_dir / "l1_hist.csv")

    pairs = _region_pairs(test_ds, masks)
    if pairs:
        plotting.save_region_summary(pairs, out_dir / "regions.png")
    print(f"figures in {out_dir}")
    return EXIT_OK


def _region_pairs(dataset, masks) -> dict[str, tuple[float, float]]:
    """Inside/outside visible fractions from whatever region metadata exists."""
    inside_vals: dict[str, list[tuple[float, float]]] = {}
    for idx, meta in enumerate(dataset.meta):
        region = None
        group = None
        if meta.get("bbox"):
            region = metrics.BboxRegion(*meta["bbox"])
            group = "anomaly"
        elif meta.get("small_center"):
            cy, cx = meta["small_center"]
            region = metrics.DiskRegion(cy, cx, 8.0)
            group = "small digit"
        elif meta.get("number_bbox"):
            y0, x0, h, w = meta["number_bbox"]
            region = metrics.BboxRegion(int(y0), int(x0), int(h), int(w))
            group = "number"
        if region is None:
            continue
        try:
            pair = metrics.region_average(masks[idx], region)
        except ValueError:
            continue
        inside_vals.setdefault(group, []).append(pair)
    return {
        group: (float(np.mean([p[0] for p in pairs])), float(np.mean([p[1] for p in pairs])))
        for group, pairs in inside_vals.items()
    }


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "oracle": cmd_oracle,
        "plot": cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ArchParseError, ShapeInferenceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
