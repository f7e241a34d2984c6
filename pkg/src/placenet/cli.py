"""Command-line pipeline: generate, train, eval, sweep-frozen, explain.

Every run writes a ``run_manifest.json`` into its output directory recording
the resolved configuration, seed, inputs, outputs, wall clock, and library
version; re-running a command with the same flags reproduces its data outputs
byte-exactly (the manifest's wall clock aside). Logs go to standard error,
data to files only. Exit codes: 0 success, 1 usage, 2 data validation,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace

from placenet import __version__
from placenet.data import Dataset, load_dataset, save_dataset
from placenet.datagen import (
    BenchmarkSpec,
    PlantSpec,
    fig1_benchmark,
    generate_benchmark,
)
from placenet.errors import DataValidationError, NumericalError, PlacenetError
from placenet.explain import DEFAULT_MAX_SUBSET, permutation_importance
from placenet.training import (
    AGGREGATIONS,
    SDA,
    STRATEGIES,
    WDLR,
    StrategyConfig,
    TrainedEnsemble,
    aggregate_predictions,
    evaluate,
    load_ensemble,
    save_ensemble,
    split_dataset,
    sweep_frozen,
    train,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_STRATEGY_FLAGS = {name.replace("_", "-"): name for name in STRATEGIES}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_run_manifest(
    out_dir: str, command: str, config: dict, seed: int,
    inputs: dict, outputs: dict, started: float,
) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "wall_clock_seconds": time.time() - started,
        "version": __version__,
    }
    _atomic_write_text(
        os.path.join(out_dir, "run_manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def _resolve_manifest_path(data_path: str) -> str:
    if os.path.isdir(data_path):
        return os.path.join(data_path, "manifest.txt")
    return data_path


def _load_data(data_path: str) -> Dataset:
    return load_dataset(_resolve_manifest_path(data_path))


def _place_type_id(data: Dataset, name: str) -> int:
    if name not in data.place_type_names:
        raise DataValidationError(
            f"unknown place-type {name!r} (have {list(data.place_type_names)})"
        )
    return data.place_type_names.index(name)


def benchmark_spec_from_file(path: str) -> BenchmarkSpec:
    """Load a custom benchmark spec from JSON (names resolved to indices)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataValidationError(f"cannot read benchmark spec {path!r}: {exc}") from exc
    try:
        categories = list(raw["categories"])
        place_types = list(raw["place_types"])
        cells = []
        for cell in raw["cells"]:
            pt = cell["place_type"]
            arrangement = tuple(categories.index(c) for c in cell["arrangement"])
            cells.append(
                PlantSpec(
                    place_type=place_types.index(pt) if isinstance(pt, str) else int(pt),
                    class_label=int(cell["label"]),
                    arrangement=arrangement,
                    radius=float(cell["radius"]),
                    num_motifs=int(cell["num_motifs"]),
                    background_points=int(cell["background_points"]),
                    box=tuple(cell.get("box", (100.0, 100.0))),
                    num_categories=len(categories),
                )
            )
        return BenchmarkSpec(
            tuple(categories), tuple(place_types), tuple(cells),
            tuple(tuple(row) for row in raw["distance_matrix"]),
            float(raw["threshold"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataValidationError(f"malformed benchmark spec {path!r}: {exc}") from exc


def _cmd_generate(args) -> int:
    started = time.time()
    if args.benchmark == "fig1":
        bench = fig1_benchmark()
    else:
        bench = benchmark_spec_from_file(args.benchmark)
    dataset = generate_benchmark(bench, args.samples_per_cell, args.seed)
    manifest_path = save_dataset(dataset, args.out)
    logger.info("wrote %d samples to %s", len(dataset.samples), args.out)
    _write_run_manifest(
        args.out, "generate",
        {"benchmark": args.benchmark, "samples_per_cell": args.samples_per_cell},
        args.seed,
        {}, {"manifest": manifest_path}, started,
    )
    return EXIT_OK


def _strategy_config(args, data: Dataset) -> StrategyConfig:
    kind = _STRATEGY_FLAGS[args.strategy]
    if args.frozen_layers is not None and kind != SDA:
        raise UsageError("--frozen-layers is only valid with --strategy sda")
    if args.sda_lambda is not None and kind != SDA:
        raise UsageError("--lambda is only valid with --strategy sda")
    if args.alpha_threshold is not None and kind != WDLR:
        raise UsageError("--alpha-threshold is only valid with --strategy wdlr")
    target = (
        _place_type_id(data, args.target_place_type)
        if args.target_place_type is not None
        else None
    )
    return StrategyConfig(
        kind=kind,
        base_lr=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        k_neighbors=args.k_neighbors,
        cutoff=args.cutoff,
        num_layers=args.layers,
        hidden_dim=args.hidden,
        sda_frozen_layers=args.frozen_layers if args.frozen_layers is not None else 0,
        sda_lambda=args.sda_lambda if args.sda_lambda is not None else 1.0,
        target_place_type=target,
        aggregation=args.aggregation,
        distance_threshold=args.alpha_threshold,
    )


def _cmd_train(args) -> int:
    started = time.time()
    data = _load_data(args.data)
    config = _strategy_config(args, data)
    ensemble = train(data, config)
    os.makedirs(args.out, exist_ok=True)
    index_path = save_ensemble(ensemble, args.out)
    logger.info(
        "trained %s ensemble with %d member(s)", config.kind, len(ensemble.members)
    )
    _write_run_manifest(
        args.out, "train", asdict(config), args.seed,
        {"data": _resolve_manifest_path(args.data)},
        {"checkpoint": index_path}, started,
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    started = time.time()
    data = _load_data(args.data)
    ensemble = load_ensemble(args.checkpoint)
    splits = split_dataset(data, ensemble.config.seed)
    samples = getattr(splits, args.split)
    report = evaluate(ensemble, samples)
    mode = args.aggregation or ensemble.config.aggregation
    agg_class, agg_probs = aggregate_predictions(ensemble, samples, mode=mode)
    payload = report.to_dict()
    payload["split"] = args.split
    payload["aggregate_prediction"] = {
        "mode": mode,
        "class": agg_class,
        "probabilities": [float(p) for p in agg_probs],
    }
    out_path = args.out or os.path.join(args.checkpoint, f"eval_{args.split}.json")
    _atomic_write_text(out_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("accuracy %.4f on %s split", report.accuracy, args.split)
    _write_run_manifest(
        os.path.dirname(out_path) or ".", "eval",
        {"split": args.split, "aggregation": mode},
        ensemble.config.seed,
        {"data": _resolve_manifest_path(args.data), "checkpoint": args.checkpoint},
        {"report": out_path}, started,
    )
    return EXIT_OK


def _cmd_sweep_frozen(args) -> int:
    started = time.time()
    data = _load_data(args.data)
    config = StrategyConfig(
        kind=SDA,
        base_lr=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        k_neighbors=args.k_neighbors,
        cutoff=args.cutoff,
        num_layers=args.layers,
        hidden_dim=args.hidden,
        sda_lambda=args.sda_lambda if args.sda_lambda is not None else 1.0,
        sda_freeze_classifier=args.freeze_classifier,
    )
    rows, pretrained_report = sweep_frozen(data, config)
    os.makedirs(args.out, exist_ok=True)
    lines = ["k,accuracy,f1"]
    for k, report in rows:
        lines.append(f"{k},{report.accuracy!r},{report.f1!r}")
    table_path = os.path.join(args.out, "sweep.csv")
    _atomic_write_text(table_path, "\n".join(lines) + "\n")
    pre_path = os.path.join(args.out, "pretrained_metrics.json")
    _atomic_write_text(
        pre_path, json.dumps(pretrained_report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    logger.info("swept frozen layers 0..%d", config.num_layers)
    _write_run_manifest(
        args.out, "sweep-frozen", asdict(config), args.seed,
        {"data": _resolve_manifest_path(args.data)},
        {"table": table_path, "pretrained_metrics": pre_path}, started,
    )
    return EXIT_OK


def _cmd_explain(args) -> int:
    started = time.time()
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    data = _load_data(args.data)
    ensemble = load_ensemble(args.checkpoint)
    splits = split_dataset(data, ensemble.config.seed)
    train_samples, eval_samples = list(splits.train), list(splits.test)
    if args.place_type is not None:
        pt = _place_type_id(data, args.place_type)
        train_samples = [s for s in train_samples if s.place_type == pt]
        eval_samples = [s for s in eval_samples if s.place_type == pt]
    report = permutation_importance(
        ensemble, train_samples, eval_samples,
        repeats=args.repeats, seed=args.seed,
        layer_index=args.layer_index, max_subset=args.max_subset,
    )
    lines = ["rank,center,neighbors,importance,std"]
    for rank, entry in enumerate(report.entries, start=1):
        center = data.category_names[entry.feature.center_category]
        nbrs = "+".join(
            data.category_names[c] for c in entry.feature.neighbor_categories
        )
        lines.append(f"{rank},{center},{nbrs},{entry.importance!r},{entry.std!r}")
    out_path = args.out or os.path.join(args.checkpoint, "importance.csv")
    _atomic_write_text(out_path, "\n".join(lines) + "\n")
    logger.info(
        "baseline accuracy %.4f; top block %s", report.baseline_accuracy,
        lines[1] if len(lines) > 1 else "none",
    )
    _write_run_manifest(
        os.path.dirname(out_path) or ".", "explain",
        {
            "place_type": args.place_type, "global": args.place_type is None,
            "repeats": args.repeats, "max_subset": args.max_subset,
            "layer_index": args.layer_index,
        },
        args.seed,
        {"data": _resolve_manifest_path(args.data), "checkpoint": args.checkpoint},
        {"table": out_path}, started,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="placenet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic benchmark dataset")
    p.add_argument("--benchmark", default="fig1",
                   help="'fig1' or path to a benchmark spec JSON")
    p.add_argument("--samples-per-cell", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train", help="train an ensemble under a strategy")
    p.add_argument("--strategy", required=True, choices=sorted(_STRATEGY_FLAGS))
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--k-neighbors", type=int, default=10)
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--alpha-threshold", type=float, default=None,
                   help="distance threshold override (wdlr only)")
    p.add_argument("--frozen-layers", type=int, default=None, help="sda only")
    p.add_argument("--lambda", dest="sda_lambda", type=float, default=None,
                   help="sda divergence weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregation", choices=AGGREGATIONS, default="weighted_average")
    p.add_argument("--target-place-type", default=None,
                   help="train only this place-type's member")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--aggregation", choices=AGGREGATIONS, default=None)
    p.add_argument("--out", default=None, help="report path (JSON)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep-frozen",
                       help="train SDA for every frozen-layer count and tabulate metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--k-neighbors", type=int, default=10)
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--lambda", dest="sda_lambda", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-classifier", action="store_true",
                   help="diagnostic: freeze the classifier too, so the full-freeze "
                        "row reproduces the pre-trained model exactly")
    p.set_defaults(fn=_cmd_sweep_frozen)

    p = sub.add_parser("explain", help="permutation importance over relationship blocks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    scope = p.add_mutually_exclusive_group(required=True)
    scope.add_argument("--place-type", default=None,
                       help="restrict to one place-type (by name)")
    scope.add_argument("--global", dest="global_scope", action="store_true",
                       help="use all samples, routed to their members")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-subset", type=int, default=DEFAULT_MAX_SUBSET)
    p.add_argument("--layer-index", type=int, default=None)
    p.add_argument("--out", default=None, help="table path (CSV)")
    p.set_defaults(fn=_cmd_explain)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
