"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 data error. stdout carries machine-readable results only; diagnostics
go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .bench import run_scaling
from .data import load_dataset, save_dataset, synth_graph, write_edges
from .errors import ConfigError, DataError
from .model import load_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    evaluate,
    parse_config,
    train_full,
    train_minibatch,
    write_history,
)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.batch_size is not None:
        overrides["batch_size"] = str(args.batch_size)
    cfg = parse_config(args.config, overrides)
    dataset = load_dataset(args.data)
    model = cfg.build_model(dataset.num_features, dataset.n_classes)
    t0 = time.perf_counter()
    if cfg.batch_size is None:
        model, history = train_full(model, dataset, cfg)
    else:
        model, history = train_minibatch(model, dataset, cfg)
    wall_s = time.perf_counter() - t0
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "model.ckpt"))
    write_history(os.path.join(args.out, "history.csv"), history)
    best = max(history, key=lambda row: row["valid_metric"])
    result = {
        "test_metric": best["test_metric"],
        "valid_metric": best["valid_metric"],
        "epochs": len(history),
        "wall_s": wall_s,
        "config": cfg.as_dict(),
    }
    with open(os.path.join(args.out, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
        fh.write("\n")
    print(json.dumps({"test_metric": result["test_metric"], "epochs": result["epochs"]}))
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    if model.d_in != dataset.num_features or model.n_classes != dataset.n_classes:
        raise ConfigError(
            f"checkpoint dims (d_in={model.d_in}, C={model.n_classes}) do not match "
            f"dataset (d_in={dataset.num_features}, C={dataset.n_classes})"
        )
    value = evaluate(model, dataset, args.split, args.metric, chunk=args.chunk)
    print(f"{value:.6f}")
    return 0


def _parse_sizes(text: str) -> list[int]:
    sizes = []
    for token in text.split(","):
        token = token.strip().lower()
        if not token:
            continue
        mult = 1
        if token.endswith("k"):
            mult = 1024
            token = token[:-1]
        try:
            sizes.append(int(token) * mult)
        except ValueError as exc:
            raise ConfigError(f"bad node count {token!r}") from exc
    if not sizes:
        raise ConfigError("empty node list")
    return sizes


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    try:
        report = run_scaling(
            methods,
            _parse_sizes(args.nodes),
            d=args.dim,
            t_steps=args.t,
            repeats=args.repeats,
            seed=args.seed,
            mem_cap=args.mem_cap,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report.to_csv(args.out)
    print(args.out)
    return 0


def cmd_knn_build(args) -> int:
    from .data import build_edges_file

    n_edges = build_edges_file(args.features, args.k, args.metric, args.out)
    print(n_edges)
    return 0


def cmd_synth(args) -> int:
    ds = synth_graph(
        n=args.n,
        avg_degree=args.avg_degree,
        d_in=args.features,
        classes=args.classes,
        homophily=args.homophily,
        seed=args.seed,
    )
    save_dataset(ds, args.out)
    print(args.out)
    return 0


def cmd_probe(args) -> int:
    from .bench import sparsity_probe

    dataset = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    if model.d_in != dataset.num_features:
        raise ConfigError("checkpoint dims do not match dataset")
    sites = sparsity_probe(model, dataset.x)
    for name, value in sites.items():
        print(f"{name},{value:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikegt",
        description="Train, evaluate, and benchmark the dual-branch spiking graph transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--metric", default="accuracy", choices=["accuracy", "rocauc"])
    p.add_argument("--chunk", type=int, default=0, help="streaming inference chunk (0 = full)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="scaling benchmark, CSV output")
    p.add_argument("--methods", default="sga,vanilla")
    p.add_argument("--nodes", default="1k,2k,4k,8k", help="comma list, k suffix = x1024")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mem-cap", type=int, default=None, help="live-byte cap; exceeding = OOM row")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("knn-build", help="write edges.tsv from a feature file")
    p.add_argument("--features", required=True, help="features.csv to read")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--metric", default="cosine", choices=["cosine", "euclidean"])
    p.add_argument("--out", required=True, help="dataset directory to receive edges.tsv")
    p.set_defaults(fn=cmd_knn_build)

    p = sub.add_parser("synth", help="generate a planted-partition dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--avg-degree", type=float, default=10.0)
    p.add_argument("--features", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--homophily", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("probe", help="report per-site spike densities")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_probe)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(message)s")
    from .memory import tune_allocator

    tune_allocator()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, which matches the config-error code
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
