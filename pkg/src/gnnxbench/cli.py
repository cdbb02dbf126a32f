"""Command-line interface: run / explain-one / metrics-only / convert-dataset
/ validate-config."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import BenchError, ConfigError
from .experiment import (
    load_config,
    load_dataset,
    metrics_only,
    run_experiment,
)
from .explainers import make_explainer, save_mask
from .graphs import convert_content_cites, generate_synthetic, load_graph_bundle
from .models import load_checkpoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnnxbench",
        description="Benchmark how adversarial defenses affect post-hoc GNN "
                    "explanations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment grid")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides config)")
    run.add_argument("--seed", type=int, help="master seed (overrides config)")
    run.add_argument("--workers", type=int, help="parallel cell workers")
    run.add_argument("--resume", action="store_true",
                     help="skip cells whose result files already exist")

    one = sub.add_parser("explain-one",
                         help="explain a single node from a checkpoint")
    one.add_argument("--checkpoint", required=True)
    one.add_argument("--bundle", help="graph bundle directory")
    one.add_argument("--synthetic", help="JSON synthetic-dataset parameters")
    one.add_argument("--node", type=int, required=True)
    one.add_argument("--explainer", default="gnnexplainer")
    one.add_argument("--seed", type=int, default=0)
    one.add_argument("--save", help="write the mask file here")
    one.add_argument("--top", type=int, default=10,
                     help="how many mask entries to print")

    mo = sub.add_parser("metrics-only",
                        help="recompute metrics from persisted masks")
    mo.add_argument("--config", required=True)
    mo.add_argument("--out", help="results directory (overrides config)")

    conv = sub.add_parser("convert-dataset", help="produce a graph bundle")
    conv.add_argument("--format", choices=["content-cites", "npz"],
                      default="content-cites")
    conv.add_argument("--content", help="<id> <features...> <label> rows")
    conv.add_argument("--cites", help="<src> <dst> citation pairs")
    conv.add_argument("--npz", help="npz with features/edges/labels arrays")
    conv.add_argument("--out", required=True)

    val = sub.add_parser("validate-config",
                         help="check a config file without running")
    val.add_argument("--config", required=True)
    return parser


def _resolve_out(args_out, cfg_out) -> str:
    if args_out:
        return args_out
    root = os.environ.get("GNNXBENCH_OUTPUT_ROOT")
    if root:
        return str(Path(root) / cfg_out)
    return cfg_out


def _load_graph_for_cli(args):
    if args.bundle:
        return load_graph_bundle(args.bundle)
    if args.synthetic:
        params = json.loads(args.synthetic)
        return generate_synthetic(**params)
    raise ConfigError("provide --bundle or --synthetic")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    cfg.output_dir = _resolve_out(args.out, cfg.output_dir)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    results = run_experiment(cfg, resume=args.resume)
    failed = [r for r in results if r.error]
    print(f"completed {len(results) - len(failed)}/{len(results)} cells "
          f"-> {cfg.output_dir}")
    for r in failed:
        print(f"  failed: {r.cell_key}: {r.error}")
    return 0 if not failed else 1


def cmd_explain_one(args) -> int:
    graph = _load_graph_for_cli(args)
    model = load_checkpoint(args.checkpoint)
    explainer = make_explainer(args.explainer)
    mask = explainer.explain(model, graph, args.node, seed=args.seed)
    if args.save:
        save_mask(mask, args.save, header_extra={"variant": "cli"})
        print(f"mask written to {args.save}")
    print(f"target {mask.target}  support {mask.node_support.size} nodes  "
          f"active {(mask.values > 0).sum()} / {mask.values.size} entries")
    if mask.subgraph_nodes is not None:
        print(f"subgraph nodes: {mask.subgraph_nodes}")
    flat = mask.values.ravel()
    order = np.argsort(flat)[::-1][:args.top]
    width = mask.values.shape[1]
    for rank, idx in enumerate(order, start=1):
        if flat[idx] <= 0:
            break
        node = mask.node_support[idx // width]
        print(f"  #{rank} node {node} feature {idx % width}: {flat[idx]:.4f}")
    return 0


def cmd_metrics_only(args) -> int:
    cfg = load_config(args.config)
    out = _resolve_out(args.out, cfg.output_dir)
    metrics_only(cfg, out)
    print(f"metric reports recomputed -> {out}")
    return 0


def cmd_convert(args) -> int:
    if args.format == "content-cites":
        if not (args.content and args.cites):
            raise ConfigError("content-cites format needs --content and --cites")
        graph = convert_content_cites(args.content, args.cites, args.out)
    else:
        if not args.npz:
            raise ConfigError("npz format needs --npz")
        data = np.load(args.npz)
        from .graphs import Graph, save_graph_bundle
        graph = Graph(features=data["features"], edges=data["edges"],
                      labels=data["labels"],
                      num_classes=int(data["labels"].max()) + 1)
        save_graph_bundle(graph, args.out)
    print(f"bundle written to {args.out}: {graph.num_nodes} nodes, "
          f"{graph.num_edges} edges, {graph.num_features} features, "
          f"{graph.num_classes} classes")
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    graph, name = load_dataset(cfg)
    print(f"config ok: dataset {name!r} ({graph.num_nodes} nodes), "
          f"{len(cfg.architectures)} architectures x "
          f"{len(cfg.defenses)} defenses x {cfg.iterations} iterations")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {
        "run": cmd_run,
        "explain-one": cmd_explain_one,
        "metrics-only": cmd_metrics_only,
        "convert-dataset": cmd_convert,
        "validate-config": cmd_validate,
    }[args.command]
    try:
        return handler(args)
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
