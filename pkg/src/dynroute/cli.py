"""Command-line surface: corpus generation, training, evaluation, reports.

Subcommands:
    gen-data      write a synthetic corpus (PGM images + JSONL annotations)
    train         optimize on a corpus; writes checkpoint + JSONL step log
    eval          routing statistics report (CSV + human-readable summary)
    cost-report   per-sample cost CSV for a corpus under a checkpoint
    export-route  DOT or SVG diagram of one image's binarized route

Configuration is a single JSON document (schema "dynroute-config/1")
with sections supernet, budget, similarity, head, data, train; every
field has a default and unknown keys are rejected. The environment
variable DYNROUTE_SEED overrides both data and train seeds.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from .costmodel import CostReport, binary_route_cost, compile_cost_table
from .data_synth import Corpus, SynthConfig, generate_corpus, load_corpus, read_pgm, save_corpus
from .errors import ConfigurationError, DataError, DynrouteError, NumericError, UsageError
from .scale_budget import ScaleIntervals
from .supernet import NodeId, RouteRecord, SupernetSpec
from .trainer import (
    Model,
    TrainConfig,
    TrainingAborted,
    evaluate_routing,
    save_model,
    train,
    write_log,
)
from .autodiff import Tensor, load_checkpoint

SCHEMA = "dynroute-config/1"

DEFAULT_CONFIG: dict = {
    "schema": SCHEMA,
    "supernet": {
        "num_layers": 8,
        "num_scales": 4,
        "channels_per_scale": [8, 16, 32, 64],
        "gate_threshold": 1e-4,
        "head_channels": 32,
        "in_channels": 1,
    },
    "budget": {
        "strategy": "scale_dynamic",
        "c0_ratio": 0.05,
        "loss_buffer_len": 100,
    },
    "similarity": {"min_sim": 0.6, "max_sim": 0.95},
    "head": {"num_classes": 2, "tower_depth": 2},
    "data": {
        "image_size": 64,
        "num_images": 512,
        "num_classes": 2,
        "noise": 0.02,
        "seed": 7,
        "scale_boundaries": [8, 16, 32],
        "scale_mix": [
            [[1, 0, 0, 0], 0.15],
            [[0, 1, 0, 0], 0.15],
            [[0, 0, 1, 0], 0.15],
            [[0, 0, 0, 1], 0.15],
            [[1, 1, 1, 1], 0.25],
            [[1, 1, 0, 0], 0.15],
        ],
    },
    "train": {
        "batch_size": 8,
        "epochs": 12,
        "base_lr": 0.01,
        "lr_drop_epochs": [8, 11],
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "lambda1": 1.0,
        "lambda2": 1.0,
        "seed": 7,
        "regularizer_warmup_epochs": 1,
        "ramp_steps": 100,
        "pretrain_epochs": 0,
        "clip_grad_norm": 10.0,
        "lr_warmup_steps": 50,
        "router_lr_scale": 1.0,
    },
}


def _merge_section(defaults: dict, overrides: dict, path: str) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigurationError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge_section(defaults[key], value, f"{path}.{key}" if path else key)
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    """Read and validate a config file; None yields pure defaults."""
    overrides: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                overrides = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    config = _merge_section(DEFAULT_CONFIG, overrides, "")
    if config["schema"] != SCHEMA:
        raise ConfigurationError(
            f"config schema {config['schema']!r} not supported; expected {SCHEMA!r}"
        )
    env_seed = os.environ.get("DYNROUTE_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigurationError(f"DYNROUTE_SEED must be an integer, got {env_seed!r}") from exc
        config["data"]["seed"] = seed
        config["train"]["seed"] = seed
    return config


def supernet_spec_from(config: dict) -> SupernetSpec:
    s = config["supernet"]
    return SupernetSpec(
        num_layers=int(s["num_layers"]),
        num_scales=int(s["num_scales"]),
        channels_per_scale=tuple(int(c) for c in s["channels_per_scale"]),
        gate_threshold=float(s["gate_threshold"]),
        head_channels=int(s["head_channels"]),
        in_channels=int(s["in_channels"]),
    )


def intervals_from(config: dict) -> ScaleIntervals:
    return ScaleIntervals(tuple(float(b) for b in config["data"]["scale_boundaries"]))


def synth_config_from(config: dict) -> SynthConfig:
    d = config["data"]
    return SynthConfig(
        image_size=int(d["image_size"]),
        num_images=int(d["num_images"]),
        num_classes=int(d["num_classes"]),
        scale_mix=tuple((tuple(int(b) for b in p), float(w)) for p, w in d["scale_mix"]),
        noise=float(d["noise"]),
        seed=int(d["seed"]),
        boundaries=tuple(float(b) for b in d["scale_boundaries"]),
    )


def train_config_from(config: dict) -> TrainConfig:
    t = config["train"]
    b = config["budget"]
    return TrainConfig(
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        base_lr=float(t["base_lr"]),
        lr_drop_epochs=tuple(int(e) for e in t["lr_drop_epochs"]),
        momentum=float(t["momentum"]),
        weight_decay=float(t["weight_decay"]),
        budget_strategy=str(b["strategy"]),
        c0_ratio=float(b["c0_ratio"]),
        lambda1=float(t["lambda1"]),
        lambda2=float(t["lambda2"]),
        seed=int(t["seed"]),
        regularizer_warmup_epochs=int(t["regularizer_warmup_epochs"]),
        ramp_steps=int(t["ramp_steps"]),
        loss_buffer_len=int(b["loss_buffer_len"]),
        pretrain_epochs=int(t["pretrain_epochs"]),
        clip_grad_norm=float(t["clip_grad_norm"]),
        lr_warmup_steps=int(t["lr_warmup_steps"]),
        router_lr_scale=float(t["router_lr_scale"]),
    )


def model_from_config(config: dict) -> Model:
    return Model(
        spec=supernet_spec_from(config),
        intervals=intervals_from(config),
        num_classes=int(config["head"]["num_classes"]),
        tower_depth=int(config["head"]["tower_depth"]),
        seed=int(config["train"]["seed"]),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["data"]["seed"] = args.seed
    corpus = generate_corpus(synth_config_from(config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    print(f"wrote {len(corpus)} images and annotations to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    corpus = load_corpus(args.data)
    model = model_from_config(config)
    tc = train_config_from(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(model, tc, corpus)
    except TrainingAborted as exc:
        model.load_state(exc.last_good)
        save_model(out / "checkpoint.ckpt", model, config)
        write_log(exc.log, out / "train_log.jsonl")
        print(f"numeric failure: {exc}; last-good checkpoint written to {out}", file=sys.stderr)
        return 3
    save_model(out / "checkpoint.ckpt", model, config)
    write_log(result.log, out / "train_log.jsonl")
    print(f"trained {tc.epochs} epochs ({len(result.log)} steps); checkpoint in {out}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import load_model

    model, _config = load_model(args.checkpoint)
    corpus = load_corpus(args.data)
    if len(corpus) == 0:
        raise UsageError("evaluation corpus is empty")
    summary = evaluate_routing(model, corpus)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", encoding="ascii") as f:
        f.write(summary.to_csv())
    print(summary.human_summary(), end="")
    print(f"report written to {report_path}")
    return 0


def cmd_cost_report(args) -> int:
    from .trainer import load_model

    model, _config = load_model(args.checkpoint)
    corpus = load_corpus(args.data)
    if len(corpus) == 0:
        raise UsageError("corpus is empty")
    size = corpus.images.shape[1]
    table = compile_cost_table(model.spec, size, size)
    costs: list[float] = []
    for start in range(0, len(corpus), 16):
        idxs = np.arange(start, min(start + 16, len(corpus)))
        images = Tensor(corpus.images[idxs].astype(np.float64)[:, None] / 255.0)
        _, record = model.supernet.forward(images, mode="infer")
        costs.extend(binary_route_cost(record.masks, table).tolist())
    report = CostReport(
        sample_costs=[float(c) for c in costs],
        total_cost=table.total,
        router_madds=table.router_madds,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="ascii") as f:
        f.write(report.to_csv())
    print(f"cost report for {len(costs)} samples written to {out}")
    return 0


def cmd_export_route(args) -> int:
    from .trainer import load_model

    if args.format not in ("dot", "svg"):
        raise UsageError(f"unknown format {args.format!r}; expected dot or svg")
    model, _config = load_model(args.checkpoint)
    image = read_pgm(args.image).astype(np.float64) / 255.0
    images = Tensor(image[None, None, :, :])
    _, record = model.supernet.forward(images, mode="infer")
    if args.format == "dot":
        text = route_to_dot(model.spec, record)
    else:
        text = route_to_svg(model.spec, record)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="ascii") as f:
        f.write(text)
    print(f"{args.format} route diagram written to {out}")
    return 0


# ---------------------------------------------------------------------------
# diagram emitters
# ---------------------------------------------------------------------------

_DIRECTION_DELTA = {"up": -1, "keep": 0, "down": 1}


def _open_edges(spec: SupernetSpec, record: RouteRecord, sample: int = 0):
    """Yield (node, direction, gate_value, target_name) for open gates."""
    for node in record.node_ids:
        mask = record.masks[node][sample]
        gates = record.gates[node][sample]
        for j, direction in enumerate(("up", "keep", "down")):
            if not mask[j]:
                continue
            if node.layer == spec.num_layers:
                target = f"out{node.scale}"
            else:
                target = f"n{node.layer + 1}_{node.scale + _DIRECTION_DELTA[direction]}"
            yield node, direction, float(gates[j]), target


def _node_open(record: RouteRecord, node: NodeId, sample: int = 0) -> bool:
    return bool(record.masks[node][sample].any())


def route_to_dot(spec: SupernetSpec, record: RouteRecord, sample: int = 0) -> str:
    lines = [
        "digraph route {",
        "  rankdir=LR;",
        '  stem [shape=box, label="stem"];',
    ]
    for node in record.node_ids:
        name = f"n{node.layer}_{node.scale}"
        label = f"L{node.layer}/S{node.scale}"
        if _node_open(record, node, sample):
            lines.append(f'  {name} [label="{label}"];')
        else:
            lines.append(
                f'  {name} [label="{label}", style=filled, fillcolor=gray80, color=gray50];'
            )
    for s in range(spec.num_scales):
        lines.append(f'  out{s} [shape=box, label="C{3 + s}"];')
    lines.append("  stem -> n1_0;")
    for node, _direction, gate, target in _open_edges(spec, record, sample):
        lines.append(f'  n{node.layer}_{node.scale} -> {target} [label="{gate:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def route_to_svg(spec: SupernetSpec, record: RouteRecord, sample: int = 0) -> str:
    cell = 70
    pad = 40
    width = pad * 2 + (spec.num_layers + 2) * cell
    height = pad * 2 + max(spec.num_scales - 1, 1) * cell + cell

    def pos(layer: int, scale: int) -> tuple[int, int]:
        return pad + layer * cell, pad + scale * cell + cell // 2

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    sx, sy = pos(0, 0)
    x1, y1 = pos(1, 0)
    parts.append(
        f'<line x1="{sx}" y1="{sy}" x2="{x1}" y2="{y1}" stroke="black" stroke-width="1.5"/>'
    )
    for node, _direction, _gate, target in _open_edges(spec, record, sample):
        ax, ay = pos(node.layer, node.scale)
        if target.startswith("out"):
            bx, by = pos(spec.num_layers + 1, int(target[3:]))
        else:
            t_layer, t_scale = target[1:].split("_")
            bx, by = pos(int(t_layer), int(t_scale))
        parts.append(
            f'<line x1="{ax}" y1="{ay}" x2="{bx}" y2="{by}" stroke="steelblue" '
            f'stroke-width="1.5"/>'
        )
    parts.append(
        f'<rect x="{sx - 18}" y="{sy - 12}" width="36" height="24" fill="lightsteelblue" '
        f'stroke="black"/><text x="{sx}" y="{sy + 4}" text-anchor="middle" '
        f'font-size="10">stem</text>'
    )
    for node in record.node_ids:
        x, y = pos(node.layer, node.scale)
        fill = "steelblue" if _node_open(record, node, sample) else "lightgray"
        parts.append(f'<circle cx="{x}" cy="{y}" r="10" fill="{fill}" stroke="black"/>')
    for s in range(spec.num_scales):
        x, y = pos(spec.num_layers + 1, s)
        parts.append(
            f'<rect x="{x - 14}" y="{y - 10}" width="28" height="20" fill="white" '
            f'stroke="black"/><text x="{x}" y="{y + 4}" text-anchor="middle" '
            f'font-size="10">C{3 + s}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynroute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate routing statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost-report", help="per-sample cost CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("export-route", help="route diagram for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--format", default="dot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_route)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
