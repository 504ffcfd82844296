"""Command-line driver: data generation, training, evaluation, gradient
checking, and loss-curve export.

Exit codes are stable: 0 success, 2 usage or spec error, 3 numeric
failure during training, 4 artifact mismatch, 5 gradient-check failure.
Setting HMTGIN_THREADS=1 pins the BLAS thread pools for bit-exact
reproducibility.
"""

import os
import sys

if os.environ.get("HMTGIN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["HMTGIN_THREADS"])

import argparse
from dataclasses import fields
from pathlib import Path

import numpy as np

from .metrics import evaluate_all
from .model import CheckpointError, build_model, model_from_checkpoint
from .multigraph import GraphFormatError, GraphInvariantError, load_graph, save_graph
from .tasks import (
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    load_tasks,
    save_tasks,
    save_truth,
)
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingError,
    build_constraints,
    extract_embeddings,
    load_config,
    run_gradcheck,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_ARTIFACT = 4
EXIT_GRADCHECK = 5


class UsageError(ValueError):
    pass


def load_spec(path) -> SyntheticSpec:
    """Generator spec file: flat ``key = value`` lines over the
    SyntheticSpec field names."""
    spec = SyntheticSpec()
    casts = {f.name: type(getattr(spec, f.name)) for f in fields(SyntheticSpec)}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in casts:
                raise UsageError(f"{path}:{line_no}: unknown key {key!r}")
            try:
                setattr(spec, key, casts[key](value))
            except ValueError:
                raise UsageError(f"{path}:{line_no}: bad value {value!r}") from None
    spec.validate()
    return spec


def cmd_generate(args) -> int:
    spec = load_spec(args.spec) if args.spec else SyntheticSpec()
    data = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(data.graph, out / "graph.mrg")
    save_tasks(data.tasks, out / "tasks")
    save_truth(data.truth, out / "ground_truth.txt")
    print(f"graph: {sum(data.graph.node_counts.values())} nodes")
    for t in data.graph.schema.node_types:
        print(f"  {t}: {data.graph.node_counts[t]}")
    n_edges = sum(e.shape[0] for e in data.graph.edges.values())
    print(f"  edges: {n_edges} across {len(data.graph.schema.edge_types)} types")
    for name in sorted(data.tasks):
        print(f"task {name}: {data.tasks[name].n_samples} samples")
    for name in data.disabled:
        print(f"task {name}: disabled (no samples)")
    return EXIT_OK


def _load_artifacts(graph_path, tasks_dir):
    g = load_graph(graph_path)
    tasks = load_tasks(tasks_dir)
    for task in tasks.values():
        if task.kind == "classification":
            task.n_classes = int(task.samples.labels.max()) + 1
    return g, tasks


def cmd_train(args) -> int:
    g, tasks = _load_artifacts(args.graph, args.tasks)
    cfg = load_config(args.config) if args.config else TrainConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_dir = str(out)
    d_init = _shared_width(g)
    model = build_model(
        g.schema, d_init, tasks, cfg.seed, hidden_dim=cfg.hidden_dim,
        num_layers=cfg.num_layers, mlp_layers=cfg.mlp_layers,
        epsilon_trainable=cfg.epsilon_trainable, dropout=cfg.dropout,
        slope=cfg.slope, positive_weight=cfg.positive_weight,
    )
    constraints = build_constraints(g, tasks)
    history = train(g, model, tasks, constraints, cfg)
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(history.csv_lines()) + "\n")
    last = history.records[-1]
    print(f"trained {cfg.epochs} epochs; final total loss "
          f"{last.total:.6f}, dev average {last.dev_average:.4f}")
    print(f"checkpoints and history in {out}")
    return EXIT_OK


def _shared_width(g) -> int:
    widths = {g.features[t].shape[1] for t in g.schema.node_types}
    if len(widths) != 1:
        raise DatasetError(
            f"node types carry different feature widths {sorted(widths)}; "
            "the model needs one shared width"
        )
    return widths.pop()


def cmd_eval(args) -> int:
    if args.split not in ("train", "dev", "test"):
        raise UsageError(f"unknown split {args.split!r}")
    g, tasks = _load_artifacts(args.graph, args.tasks)
    model = model_from_checkpoint(args.checkpoint, g.schema, _shared_width(g), tasks)
    report = evaluate_all(extract_embeddings(g, model), tasks, model.heads,
                          args.split)
    print(report.table())
    for line in report.machine_lines():
        print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    g, tasks = _load_artifacts(args.graph, args.tasks)
    cfg = load_config(args.config) if args.config else TrainConfig()
    model = build_model(
        g.schema, _shared_width(g), tasks, cfg.seed, hidden_dim=cfg.hidden_dim,
        num_layers=cfg.num_layers, mlp_layers=cfg.mlp_layers,
        epsilon_trainable=cfg.epsilon_trainable, slope=cfg.slope,
        positive_weight=cfg.positive_weight,
    )
    constraints = build_constraints(g, tasks)
    report = run_gradcheck(g, model, tasks, constraints, cfg,
                           step=args.step, tolerance=args.tolerance)
    print(report)
    if not report.passed:
        worst = max(report.rows, key=lambda r: r.max_rel_err)
        print(f"FAILED: {worst.group} coord {worst.worst_coord} under "
              f"{worst.worst_loss}: rel err {worst.max_rel_err:.3e} "
              f"> {report.tolerance:g}")
        return EXIT_GRADCHECK
    print(f"all {len(report.rows)} parameter groups within {report.tolerance:g}")
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.history, "r", encoding="utf-8") as fh:
        rows = [line.split(",") for line in fh.read().splitlines() if line]
    if not rows:
        raise UsageError(f"{args.history}: empty history")
    task_names = None
    if args.tasks:
        task_names = sorted(load_tasks(args.tasks))
    n_cols = len(rows[0])
    if task_names is not None:
        n_tasks = len(task_names)
        n_constraints = n_cols - 3 - n_tasks
        if n_constraints not in (0, 2):
            raise UsageError(
                f"history has {n_cols} columns, inconsistent with {n_tasks} tasks"
            )
    else:
        # without task names, assume both constraints were recorded
        n_constraints = 2 if n_cols >= 6 else 0
        n_tasks = n_cols - 3 - n_constraints
    if n_tasks < 1:
        raise UsageError(f"history has too few columns ({n_cols})")
    series = (task_names or [f"task_{i + 1}" for i in range(n_tasks)])
    series += [f"constraint_{i + 1}" for i in range(n_constraints)]
    series += ["total", "dev_average"]
    lines = ["epoch,series,value"]
    for row in rows:
        if len(row) != n_cols:
            raise UsageError(f"{args.history}: ragged row {row[0]}")
        for name, value in zip(series, row[1:]):
            lines.append(f"{row[0]},{name},{value}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {len(lines) - 1} rows to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmtgin",
        description="multi-task training on multi-relational CQA graphs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a synthetic graph and task files")
    p.add_argument("--spec", help="generator spec file (key = value lines)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="run the joint training loop")
    p.add_argument("--graph", required=True)
    p.add_argument("--tasks", required=True, help="directory of .task files")
    p.add_argument("--config", help="training config file")
    p.add_argument("--out", required=True, help="checkpoint/history directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--graph", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--graph", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--config", help="training config file")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = sub.add_parser("report", help="reshape a history CSV for plotting")
    p.add_argument("--history", required=True)
    p.add_argument("--tasks", help="task directory, to name the loss columns")
    p.add_argument("--out", help="output CSV (default: stdout)")

    return parser


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (UsageError, ConfigError, DatasetError, GraphFormatError,
            GraphInvariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except CheckpointError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
