"""Model parameter container, the parameter registry, and the textual
checkpoint format.

Checkpoints list one tensor per block in registry order:
``tensor <name> <rank> <extents...>`` followed by the row-major values,
one row per line, formatted %.17g so float64 round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .heads import (
    ClfTaskParams,
    LinkTaskParams,
    RankTaskParams,
    init_clf_params,
    init_link_params,
    init_rank_params,
)
from .mrgin import MrginLayerParams, init_layer
from .multigraph import Schema
from .tasks import CLASSIFICATION, LINK, RANKING, TaskSpec


class CheckpointError(ValueError):
    """Checkpoint unreadable or inconsistent with the graph/tasks."""


@dataclass
class ModelParams:
    """All learnable state: the stacked layers plus one head per task."""

    layers: list[MrginLayerParams]
    heads: dict[str, LinkTaskParams | RankTaskParams | ClfTaskParams]
    d_init: int = 0

    @property
    def embedding_width(self) -> int:
        return self.d_init + self.layers[-1].d_out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Registry order: layers (relation weights in schema order, self
        weight, epsilon, mlp, bn) then heads by task name."""
        out: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}"
            for name, w in layer.rel_weights.items():
                out.append((f"{p}.W.{name}", w))
            out.append((f"{p}.W0", layer.self_weight))
            out.append((f"{p}.epsilon", layer.epsilon))
            for j, aff in enumerate(layer.mlp):
                out.append((f"{p}.mlp.{j}.W", aff.weight))
                out.append((f"{p}.mlp.{j}.b", aff.bias))
            out.append((f"{p}.bn.gamma", layer.bn.gamma))
            out.append((f"{p}.bn.beta", layer.bn.beta))
        for name in sorted(self.heads):
            head = self.heads[name]
            p = f"heads.{name}"
            if isinstance(head, LinkTaskParams):
                out.append((f"{p}.D", head.diag))
            elif isinstance(head, RankTaskParams):
                out.append((f"{p}.w", head.w))
                out.append((f"{p}.b", head.b))
            else:
                out.append((f"{p}.W", head.W))
                out.append((f"{p}.b", head.b))
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable subset of the registry (epsilon only when trainable)."""
        out = []
        for name, t in self.named_tensors():
            if name.endswith(".epsilon"):
                layer = self.layers[int(name.split(".")[1])]
                if not layer.epsilon_trainable:
                    continue
            out.append((name, t))
        return out

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None


def build_model(
    schema: Schema,
    d_init: int,
    tasks: dict[str, TaskSpec],
    seed: int,
    hidden_dim: int = 16,
    num_layers: int = 1,
    mlp_layers: int = 1,
    epsilon_trainable: bool = False,
    dropout: float = 0.0,
    slope: float = 0.01,
    positive_weight: float = 2.0,
) -> ModelParams:
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(num_layers):
        layers.append(
            init_layer(schema, d_init if i == 0 else hidden_dim, hidden_dim, rng,
                       mlp_layers=mlp_layers, epsilon_trainable=epsilon_trainable,
                       slope=slope, dropout=dropout)
        )
    k = d_init + hidden_dim
    heads: dict[str, LinkTaskParams | RankTaskParams | ClfTaskParams] = {}
    for name in sorted(tasks):
        task = tasks[name]
        if task.kind == LINK:
            heads[name] = init_link_params(k, rng, positive_weight)
        elif task.kind == RANKING:
            heads[name] = init_rank_params(k, rng, slope)
        elif task.kind == CLASSIFICATION:
            n_classes = task.n_classes or int(task.samples.labels.max()) + 1
            heads[name] = init_clf_params(k, n_classes, rng)
        else:
            raise ValueError(f"unknown task kind {task.kind!r}")
    return ModelParams(layers, heads, d_init)


# ---------------------------------------------------------------------------
# checkpoint io


def _fmt(v: float) -> str:
    return "%.17g" % v


def save_checkpoint(model: ModelParams, path) -> None:
    lines = []
    for name, t in model.named_tensors():
        extents = " ".join(str(e) for e in t.shape)
        header = f"tensor {name} {t.ndim}"
        lines.append(f"{header} {extents}" if extents else header)
        if t.ndim <= 1:
            lines.append(" ".join(_fmt(v) for v in np.atleast_1d(t.data)))
        else:
            flat = t.data.reshape(t.shape[0], -1)
            for row in flat:
                lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out: list[tuple[str, np.ndarray]] = []
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) < 3 or parts[0] != "tensor":
            raise CheckpointError(f"{path}: bad tensor header at line {i + 1}")
        name, rank = parts[1], int(parts[2])
        extents = tuple(int(v) for v in parts[3:])
        if len(extents) != rank:
            raise CheckpointError(f"{path}: rank/extent mismatch for {name}")
        i += 1
        n_lines = extents[0] if rank >= 2 else 1
        values: list[float] = []
        for _ in range(n_lines):
            if i >= len(lines):
                raise CheckpointError(f"{path}: truncated block for {name}")
            values.extend(float(v) for v in lines[i].split())
            i += 1
        arr = np.asarray(values, dtype=np.float64)
        expected = int(np.prod(extents)) if extents else 1
        if arr.size != expected:
            raise CheckpointError(f"{path}: value count mismatch for {name}")
        out.append((name, arr.reshape(extents)))
    return out


def restore_model(model: ModelParams, path) -> None:
    """Load a checkpoint into an existing model; names and shapes must
    match the registry exactly."""
    stored = load_checkpoint(path)
    registry = model.named_tensors()
    if [n for n, _ in stored] != [n for n, _ in registry]:
        raise CheckpointError(
            f"{path}: parameter registry mismatch "
            f"(checkpoint has {len(stored)} tensors, model has {len(registry)})"
        )
    for (name, arr), (_, t) in zip(stored, registry):
        if arr.shape != t.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: {arr.shape} vs {t.shape}"
            )
        t.data = np.ascontiguousarray(arr)


def model_from_checkpoint(
    path, schema: Schema, d_init: int, tasks: dict[str, TaskSpec]
) -> ModelParams:
    """Rebuild a model purely from checkpoint tensor names and shapes,
    then validate it against the graph schema and task set."""
    stored = load_checkpoint(path)
    names = [n for n, _ in stored]
    layer_ids = sorted({int(n.split(".")[1]) for n in names if n.startswith("layers.")})
    if layer_ids != list(range(len(layer_ids))) or not layer_ids:
        raise CheckpointError(f"{path}: missing or non-contiguous layer blocks")
    lookup = dict(stored)
    hidden_dim = lookup["layers.0.W0"].shape[0]
    num_layers = len(layer_ids)
    mlp_layers = len({n for n in names if n.startswith("layers.0.mlp.")}) // 2
    model = build_model(
        schema, d_init, tasks, seed=0, hidden_dim=hidden_dim,
        num_layers=num_layers, mlp_layers=mlp_layers,
    )
    restore_model(model, path)
    expected_edges = {et.name for et in schema.edge_types}
    stored_edges = {n.split(".", 3)[3] for n in names
                    if n.startswith("layers.0.W.")}
    if stored_edges != expected_edges:
        raise CheckpointError(
            f"{path}: relation weights {sorted(stored_edges)} do not match "
            f"schema edge types {sorted(expected_edges)}"
        )
    return model
