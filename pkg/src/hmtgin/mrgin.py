"""Relational GIN layer and the skip-connected embedding generator.

Each layer aggregates, for every node i, the sum over all edge types r
and in-neighbors j of W_r h_j, plus a (1 + eps)-scaled self transform
W_0 h_i, then applies activation, an optional MLP, batch normalization,
and a final activation. Batch statistics are computed per node type.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .multigraph import MultiRelationalGraph, Schema

BN_EPS = 1e-5
DEFAULT_SLOPE = 0.01


@dataclass
class AffineParams:
    weight: Tensor  # (d_out, d_in)
    bias: Tensor  # (d_out,)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MrginLayerParams:
    """Learnable state of one layer.

    ``rel_weights`` holds one (d_out, d_in) matrix per edge type,
    reverse types included; ``self_weight`` is the shared W_0.
    """

    rel_weights: dict[str, Tensor]
    self_weight: Tensor
    epsilon: Tensor  # rank-0
    epsilon_trainable: bool
    mlp: list[AffineParams]
    bn: BatchNormParams
    slope: float = DEFAULT_SLOPE
    dropout: float = 0.0

    @property
    def d_in(self) -> int:
        return self.self_weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.self_weight.shape[0]


def _uniform_fan_in(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def init_layer(
    schema: Schema,
    d_in: int,
    d_out: int,
    rng: np.random.Generator,
    mlp_layers: int = 1,
    epsilon_trainable: bool = False,
    slope: float = DEFAULT_SLOPE,
    dropout: float = 0.0,
) -> MrginLayerParams:
    """Fan-in scaled uniform weights, zero biases and epsilon, BN at (1, 0)."""
    rel = {
        et.name: Tensor(_uniform_fan_in(rng, d_out, d_in), requires_grad=True)
        for et in schema.edge_types
    }
    w0 = Tensor(_uniform_fan_in(rng, d_out, d_in), requires_grad=True)
    eps = Tensor(0.0, requires_grad=epsilon_trainable)
    mlp = [
        AffineParams(
            Tensor(_uniform_fan_in(rng, d_out, d_out), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True),
        )
        for _ in range(mlp_layers)
    ]
    bn = BatchNormParams(
        Tensor(np.ones(d_out), requires_grad=True),
        Tensor(np.zeros(d_out), requires_grad=True),
    )
    return MrginLayerParams(rel, w0, eps, epsilon_trainable, mlp, bn, slope, dropout)


def _layer_forward(
    g: MultiRelationalGraph,
    layer: MrginLayerParams,
    h: dict[str, Tensor],
    train: bool,
    rng: np.random.Generator | None,
) -> dict[str, Tensor]:
    for t, ht in h.items():
        if ht.shape[1] != layer.d_in:
            raise ad.ShapeError(
                f"node type {t}: width {ht.shape[1]} != layer input width {layer.d_in}"
            )
    agg = {
        t: Tensor(np.zeros((g.node_counts[t], layer.d_out)))
        for t in g.schema.node_types
    }
    for et in g.schema.edge_types:
        e = g.edges[et.name]
        if not e.shape[0]:
            continue
        msgs = ad.matmul(ad.gather_rows(h[et.src], e[:, 0]),
                         ad.transpose(layer.rel_weights[et.name]))
        agg[et.dst] = ad.scatter_add_rows(agg[et.dst], e[:, 1], msgs)

    one_plus_eps = ad.add(layer.epsilon, Tensor(1.0))
    out: dict[str, Tensor] = {}
    for t in g.schema.node_types:
        if g.node_counts[t] == 0:
            out[t] = Tensor(np.zeros((0, layer.d_out)))
            continue
        self_term = ad.mul(ad.matmul(h[t], ad.transpose(layer.self_weight)),
                           one_plus_eps)
        z = ad.leaky_relu(ad.add(agg[t], self_term), layer.slope)
        for i, aff in enumerate(layer.mlp):
            z = ad.add(ad.matmul(z, ad.transpose(aff.weight)), aff.bias)
            if i + 1 < len(layer.mlp):
                z = ad.leaky_relu(z, layer.slope)
        z = ad.batch_norm(z, layer.bn.gamma, layer.bn.beta, BN_EPS)
        z = ad.leaky_relu(z, layer.slope)
        if train and layer.dropout > 0.0:
            if rng is None:
                raise ValueError("dropout requires an rng in train mode")
            z = ad.dropout(z, layer.dropout, rng)
        out[t] = z
    return out


def mrgin_forward(
    g: MultiRelationalGraph,
    layers: list[MrginLayerParams],
    h0: dict[str, Tensor],
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> dict[str, Tensor]:
    """Run all layers; returns the final per-type node representations."""
    if not layers:
        raise ValueError("at least one layer is required")
    h = h0
    for layer in layers:
        h = _layer_forward(g, layer, h, train, rng)
    return h


def generate_embeddings(
    g: MultiRelationalGraph,
    layers: list[MrginLayerParams],
    h0: dict[str, Tensor],
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> dict[str, Tensor]:
    """Skip connection: concatenate initial features with the final layer
    output, giving width d_init + d_last per node."""
    final = mrgin_forward(g, layers, h0, train=train, rng=rng)
    return {t: ad.concat([h0[t], final[t]], axis=1) for t in g.schema.node_types}


def features_as_tensors(g: MultiRelationalGraph) -> dict[str, Tensor]:
    return {t: Tensor(g.features[t]) for t in g.schema.node_types}
