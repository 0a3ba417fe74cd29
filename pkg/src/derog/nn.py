"""Parameterized building blocks: linear layers, MLPs and GIN encoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, add, elementwise_mul, index_rows, matmul, relu, scatter_sum_rows

NamedParams = Iterator[tuple[str, Tensor]]


@dataclass(eq=False)
class LinearParams:
    weight: Tensor  # in x out
    bias: Tensor  # 1 x out

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "LinearParams":
        # Glorot-uniform weights, zero bias
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros((1, fan_out)), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


@dataclass(eq=False)
class MLPParams:
    layers: list[LinearParams]

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "MLPParams":
        return cls([LinearParams.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])])

    def named_parameters(self, prefix: str = "") -> NamedParams:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")


@dataclass(eq=False)
class GINLayerParams:
    eps: Tensor  # 1 x 1
    mlp: MLPParams

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "GINLayerParams":
        return cls(Tensor(np.zeros((1, 1)), requires_grad=True), MLPParams.init([d, d, d], rng))

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield prefix + "eps", self.eps
        yield from self.mlp.named_parameters(prefix + "mlp.")


@dataclass(eq=False)
class GnnParams:
    layers: list[GINLayerParams]
    proj: LinearParams | None = None

    @classmethod
    def init(cls, in_dim: int, d: int, num_layers: int, rng: np.random.Generator) -> "GnnParams":
        if num_layers < 1:
            raise DimensionError("a GNN needs at least one layer")
        proj = LinearParams.init(in_dim, d, rng) if in_dim != d else None
        return cls([GINLayerParams.init(d, rng) for _ in range(num_layers)], proj)

    @property
    def in_dim(self) -> int:
        return self.proj.in_dim if self.proj is not None else self.width

    @property
    def width(self) -> int:
        return self.layers[0].mlp.layers[0].in_dim

    def named_parameters(self, prefix: str = "") -> NamedParams:
        if self.proj is not None:
            yield from self.proj.named_parameters(prefix + "proj.")
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}layers.{i}.")


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"linear: input width {x.shape[-1]} != {p.in_dim}")
    return add(matmul(x, p.weight), p.bias)


def mlp_forward(p: MLPParams, x: Tensor) -> Tensor:
    """Linear layers with ReLU between them; the last layer stays linear."""
    h = x
    for i, layer in enumerate(p.layers):
        if i:
            h = relu(h)
        h = linear_forward(layer, h)
    return h


def gin_layer_forward(p: GINLayerParams, h: Tensor, src, dst) -> Tensor:
    """h'_v = MLP((1 + eps) h_v + sum of h_u over in-neighbours u)."""
    n, d = h.shape
    messages = index_rows(h, src)
    agg = scatter_sum_rows(messages, dst, n)
    # (1 + eps) * h, with the learnable scalar spread to a 1 x d row
    eps_row = matmul(p.eps, Tensor._wrap(np.ones((1, d))))
    self_term = add(h, elementwise_mul(h, eps_row))
    return mlp_forward(p.mlp, add(self_term, agg))


def gnn_encode(p: GnnParams, x: Tensor, src, dst) -> Tensor:
    if x.shape[1] != p.in_dim:
        raise DimensionError(f"gnn: input width {x.shape[1]} != {p.in_dim}")
    h = linear_forward(p.proj, x) if p.proj is not None else x
    for i, layer in enumerate(p.layers):
        if i:
            h = relu(h)
        h = gin_layer_forward(layer, h, src, dst)
    return h
