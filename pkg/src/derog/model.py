"""The four cooperating subnetworks and the full latent-variable forward pass.

Data flow for a batch with graph index ``gi``::

    y_tilde = softmax(MLP(readout(GNN(X))))                    pseudo-labels
    e       = readout(GRL(GNN([X, Linear(y_tilde)[gi]])))       environments
    e_own   = readout(GNN([X, Linear(y_tilde)[gi]]))            same values, no reversal
    g_hat   = sigmoid(GNN([X, e[gi], Linear(y_tilde)[gi]]))     node rationales
    h0      = [Emb(X) * g_hat, e[gi], Linear(y_tilde)[gi]]
    y_hat   = MLP(readout(GNN(h0) * g_hat))                     logits
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DimensionError
from .graph import Batch, broadcast_to_nodes, readout
from .nn import GnnParams, LinearParams, MLPParams, gnn_encode, linear_forward, mlp_forward
from .tensor import (
    Tensor,
    elementwise_mul,
    grad_reverse,
    no_tape,
    row_softmax,
    rowwise_concat,
    sigmoid,
)

PHI_GROUPS = ("phi_y_tilde", "phi_e", "phi_g_hat")
THETA_GROUP = "theta_y"


@dataclass(frozen=True)
class Dims:
    f: int
    d: int
    c: int
    num_layers: int
    env_count: int


@dataclass(eq=False)
class PseudoLabelParams:
    gnn: GnnParams
    mlp: MLPParams


@dataclass(eq=False)
class EnvParams:
    y_proj: LinearParams
    gnn: GnnParams
    head: LinearParams


@dataclass(eq=False)
class RationaleParams:
    y_proj: LinearParams
    gnn: GnnParams


@dataclass(eq=False)
class FinalParams:
    emb: LinearParams
    y_proj: LinearParams
    gnn: GnnParams
    mlp: MLPParams


def _named(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    for name in obj.__dataclass_fields__:
        part = getattr(obj, name)
        yield from part.named_parameters(f"{prefix}{name}.")


@dataclass(eq=False)
class DerogParams:
    phi_y_tilde: PseudoLabelParams
    phi_e: EnvParams
    phi_g_hat: RationaleParams
    theta_y: FinalParams
    dims: Dims

    @classmethod
    def init(cls, dims: Dims, rng: np.random.Generator) -> "DerogParams":
        f, d, c, L = dims.f, dims.d, dims.c, dims.num_layers
        return cls(
            phi_y_tilde=PseudoLabelParams(GnnParams.init(f, d, L, rng), MLPParams.init([d, d, c], rng)),
            phi_e=EnvParams(
                LinearParams.init(c, d, rng),
                GnnParams.init(f + d, d, L, rng),
                LinearParams.init(d, dims.env_count, rng),
            ),
            phi_g_hat=RationaleParams(LinearParams.init(c, d, rng), GnnParams.init(f + 2 * d, d, L, rng)),
            theta_y=FinalParams(
                LinearParams.init(f, d, rng),
                LinearParams.init(c, d, rng),
                GnnParams.init(3 * d, d, L, rng),
                MLPParams.init([d, d, c], rng),
            ),
            dims=dims,
        )

    def group(self, name: str) -> list[Tensor]:
        return [t for _, t in _named(getattr(self, name), "")]

    def groups(self) -> dict[str, list[Tensor]]:
        return {g: self.group(g) for g in (*PHI_GROUPS, THETA_GROUP)}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for g in (*PHI_GROUPS, THETA_GROUP):
            yield from _named(getattr(self, g), g + ".")


@dataclass(eq=False)
class ErmParams:
    """Plain GIN + MLP classifier used as the ERM baseline."""

    classifier: PseudoLabelParams
    dims: Dims

    @classmethod
    def init(cls, dims: Dims, rng: np.random.Generator) -> "ErmParams":
        f, d, c, L = dims.f, dims.d, dims.c, dims.num_layers
        return cls(PseudoLabelParams(GnnParams.init(f, d, L, rng), MLPParams.init([d, d, c], rng)), dims)

    def groups(self) -> dict[str, list[Tensor]]:
        return {"classifier": [t for _, t in self.named_parameters()]}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from _named(self.classifier, "classifier.")


@dataclass
class LatentState:
    y_tilde: Tensor  # |G| x c probabilities
    e: Tensor  # |G| x d
    g_hat: Tensor  # |V| x d, entries in [0, 1]
    y_hat: Tensor | None = None  # |G| x c logits
    e_own: Tensor | None = None  # e before the gradient reversal

    def env_for_own_terms(self) -> Tensor:
        """E as seen by the environment generator's own loss terms."""
        return self.e if self.e_own is None else self.e_own


def _features(batch: Batch, f: int) -> Tensor:
    if batch.node_features.shape[1] != f:
        raise DimensionError(f"batch feature width {batch.node_features.shape[1]} != model f={f}")
    return Tensor._wrap(batch.node_features)


def graph_logits(p: PseudoLabelParams, batch: Batch) -> Tensor:
    x = Tensor._wrap(batch.node_features)
    h = gnn_encode(p.gnn, x, batch.src, batch.dst)
    return mlp_forward(p.mlp, readout(h, batch.graph_index, "mean", batch.graph_count))


def infer_pseudo_labels(p: DerogParams, batch: Batch) -> Tensor:
    _features(batch, p.dims.f)
    return row_softmax(graph_logits(p.phi_y_tilde, batch))


def environment_pair(p: DerogParams, batch: Batch, y_tilde: Tensor,
                     lambda_grl: float = 1.0, use_grl: bool = True) -> tuple[Tensor, Tensor]:
    """Environment embeddings (reversed, plain); equal values, opposite env-GNN gradients."""
    if y_tilde.shape != (batch.graph_count, p.dims.c):
        raise DimensionError(f"y_tilde shape {list(y_tilde.shape)} != [{batch.graph_count}, {p.dims.c}]")
    x = _features(batch, p.dims.f)
    y_nodes = broadcast_to_nodes(linear_forward(p.phi_e.y_proj, y_tilde), batch.graph_index)
    h = gnn_encode(p.phi_e.gnn, rowwise_concat([x, y_nodes]), batch.src, batch.dst)
    plain = readout(h, batch.graph_index, "mean", batch.graph_count)
    if not use_grl:
        return plain, plain
    return readout(grad_reverse(h, lambda_grl), batch.graph_index, "mean", batch.graph_count), plain


def infer_environment(p: DerogParams, batch: Batch, y_tilde: Tensor,
                      lambda_grl: float = 1.0, use_grl: bool = True) -> Tensor:
    return environment_pair(p, batch, y_tilde, lambda_grl, use_grl)[0]


def extract_rationale(p: DerogParams, batch: Batch, e: Tensor, y_tilde: Tensor) -> Tensor:
    if e.shape != (batch.graph_count, p.dims.d):
        raise DimensionError(f"e shape {list(e.shape)} != [{batch.graph_count}, {p.dims.d}]")
    x = _features(batch, p.dims.f)
    e_nodes = broadcast_to_nodes(e, batch.graph_index)
    y_nodes = broadcast_to_nodes(linear_forward(p.phi_g_hat.y_proj, y_tilde), batch.graph_index)
    h = gnn_encode(p.phi_g_hat.gnn, rowwise_concat([x, e_nodes, y_nodes]), batch.src, batch.dst)
    return sigmoid(h)


def classify_final(p: DerogParams, batch: Batch, latents: LatentState) -> Tensor:
    x = _features(batch, p.dims.f)
    g_hat = latents.g_hat
    if g_hat.shape != (batch.node_total, p.dims.d):
        raise DimensionError(f"g_hat shape {list(g_hat.shape)} != [{batch.node_total}, {p.dims.d}]")
    fp = p.theta_y
    h0 = rowwise_concat([
        elementwise_mul(linear_forward(fp.emb, x), g_hat),
        broadcast_to_nodes(latents.e, batch.graph_index),
        broadcast_to_nodes(linear_forward(fp.y_proj, latents.y_tilde), batch.graph_index),
    ])
    h = gnn_encode(fp.gnn, h0, batch.src, batch.dst)
    pooled = readout(elementwise_mul(h, g_hat), batch.graph_index, "mean", batch.graph_count)
    return mlp_forward(fp.mlp, pooled)


def infer_latents(p: DerogParams, batch: Batch, lambda_grl: float = 1.0, use_grl: bool = True,
                  reverse_own_terms: bool = False) -> LatentState:
    """Run the three inference networks.

    The rationale extractor always consumes the reversed ``e``.  Unless
    ``reverse_own_terms`` is set, the environment generator's own loss terms
    read ``e_own`` so the generator descends them instead of ascending.
    """
    y_tilde = infer_pseudo_labels(p, batch)
    e, e_own = environment_pair(p, batch, y_tilde, lambda_grl, use_grl)
    g_hat = extract_rationale(p, batch, e, y_tilde)
    return LatentState(y_tilde, e, g_hat, e_own=None if reverse_own_terms else e_own)


def forward_full(
    p: DerogParams,
    batch: Batch,
    detach_latents: bool = False,
    lambda_grl: float = 1.0,
    use_grl: bool = True,
    noise_e: bool = False,
    noise_g_hat: bool = False,
    rng: np.random.Generator | None = None,
    reverse_own_terms: bool = False,
) -> tuple[LatentState, Tensor]:
    """Pseudo-labels -> environments -> rationales -> final logits.

    With ``detach_latents`` the inference networks run off-tape, so the final
    classifier's loss reaches only the final classifier's parameters.  The
    noise flags feed standard-normal draws to the final classifier in place
    of ``e`` / ``g_hat``; the returned latent state is always the inferred one.
    """
    if detach_latents:
        with no_tape():
            latents = infer_latents(p, batch, lambda_grl, use_grl, reverse_own_terms)
    else:
        latents = infer_latents(p, batch, lambda_grl, use_grl, reverse_own_terms)

    fed = LatentState(latents.y_tilde, latents.e, latents.g_hat, e_own=latents.e_own)
    if noise_e or noise_g_hat:
        if rng is None:
            raise ValueError("noise ablations need an rng")
        if noise_e:
            fed.e = Tensor._wrap(rng.standard_normal(latents.e.shape))
        if noise_g_hat:
            fed.g_hat = Tensor._wrap(rng.standard_normal(latents.g_hat.shape))
    y_hat = classify_final(p, batch, fed)
    latents.y_hat = y_hat
    return latents, y_hat


def erm_forward(p: ErmParams, batch: Batch) -> Tensor:
    _features(batch, p.dims.f)
    return graph_logits(p.classifier, batch)
