"""Loss terms for the E-step (entropy, environment alignment, contrastive) and M-step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .graph import Batch
from .model import LatentState
from .nn import LinearParams, linear_forward
from .tensor import (
    Tensor,
    add,
    elementwise_mul,
    exp,
    index_rows,
    log,
    mean_all,
    row_softmax,
    scalar_mul,
    scatter_sum_rows,
    sub,
    sum_rows,
)


@dataclass
class LossWeights:
    lambda_g_hat: float = 0.01
    lambda_e: float = 0.01
    lambda_y_tilde: float = 0.1
    lambda_env: float = 0.1
    lambda_cl: float = 0.1
    k: int = 2
    tau: float = 0.1
    cl_include_positive: bool = False

    def validate(self) -> None:
        for name in ("lambda_g_hat", "lambda_e", "lambda_y_tilde", "lambda_env", "lambda_cl"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a finite non-negative number, got {v}")
        if int(self.k) < 1:
            raise ConfigError("k must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def _const(arr) -> Tensor:
    return Tensor._wrap(np.asarray(arr, dtype=np.float64))


def _zero() -> Tensor:
    return _const(np.zeros(1))


# ---------------------------------------------------------------------------
# entropies


def categorical_entropy(rows: Tensor) -> Tensor:
    """Entropy in nats of each probability row, as an m x 1 column."""
    p = rows.data
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("categorical_entropy: rows must be probability vectors")
    return scalar_mul(sum_rows(elementwise_mul(rows, log(rows))), -1.0)


def _bernoulli_entropy(matrix: Tensor) -> Tensor:
    p = matrix.data
    if np.any(p < -1e-9) or np.any(p > 1.0 + 1e-9):
        raise ValidationError("bernoulli entropy: entries must lie in [0, 1]")
    q = sub(_const(np.ones(matrix.shape)), matrix)
    return scalar_mul(add(elementwise_mul(matrix, log(matrix)), elementwise_mul(q, log(q))), -1.0)


def bernoulli_entropy_mean(matrix: Tensor, graph_index=None, num_graphs: int | None = None) -> Tensor:
    """Mean per-entry Bernoulli entropy, per graph (|G| x 1) or overall ([1])."""
    h = _bernoulli_entropy(matrix)
    if graph_index is None:
        return mean_all(h)
    graph_index = np.asarray(graph_index, dtype=np.int64)
    if num_graphs is None:
        num_graphs = int(graph_index[-1]) + 1
    per_graph = scatter_sum_rows(sum_rows(h), graph_index, num_graphs)
    entries = np.bincount(graph_index, minlength=num_graphs) * matrix.shape[1]
    return elementwise_mul(per_graph, _const((1.0 / entries)[:, None]))


def _weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor | None:
    total = None
    for w, t in terms:
        if w == 0:
            continue
        term = scalar_mul(t, w)
        total = term if total is None else add(total, term)
    return total


def e_step_loss_v1(latents: LatentState, weights: LossWeights, batch: Batch) -> Tensor:
    """Batch mean of -lg*H(g_hat) - le*H(softmax(e)) - ly*H(y_tilde); minimizing raises entropy."""
    G = batch.graph_count
    terms = []
    if weights.lambda_g_hat:
        terms.append((-weights.lambda_g_hat,
                      bernoulli_entropy_mean(latents.g_hat, batch.graph_index, G)))
    if weights.lambda_e:
        terms.append((-weights.lambda_e, categorical_entropy(row_softmax(latents.env_for_own_terms()))))
    if weights.lambda_y_tilde:
        terms.append((-weights.lambda_y_tilde, categorical_entropy(latents.y_tilde)))
    total = _weighted_sum(terms)
    return _zero() if total is None else mean_all(total)


def kl_gaussian_prior_loss(latents: LatentState, weights: LossWeights, batch: Batch) -> Tensor:
    """KL-to-prior replacement of the entropy terms.

    Priors: N(0, I) for each environment row (unit-variance posterior), the
    uniform distribution for pseudo-labels and Bernoulli(1/2) per rationale
    entry.
    """
    G = batch.graph_count
    c = latents.y_tilde.shape[1]
    terms = []
    if weights.lambda_g_hat:
        h = bernoulli_entropy_mean(latents.g_hat, batch.graph_index, G)
        terms.append((weights.lambda_g_hat, sub(_const(np.full((G, 1), math.log(2.0))), h)))
    if weights.lambda_e:
        e = latents.env_for_own_terms()
        terms.append((weights.lambda_e, scalar_mul(sum_rows(elementwise_mul(e, e)), 0.5)))
    if weights.lambda_y_tilde:
        h = categorical_entropy(latents.y_tilde)
        terms.append((weights.lambda_y_tilde, sub(_const(np.full((G, 1), math.log(c))), h)))
    total = _weighted_sum(terms)
    return _zero() if total is None else mean_all(total)


# ---------------------------------------------------------------------------
# cross-entropy terms


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target], computed in log-sum-exp form."""
    targets = np.asarray(targets, dtype=np.int64)
    m, c = logits.shape
    if targets.shape != (m,):
        raise ValidationError(f"cross_entropy: {targets.shape[0]} targets for {m} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValidationError(f"cross_entropy: target outside [0, {c})")
    shift = logits.data.max(axis=1, keepdims=True)
    z = sub(logits, _const(np.broadcast_to(shift, (m, c))))
    lse = log(sum_rows(exp(z)))
    onehot = np.zeros((m, c))
    onehot[np.arange(m), targets] = 1.0
    picked = sum_rows(elementwise_mul(z, _const(onehot)))
    return mean_all(sub(lse, picked))


def m_step_loss(y_hat_logits: Tensor, labels) -> Tensor:
    return cross_entropy(y_hat_logits, labels)


def env_alignment_loss(e: Tensor, env_head: LinearParams, env_ids) -> Tensor:
    env_ids = np.asarray(env_ids, dtype=np.int64)
    if env_ids.size and (env_ids.min() < 0 or env_ids.max() >= env_head.out_dim):
        raise ValidationError(f"env id outside [0, {env_head.out_dim})")
    return cross_entropy(linear_forward(env_head, e), env_ids)


# ---------------------------------------------------------------------------
# contrastive rationale loss


@dataclass
class ContrastiveSets:
    """Per eligible graph: anchor, positive and negative nodes (batch-level indices)."""

    graphs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    positives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    negatives: list[np.ndarray] = field(default_factory=list)
    halves: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.anchors)


def rank_halves(scores: np.ndarray, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``nodes`` by descending score; the top half gets ceil(n/2) nodes."""
    order = np.argsort(-scores, kind="stable")
    cut = (len(nodes) + 1) // 2
    return nodes[order[:cut]], nodes[order[cut:]]


def sample_contrastive_sets(g_hat, graph_index, k: int, rng: np.random.Generator) -> ContrastiveSets:
    if k < 1:
        raise ConfigError("k must be >= 1")
    values = g_hat.data if isinstance(g_hat, Tensor) else np.asarray(g_hat)
    graph_index = np.asarray(graph_index, dtype=np.int64)
    scores = np.abs(values).sum(axis=1)
    sets = ContrastiveSets()
    graphs, anchors, positives = [], [], []
    bounds = np.flatnonzero(np.diff(np.concatenate([[-1], graph_index, [graph_index[-1] + 1]])))
    for start, stop in zip(bounds[:-1], bounds[1:]):
        nodes = np.arange(start, stop)
        top, bottom = rank_halves(scores[start:stop], nodes)
        v1 = int(nodes[rng.integers(0, len(nodes))])
        same, other = (top, bottom) if v1 in top else (bottom, top)
        if len(same) < 2 or len(other) == 0:
            sets.skipped += 1
            continue
        candidates = same[same != v1]
        v2 = int(candidates[rng.integers(0, len(candidates))])
        neg = rng.choice(other, size=min(k, len(other)), replace=False)
        graphs.append(int(graph_index[start]))
        anchors.append(v1)
        positives.append(v2)
        sets.negatives.append(np.asarray(neg, dtype=np.int64))
        sets.halves.append((top, bottom))
    sets.graphs = np.array(graphs, dtype=np.int64)
    sets.anchors = np.array(anchors, dtype=np.int64)
    sets.positives = np.array(positives, dtype=np.int64)
    return sets


def contrastive_loss(g_hat: Tensor, sets: ContrastiveSets, tau: float,
                     include_positive: bool = False) -> Tensor:
    """Mean over graphs of -log( exp(a.p/tau) / sum_j exp(a.n_j/tau) ).

    By default the positive pair is absent from the denominator, so the loss
    can be negative.  Returns a constant zero when ``sets`` is empty.
    """
    if len(sets) == 0:
        return _zero()
    m = len(sets)
    owner = np.concatenate([np.full(len(n), i, dtype=np.int64) for i, n in enumerate(sets.negatives)])
    neg_nodes = np.concatenate(sets.negatives)

    anchor = index_rows(g_hat, sets.anchors)
    pos = sum_rows(elementwise_mul(anchor, index_rows(g_hat, sets.positives)))
    neg = sum_rows(elementwise_mul(index_rows(anchor, owner), index_rows(g_hat, neg_nodes)))
    # log sum_j exp((neg_j - pos) / tau), shifted by the per-graph max for stability
    z = scalar_mul(sub(neg, index_rows(pos, owner)), 1.0 / tau)
    shift = np.full(m, -np.inf)
    np.maximum.at(shift, owner, z.data[:, 0])
    if include_positive:
        shift = np.maximum(shift, 0.0)
    terms = exp(sub(z, _const(shift[owner][:, None])))
    total = scatter_sum_rows(terms, owner, m)
    if include_positive:
        total = add(total, _const(np.exp(-shift)[:, None]))
    return mean_all(add(log(total), _const(shift[:, None])))


def e_step_loss_v2(latents: LatentState, weights: LossWeights, sets: ContrastiveSets | None,
                   env_head: LinearParams, batch: Batch, base: Tensor | None = None) -> Tensor:
    """v1 entropy objective plus weighted environment-alignment and contrastive terms.

    ``base`` replaces the v1 part when given (the KL-prior ablation).
    """
    total = e_step_loss_v1(latents, weights, batch) if base is None else base
    if weights.lambda_env:
        total = add(total, scalar_mul(env_alignment_loss(latents.env_for_own_terms(), env_head, batch.env_ids), weights.lambda_env))
    if weights.lambda_cl and sets is not None and len(sets):
        cl = contrastive_loss(latents.g_hat, sets, weights.tau, weights.cl_include_positive)
        total = add(total, scalar_mul(cl, weights.lambda_cl))
    return total
