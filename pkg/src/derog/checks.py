"""Finite-difference verification of every primitive and of the full training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import Graph, batch_graphs
from .model import DerogParams, Dims, forward_full
from .objective import LossWeights, e_step_loss_v2, m_step_loss, sample_contrastive_sets
from .tensor import (
    Tape,
    Tensor,
    add,
    elementwise_mul,
    exp,
    finite_difference_gradcheck,
    grad_reverse,
    index_rows,
    l1_norm_rows,
    log,
    matmul,
    mean_all,
    relu,
    row_softmax,
    rowwise_concat,
    scalar_mul,
    scatter_sum_rows,
    sigmoid,
    sub,
    sum_all,
    sum_rows,
)

PRIMITIVE_TOL = 1e-6
LOSS_TOL = 1e-4
EPS = 1e-6


@dataclass
class CheckRow:
    block: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    idx = np.array([0, 2, 2, 3, 1])
    seg = np.array([0, 1, 1, 2, 0])
    return {
        "matmul": (lambda a, b: matmul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "add": (lambda a, b: add(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "sub": (lambda a, b: sub(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "elementwise_mul": (lambda a, b: elementwise_mul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "scalar_mul": (lambda a: scalar_mul(a, 1.7), [rng.normal(size=(3, 4))]),
        "rowwise_concat": (lambda a, b: rowwise_concat([a, b]), [rng.normal(size=(3, 2)), rng.normal(size=(3, 3))]),
        "relu": (relu, [_away_from_zero(rng, (3, 4))]),
        "sigmoid": (sigmoid, [rng.normal(size=(3, 4))]),
        "row_softmax": (row_softmax, [rng.normal(size=(3, 4))]),
        "log": (log, [rng.uniform(0.5, 2.0, size=(3, 4))]),
        "exp": (exp, [rng.normal(size=(3, 4))]),
        "sum_all": (sum_all, [rng.normal(size=(3, 4))]),
        "mean_all": (mean_all, [rng.normal(size=(3, 4))]),
        "sum_rows": (sum_rows, [rng.normal(size=(3, 4))]),
        "l1_norm_rows": (l1_norm_rows, [_away_from_zero(rng, (3, 4))]),
        "index_rows": (lambda a: index_rows(a, idx), [rng.normal(size=(4, 3))]),
        "scatter_sum_rows": (lambda a: scatter_sum_rows(a, seg, 3), [rng.normal(size=(5, 3))]),
    }


def _weighted_scalar(op: Callable, tensors: list[Tensor], weight: np.ndarray | None) -> Tensor:
    out = op(*tensors)
    return sum_all(elementwise_mul(out, Tensor._wrap(weight)))


def check_primitive(kind: str, rng: np.random.Generator) -> CheckRow:
    op, arrays = _primitive_cases(rng)[kind]
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        shape = op(*params).shape
    # a random output weighting makes every output coordinate matter
    weight = rng.normal(size=shape)
    err = finite_difference_gradcheck(lambda: _weighted_scalar(op, params, weight), params, EPS)
    return CheckRow(kind, err, PRIMITIVE_TOL)


def check_grad_reverse(rng: np.random.Generator, lam: float) -> CheckRow:
    """Analytic gradient must equal -lam times the central difference of the (identity) forward."""
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    weight = Tensor._wrap(rng.normal(size=(3, 4)))
    with Tape() as tape:
        loss = sum_all(elementwise_mul(grad_reverse(x, lam), weight))
        analytic = tape.backward(loss)[x]
    numeric = np.empty(x.size)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + EPS
        hi = float(sum_all(elementwise_mul(x, weight)).data[0])
        flat[i] = orig - EPS
        lo = float(sum_all(elementwise_mul(x, weight)).data[0])
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * EPS)
    a = analytic.ravel()
    n = -lam * numeric
    err = float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))
    return CheckRow(f"grad_reverse sign (lambda={lam:g})", err, PRIMITIVE_TOL)


def _random_graph(rng: np.random.Generator, n: int, f: int, label: int, env: int) -> Graph:
    edges = [(i, i + 1) for i in range(n - 1)]
    edges += [(0, n - 1)] if n > 2 else []
    return Graph(rng.normal(size=(n, f)), np.array(edges, dtype=np.int64), label, env)


def full_loss_setup(seed: int):
    """Small model, 3-graph batch and fixed contrastive sets for the composed-loss check.

    One GIN layer per subnetwork: deeper stacks push some gradient entries
    below 1e-8, where central differences at eps=1e-6 are dominated by
    rounding noise.  Deeper encoders are checked block by block instead.
    """
    rng = np.random.default_rng(seed)
    dims = Dims(f=3, d=4, c=3, num_layers=1, env_count=2)
    params = DerogParams.init(dims, rng)
    # zero biases put some units exactly on a ReLU kink; move off it
    for name, t in params.named_parameters():
        if name.endswith("bias") or name.endswith("eps"):
            t.data[...] = rng.normal(scale=0.5, size=t.shape)
    graphs = [_random_graph(rng, n, dims.f, i % dims.c, i % 2) for i, n in enumerate((4, 5, 6))]
    batch = batch_graphs(graphs)
    weights = LossWeights()
    with Tape():
        latents, _ = forward_full(params, batch, use_grl=False)
    sets = sample_contrastive_sets(latents.g_hat, batch.graph_index, weights.k, rng)
    return params, batch, weights, sets


def check_full_loss(seed: int) -> list[CheckRow]:
    """E-step, M-step and their sum, differentiated through all four subnetworks.

    The reversal layer is switched off here: finite differences see only the
    forward pass, which the reversal leaves unchanged.
    """
    params, batch, weights, sets = full_loss_setup(seed)
    every = [t for _, t in params.named_parameters()]

    def e_loss():
        latents, _ = forward_full(params, batch, use_grl=False)
        return e_step_loss_v2(latents, weights, sets, params.phi_e.head, batch)

    def m_loss():
        _, y_hat = forward_full(params, batch, use_grl=False)
        return m_step_loss(y_hat, batch.labels)

    def total():
        latents, y_hat = forward_full(params, batch, use_grl=False)
        return add(e_step_loss_v2(latents, weights, sets, params.phi_e.head, batch),
                   m_step_loss(y_hat, batch.labels))

    return [
        CheckRow("e_step_loss_v2", finite_difference_gradcheck(e_loss, every, EPS), LOSS_TOL),
        CheckRow("m_step_loss", finite_difference_gradcheck(m_loss, every, EPS), LOSS_TOL),
        CheckRow("full_v2_loss", finite_difference_gradcheck(total, every, EPS), LOSS_TOL),
    ]


def run_gradcheck(seed: int = 0) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = [check_primitive(kind, rng) for kind in _primitive_cases(np.random.default_rng(0))]
    rows += [check_grad_reverse(rng, lam) for lam in (0.5, 1.0)]
    rows += check_full_loss(seed)
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.block) for r in rows)
    lines = [f"{'block':<{width}}  {'max_rel_err':>12}  {'threshold':>9}  pass"]
    for r in rows:
        lines.append(f"{r.block:<{width}}  {r.max_rel_err:12.3e}  {r.threshold:9.0e}  {'yes' if r.passed else 'NO'}")
    return "\n".join(lines)
