"""Graph data model, batching, node/graph pooling, JSONL I/O and the motif generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, ValidationError
from .tensor import Tensor, elementwise_mul, index_rows, scatter_sum_rows


@dataclass(eq=False)
class Graph:
    """An undirected attributed graph; each edge is stored once."""

    node_features: np.ndarray
    edges: np.ndarray
    label: int
    env_id: int = 0

    def __post_init__(self):
        self.node_features = np.array(self.node_features, dtype=np.float64)
        if self.node_features.ndim != 2:
            raise ValidationError("node_features must be an n x f matrix")
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edges = edges
        self.label = int(self.label)
        self.env_id = int(self.env_id)
        n = self.node_count
        if n < 1:
            raise ValidationError("a graph needs at least one node")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValidationError(f"edge endpoint out of range for a {n}-node graph")
        if edges.size and np.any(edges[:, 0] == edges[:, 1]):
            raise ValidationError("self-loops are not allowed")

    @property
    def node_count(self) -> int:
        return self.node_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def same_as(self, other: "Graph") -> bool:
        return (
            self.label == other.label
            and self.env_id == other.env_id
            and np.array_equal(self.node_features, other.node_features)
            and np.array_equal(self.edges, other.edges)
        )


@dataclass(eq=False)
class Batch:
    """Disjoint union of graphs; every undirected edge appears in both directions."""

    node_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_index: np.ndarray
    labels: np.ndarray
    env_ids: np.ndarray
    node_counts: np.ndarray

    @property
    def graph_count(self) -> int:
        return len(self.labels)

    @property
    def node_total(self) -> int:
        return self.node_features.shape[0]


@dataclass
class DatasetSplit:
    train: list[Graph]
    id_val: list[Graph]
    ood_val: list[Graph]
    ood_test: list[Graph]
    shift_kind: str
    class_count: int
    env_count: int

    SPLITS = ("train", "id_val", "ood_val", "ood_test")

    def splits(self) -> dict[str, list[Graph]]:
        return {name: getattr(self, name) for name in self.SPLITS}


def batch_graphs(graphs: Sequence[Graph]) -> Batch:
    if not graphs:
        raise ValidationError("batch_graphs: empty graph list")
    f = graphs[0].feature_dim
    for g in graphs:
        if g.feature_dim != f:
            raise DimensionError(f"batch_graphs: feature dim {g.feature_dim} != {f}")
    counts = np.array([g.node_count for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    src, dst = [], []
    for g, off in zip(graphs, offsets):
        e = g.edges + off
        src.append(np.concatenate([e[:, 0], e[:, 1]]))
        dst.append(np.concatenate([e[:, 1], e[:, 0]]))
    return Batch(
        node_features=np.concatenate([g.node_features for g in graphs], axis=0),
        src=np.concatenate(src).astype(np.int64),
        dst=np.concatenate(dst).astype(np.int64),
        graph_index=np.repeat(np.arange(len(graphs), dtype=np.int64), counts),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        env_ids=np.array([g.env_id for g in graphs], dtype=np.int64),
        node_counts=counts,
    )


def _segment_count(graph_index, num_graphs):
    if num_graphs is None:
        num_graphs = int(graph_index[-1]) + 1 if len(graph_index) else 0
    return num_graphs


def readout(node_matrix: Tensor, graph_index, mode: str = "mean", num_graphs: int | None = None) -> Tensor:
    """Pool node rows into one row per graph (mean or sum)."""
    graph_index = np.asarray(graph_index, dtype=np.int64)
    if len(graph_index) != node_matrix.shape[0]:
        raise DimensionError(
            f"readout: graph_index length {len(graph_index)} != rows {node_matrix.shape[0]}"
        )
    num_graphs = _segment_count(graph_index, num_graphs)
    pooled = scatter_sum_rows(node_matrix, graph_index, num_graphs)
    if mode == "sum":
        return pooled
    if mode != "mean":
        raise ConfigError(f"readout: unknown mode {mode!r}")
    counts = np.bincount(graph_index, minlength=num_graphs).astype(np.float64)
    scale = np.repeat((1.0 / counts)[:, None], node_matrix.shape[1], axis=1)
    return elementwise_mul(pooled, Tensor._wrap(scale))


def broadcast_to_nodes(graph_matrix: Tensor, graph_index) -> Tensor:
    """Replicate each graph row onto its nodes; the adjoint is a segment sum."""
    return index_rows(graph_matrix, graph_index)


# ---------------------------------------------------------------------------
# JSONL

_KEYS = {"nodes", "edges", "label", "env"}


def graph_to_json(g: Graph) -> dict:
    return {
        "nodes": g.node_features.tolist(),
        "edges": g.edges.tolist(),
        "label": g.label,
        "env": g.env_id,
    }


def graph_from_json(obj) -> Graph:
    if not isinstance(obj, dict):
        raise ValidationError("expected a JSON object")
    keys = set(obj)
    if keys != _KEYS:
        extra, missing = sorted(keys - _KEYS), sorted(_KEYS - keys)
        raise ValidationError(f"bad keys (unknown {extra}, missing {missing})")
    nodes, edges = obj["nodes"], obj["edges"]
    if not isinstance(nodes, list) or not nodes or not all(isinstance(r, list) for r in nodes):
        raise ValidationError("'nodes' must be a non-empty list of rows")
    if len({len(r) for r in nodes}) != 1:
        raise ValidationError("'nodes' rows have inconsistent widths")
    if not isinstance(edges, list) or not all(
        isinstance(e, list) and len(e) == 2 and all(type(v) is int for v in e) for e in edges
    ):
        raise ValidationError("'edges' must be a list of [src, dst] integer pairs")
    for key in ("label", "env"):
        if type(obj[key]) is not int:
            raise ValidationError(f"'{key}' must be an integer")
    return Graph(np.array(nodes, dtype=np.float64), np.array(edges, dtype=np.int64).reshape(-1, 2),
                 obj["label"], obj["env"])


def load_jsonl(path) -> list[Graph]:
    path = Path(path)
    graphs = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                graphs.append(graph_from_json(obj))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return graphs


def dumps_jsonl(graphs: Sequence[Graph]) -> str:
    return "".join(json.dumps(graph_to_json(g)) + "\n" for g in graphs)


def save_jsonl(graphs: Sequence[Graph], path) -> None:
    Path(path).write_text(dumps_jsonl(graphs), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic motif datasets

BASE_TYPES = ("wheel", "tree", "ladder", "star", "path")
MOTIF_TYPES = ("house", "cycle", "crane")
COVARIATE_TRAIN_BASES = (0, 1, 2)
COVARIATE_OOD_BASES = (3, 4)
# concept shift pairs label i with base i
CONCEPT_BASES = (0, 1, 2)

_MOTIF_EDGES = {
    "house": [(0, 1), (1, 2), (2, 3), (3, 0), (4, 0), (4, 1)],
    "cycle": [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
    "crane": [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 3)],
}
_MOTIF_SIZES = {"house": 5, "cycle": 5, "crane": 6}


def base_graph(kind: str, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Edge list of a connected base graph on nodes 0..n-1."""
    if kind == "wheel":
        rim = list(range(1, n))
        return [(0, v) for v in rim] + [(rim[i], rim[(i + 1) % len(rim)]) for i in range(len(rim))]
    if kind == "tree":
        # random recursive tree
        return [(int(rng.integers(0, v)), v) for v in range(1, n)]
    if kind == "ladder":
        k = n // 2
        edges = [(i, i + k) for i in range(k)]
        edges += [(i, i + 1) for i in range(k - 1)] + [(i + k, i + k + 1) for i in range(k - 1)]
        if n % 2:
            edges.append((2 * k - 1, 2 * k))
        return edges
    if kind == "star":
        return [(0, v) for v in range(1, n)]
    if kind == "path":
        return [(v, v + 1) for v in range(n - 1)]
    raise ConfigError(f"unknown base type {kind!r}")


def compose_motif_graph(base: int, motif: int, env_id: int, rng: np.random.Generator,
                        size_range=(8, 15)) -> Graph:
    """Base graph joined to a motif by one random bridge edge; label = motif id."""
    n_base = int(rng.integers(size_range[0], size_range[1] + 1))
    edges = base_graph(BASE_TYPES[base], n_base, rng)
    name = MOTIF_TYPES[motif]
    edges += [(u + n_base, v + n_base) for u, v in _MOTIF_EDGES[name]]
    n = n_base + _MOTIF_SIZES[name]
    edges.append((int(rng.integers(0, n_base)), n_base + int(rng.integers(0, _MOTIF_SIZES[name]))))
    return Graph(np.ones((n, 1)), np.array(edges, dtype=np.int64), label=motif, env_id=env_id)


@dataclass
class MotifConfig:
    shift: str = "concept"
    sizes: tuple[int, int, int, int] = (600, 200, 200, 200)
    p_train: float = 0.9
    p_ood: float = 1.0 / 3.0
    base_size_range: tuple[int, int] = (8, 15)

    def validate(self) -> None:
        if self.shift not in ("covariate", "concept"):
            raise ConfigError(f"unknown shift kind {self.shift!r} (expected covariate|concept)")
        if len(self.sizes) != 4 or any(int(s) < 1 for s in self.sizes):
            raise ConfigError("sizes must be four positive integers")
        for p in (self.p_train, self.p_ood):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("correlation probabilities must lie in [0, 1]")
        lo, hi = self.base_size_range
        if lo < 3 or hi < lo:
            raise ConfigError("base_size_range must satisfy 3 <= lo <= hi")

    def to_json(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        d["base_size_range"] = list(self.base_size_range)
        return d


def _seed64(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def _concept_base(label: int, p: float, rng: np.random.Generator) -> int:
    if rng.random() < p:
        return CONCEPT_BASES[label]
    others = [b for b in CONCEPT_BASES if b != CONCEPT_BASES[label]]
    return others[int(rng.integers(0, len(others)))]


def generate_split(cfg: MotifConfig, split: int, size: int, seed: int) -> list[Graph]:
    seed = _seed64(seed)
    order_rng = np.random.default_rng([seed, split])
    # balanced labels in random order
    labels = order_rng.permutation(np.arange(size) % len(MOTIF_TYPES))
    ood = split >= 2
    graphs = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, split, i + 1])
        if cfg.shift == "covariate":
            pool = COVARIATE_OOD_BASES if ood else COVARIATE_TRAIN_BASES
            base = pool[int(rng.integers(0, len(pool)))]
            env = base
        else:
            base = _concept_base(int(label), cfg.p_ood if ood else cfg.p_train, rng)
            env = 1 if ood else 0
        graphs.append(compose_motif_graph(base, int(label), env, rng, cfg.base_size_range))
    return graphs


def generate_motif_dataset(cfg: MotifConfig, seed: int) -> DatasetSplit:
    """Motif-plus-base graphs under covariate or concept shift; a pure function of (cfg, seed)."""
    cfg.validate()
    parts = [generate_split(cfg, i, int(n), seed) for i, n in enumerate(cfg.sizes)]
    env_count = len(BASE_TYPES) if cfg.shift == "covariate" else 2
    return DatasetSplit(*parts, shift_kind=cfg.shift, class_count=len(MOTIF_TYPES), env_count=env_count)


def is_connected(g: Graph) -> bool:
    n = g.node_count
    adj = [[] for _ in range(n)]
    for u, v in g.edges:
        adj[u].append(v)
        adj[v].append(u)
    seen, stack = {0}, [0]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def dataset_from_splits(splits: dict[str, list[Graph]], shift_kind: str = "unknown") -> DatasetSplit:
    """Assemble a DatasetSplit from loaded files, inferring class and env counts."""
    every = [g for part in splits.values() for g in part]
    if not every:
        raise ValidationError("dataset has no graphs")
    dims = {g.feature_dim for g in every}
    if len(dims) != 1:
        raise ValidationError(f"splits disagree on feature dimension: {sorted(dims)}")
    c = max(g.label for g in every) + 1
    envs = max(g.env_id for g in every) + 1
    if min(g.label for g in every) < 0 or min(g.env_id for g in every) < 0:
        raise ValidationError("labels and env ids must be non-negative")
    return DatasetSplit(**{k: splits[k] for k in DatasetSplit.SPLITS},
                        shift_kind=shift_kind, class_count=max(c, 2), env_count=envs)

