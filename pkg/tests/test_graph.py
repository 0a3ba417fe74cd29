import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from derog.errors import ConfigError, DimensionError, ParseError, ValidationError
from derog.graph import (
    BASE_TYPES,
    MOTIF_TYPES,
    Graph,
    MotifConfig,
    batch_graphs,
    broadcast_to_nodes,
    dataset_from_splits,
    dumps_jsonl,
    generate_motif_dataset,
    is_connected,
    load_jsonl,
    readout,
    save_jsonl,
)
from derog.tensor import Tape, Tensor, elementwise_mul, sum_all

MOTIF_NODES = {0: 5, 1: 5, 2: 6}


def path_graph(n, f=1, label=0, env=0, rng=None):
    x = np.ones((n, f)) if rng is None else rng.normal(size=(n, f))
    return Graph(x, [(i, i + 1) for i in range(n - 1)], label, env)


def base_kind(g: Graph) -> str:
    """Recover the base type of a concept-mode graph from its edge count (wheel, tree or ladder)."""
    n_base = g.node_count - MOTIF_NODES[g.label]
    inside = sum(1 for u, v in g.edges if u < n_base and v < n_base)
    if inside == n_base - 1:
        return "tree"
    if inside == 2 * (n_base - 1):
        return "wheel"
    return "ladder"


# --- data model ---------------------------------------------------------------


def test_graph_validation():
    with pytest.raises(ValidationError):
        Graph(np.ones((3, 1)), [(0, 5)], 0)
    with pytest.raises(ValidationError):
        Graph(np.ones((3, 1)), [(1, 1)], 0)
    with pytest.raises(ValidationError):
        Graph(np.ones((0, 1)), [], 0)
    with pytest.raises(ValidationError):
        Graph(np.ones(3), [], 0)


def test_batch_graph_index_and_edge_offsets():
    b = batch_graphs([path_graph(2), path_graph(3)])
    assert b.graph_index.tolist() == [0, 0, 1, 1, 1]
    pairs = set(zip(b.src.tolist(), b.dst.tolist()))
    assert pairs == {(0, 1), (1, 0), (2, 3), (3, 2), (3, 4), (4, 3)}
    assert b.node_counts.sum() == b.node_total


def test_single_graph_batch_doubles_edges():
    g = path_graph(4)
    b = batch_graphs([g])
    assert b.graph_index.tolist() == [0] * 4
    assert len(b.src) == 2 * len(g.edges)


def test_batch_rejects_mixed_feature_dims():
    with pytest.raises(DimensionError):
        batch_graphs([path_graph(2, f=1), path_graph(2, f=2)])


def test_readout_examples():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert readout(x, [0, 0]).data.tolist() == [[2.0, 3.0]]
    assert readout(x, [0, 0], "sum").data.tolist() == [[4.0, 6.0]]
    assert readout(Tensor([[7.0, 8.0]]), [0]).data.tolist() == [[7.0, 8.0]]


def test_broadcast_examples():
    assert broadcast_to_nodes(Tensor([[5.0, 6.0]]), [0, 0, 0]).data.tolist() == [[5.0, 6.0]] * 3
    m = Tensor([[1.0], [2.0]])
    assert broadcast_to_nodes(m, [0, 1]).data.tolist() == m.data.tolist()
    with pytest.raises(DimensionError):
        broadcast_to_nodes(m, [0, 2])


def test_broadcast_gradient_is_segment_sum():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    w = np.arange(10.0).reshape(5, 2)
    with Tape() as tape:
        g = tape.backward(sum_all(elementwise_mul(broadcast_to_nodes(m, [0, 0, 1, 1, 1]), Tensor(w))))
    np.testing.assert_array_equal(g[m], [w[:2].sum(0), w[2:].sum(0)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5))
def test_sum_readout_of_broadcast_scales_by_node_count(sizes):
    rng = np.random.default_rng(len(sizes))
    m = rng.normal(size=(len(sizes), 3))
    index = np.repeat(np.arange(len(sizes)), sizes)
    out = readout(broadcast_to_nodes(Tensor(m), index), index, "sum").data
    np.testing.assert_allclose(out, m * np.array(sizes)[:, None], atol=1e-12)


# --- JSONL --------------------------------------------------------------------


def test_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    graphs = [path_graph(3, f=2, label=1, env=2, rng=rng), Graph(rng.normal(size=(1, 2)), [], 0, 0)]
    path = tmp_path / "g.jsonl"
    save_jsonl(graphs, path)
    back = load_jsonl(path)
    assert len(back) == 2 and all(a.same_as(b) for a, b in zip(graphs, back))


def test_jsonl_bad_edge_names_line(tmp_path):
    path = tmp_path / "g.jsonl"
    good = json.dumps({"nodes": [[1.0]] * 3, "edges": [[0, 1]], "label": 0, "env": 0})
    bad = json.dumps({"nodes": [[1.0]] * 3, "edges": [[0, 5]], "label": 0, "env": 0})
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(ValidationError, match=r"g\.jsonl:2"):
        load_jsonl(path)


def test_jsonl_rejects_unknown_keys_and_garbage(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text(json.dumps({"nodes": [[1.0]], "edges": [], "label": 0, "env": 0, "x": 1}) + "\n")
    with pytest.raises(ValidationError, match="unknown"):
        load_jsonl(path)
    path.write_text("{not json\n")
    with pytest.raises(ParseError, match=":1"):
        load_jsonl(path)


def test_jsonl_empty_file(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text("")
    assert load_jsonl(path) == []


# --- generator ----------------------------------------------------------------


SMALL = MotifConfig(sizes=(60, 30, 30, 30))


def test_generator_is_pure_function_of_seed():
    a = generate_motif_dataset(SMALL, 11)
    b = generate_motif_dataset(SMALL, 11)
    c = generate_motif_dataset(SMALL, 12)
    for name in a.SPLITS:
        assert dumps_jsonl(getattr(a, name)) == dumps_jsonl(getattr(b, name))
    assert dumps_jsonl(a.train) != dumps_jsonl(c.train)


@pytest.mark.parametrize("shift", ["covariate", "concept"])
def test_generated_graphs_connected_and_labelled_by_motif(shift):
    ds = generate_motif_dataset(MotifConfig(shift=shift, sizes=(30, 15, 15, 15)), 3)
    for graphs in ds.splits().values():
        for g in graphs:
            assert is_connected(g)
            assert 0 <= g.label < len(MOTIF_TYPES)
            assert np.all(g.node_features == 1.0) and g.feature_dim == 1
            n_base = g.node_count - MOTIF_NODES[g.label]
            assert 8 <= n_base <= 15


def test_covariate_env_ids_disjoint():
    ds = generate_motif_dataset(MotifConfig(shift="covariate", sizes=(90, 30, 30, 60)), 0)
    train_envs = {g.env_id for g in ds.train}
    test_envs = {g.env_id for g in ds.ood_test}
    assert train_envs and test_envs and not train_envs & test_envs
    assert {BASE_TYPES[e] for e in train_envs} <= {"wheel", "tree", "ladder"}
    assert {BASE_TYPES[e] for e in test_envs} <= {"star", "path"}


def test_concept_env_ids_mark_regime():
    ds = generate_motif_dataset(SMALL, 0)
    assert {g.env_id for g in ds.train + ds.id_val} == {0}
    assert {g.env_id for g in ds.ood_val + ds.ood_test} == {1}


def test_label_histogram_balanced():
    ds = generate_motif_dataset(MotifConfig(sizes=(600, 600, 600, 600)), 5)
    for graphs in ds.splits().values():
        counts = np.bincount([g.label for g in graphs], minlength=3)
        assert np.all(np.abs(counts - len(graphs) / 3) <= 0.1 * len(graphs) / 3)


def test_concept_train_correlation_follows_p_train():
    ds = generate_motif_dataset(MotifConfig(sizes=(900, 3, 3, 900)), 2)
    agree_train = np.mean([base_kind(g) == BASE_TYPES[g.label] for g in ds.train])
    agree_ood = np.mean([base_kind(g) == BASE_TYPES[g.label] for g in ds.ood_test])
    assert abs(agree_train - 0.9) < 0.04
    assert abs(agree_ood - 1 / 3) < 0.05


def test_concept_no_correlation_is_indistinguishable_from_ood():
    cfg = MotifConfig(sizes=(1000, 3, 3, 1000), p_train=1 / 3)
    ds = generate_motif_dataset(cfg, 9)
    kinds = ["wheel", "tree", "ladder"]
    table = np.zeros((2, 9))
    for row, graphs in enumerate((ds.train, ds.ood_test)):
        for g in graphs:
            table[row, 3 * g.label + kinds.index(base_kind(g))] += 1
    assert chi2_contingency(table).pvalue > 0.01


def test_generator_rejects_unknown_shift():
    with pytest.raises(ConfigError):
        generate_motif_dataset(MotifConfig(shift="label"), 0)


def test_dataset_from_splits_infers_counts():
    g = [path_graph(3, label=1, env=4)]
    ds = dataset_from_splits({"train": g, "id_val": g, "ood_val": g, "ood_test": g})
    assert ds.class_count == 2 and ds.env_count == 5
