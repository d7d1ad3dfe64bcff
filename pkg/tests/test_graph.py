import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nang import autograd as ag
from nang.autograd import SparseMatrix
from nang.errors import InvalidArgumentError, InvalidDataError, LoadError
from nang.graph import (CATEGORICAL, REAL, AttributeMatrix, DatasetBundle, Graph, NodeSplit,
                        binarize_cooccurrence, compute_pos_weight, load_dataset, normalize_adjacency,
                        read_predictions, split_nodes, synth_dataset, write_dataset, write_predictions)


def random_graph(n, p, seed):
    r = np.random.default_rng(seed)
    upper = np.triu(r.random((n, n)) < p, k=1)
    return Graph(SparseMatrix.from_dense((upper | upper.T).astype(float)))


# --- normalisation ---------------------------------------------------------------


def test_normalize_isolated_nodes_gives_identity():
    np.testing.assert_array_equal(normalize_adjacency(Graph.from_edges(2, [])).to_dense(), np.eye(2))


def test_normalize_single_edge():
    np.testing.assert_array_equal(normalize_adjacency(Graph.from_edges(2, [(0, 1)])).to_dense(),
                                  np.full((2, 2), 0.5))


def test_normalize_triangle():
    a = normalize_adjacency(Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])).to_dense()
    np.testing.assert_array_equal(a, np.full((3, 3), 1 / 3))


@pytest.mark.parametrize("g", [nx.cycle_graph(7), nx.complete_graph(5)])
def test_normalize_regular_graph_rows_sum_to_one(g):
    graph = Graph.from_edges(g.number_of_nodes(), list(g.edges()))
    np.testing.assert_allclose(normalize_adjacency(graph).to_dense().sum(axis=1), 1.0, rtol=1e-12)


def test_normalize_symmetric_on_random_graphs():
    for seed in range(100):
        a = normalize_adjacency(random_graph(8, 0.35, seed)).to_dense()
        np.testing.assert_array_equal(a, a.T)
        nz = a[a != 0]
        assert np.all((nz > 0) & (nz <= 1))


# --- graph invariants -------------------------------------------------------------


def test_graph_rejects_invalid_adjacency():
    with pytest.raises(InvalidDataError):
        Graph(SparseMatrix.from_dense(np.array([[0.0, 1.0], [0.0, 0.0]])))
    with pytest.raises(InvalidDataError):
        Graph(SparseMatrix.from_dense(np.array([[1.0, 0.0], [0.0, 0.0]])))
    with pytest.raises(InvalidDataError):
        Graph(SparseMatrix.from_dense(np.array([[0.0, 2.0], [2.0, 0.0]])))
    with pytest.raises(InvalidDataError):
        Graph.from_edges(3, [(1, 1)])


def test_graph_accessors(small_graph):
    assert small_graph.n_nodes == 6 and small_graph.n_edges == 6
    np.testing.assert_array_equal(small_graph.degrees(), [2, 3, 3, 2, 1, 1])
    np.testing.assert_array_equal(small_graph.neighbors(1), [0, 2, 3])
    assert all(i < j for i, j in small_graph.edge_list())


def test_attribute_matrix_validation():
    with pytest.raises(InvalidDataError):
        AttributeMatrix(np.array([[0.0, 2.0]]), CATEGORICAL)
    with pytest.raises(InvalidDataError):
        AttributeMatrix(np.array([[np.nan]]), REAL)
    assert AttributeMatrix(np.array([[0.3, -2.0]]), REAL).n_features == 2


# --- split ----------------------------------------------------------------------


def test_split_sizes_and_determinism():
    s = split_nodes(10, rng=ag.make_rng(0))
    assert (len(s.train), len(s.val), len(s.test)) == (4, 1, 5)
    assert s == split_nodes(10, rng=ag.make_rng(0))


def test_split_partitions_for_many_seeds():
    for seed in range(100):
        s = split_nodes(37, rng=ag.make_rng(seed))
        parts = [set(s.train), set(s.val), set(s.test)]
        assert set().union(*parts) == set(range(37))
        assert sum(len(p) for p in parts) == 37


def test_split_errors():
    with pytest.raises(InvalidArgumentError):
        split_nodes(2)
    with pytest.raises(InvalidArgumentError):
        split_nodes(10, (0.5, 0.5, 0.5))
    with pytest.raises(InvalidDataError):
        NodeSplit([0, 1], [1], [2])


@settings(max_examples=50, deadline=None)
@given(n=st.integers(3, 200), seed=st.integers(0, 10_000))
def test_split_is_always_a_partition(n, seed):
    s = split_nodes(n, rng=ag.make_rng(seed))
    every = np.concatenate([s.train, s.val, s.test])
    np.testing.assert_array_equal(np.sort(every), np.arange(n))
    assert len(s.train) == int(np.floor(0.4 * n + 1e-9))


# --- pos weight -----------------------------------------------------------------


def test_pos_weight_cases():
    x = np.zeros((2, 5))
    x[0, 1] = x[1, 3] = 1
    assert compute_pos_weight(x) == 4.0
    assert compute_pos_weight(np.ones((3, 3))) == 1.0
    assert compute_pos_weight(np.array([[1, 0], [0, 1]])) == 1.0
    with pytest.raises(InvalidDataError):
        compute_pos_weight(np.zeros((2, 2)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pos_weight_row_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    x = (r.random((6, 5)) < 0.3).astype(float)
    x[0, 0] = 1
    assert compute_pos_weight(x) == compute_pos_weight(x[r.permutation(6)])


# --- co-occurrence ----------------------------------------------------------------


def test_binarize_threshold_inclusive_and_diagonal_dropped():
    counts = np.array([[100.0, 10.0, 9.0], [10.0, 0.0, 0.0], [9.0, 0.0, 0.0]])
    g = binarize_cooccurrence(SparseMatrix.from_dense(counts, symmetric=True))
    np.testing.assert_array_equal(g.adjacency.to_dense(),
                                  [[0, 1, 0], [1, 0, 0], [0, 0, 0]])


def test_binarize_rejects_asymmetric():
    with pytest.raises(InvalidDataError):
        binarize_cooccurrence(SparseMatrix.from_dense(np.array([[0.0, 12.0], [0.0, 0.0]])))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), threshold=st.integers(1, 20))
def test_binarize_output_is_valid_graph(seed, threshold):
    r = np.random.default_rng(seed)
    c = r.integers(0, 25, size=(7, 7)).astype(float)
    c = np.triu(c) + np.triu(c, 1).T
    g = binarize_cooccurrence(SparseMatrix.from_dense(c, symmetric=True), threshold)
    expected = (c >= threshold) & ~np.eye(7, dtype=bool)
    np.testing.assert_array_equal(g.adjacency.to_dense(), expected.astype(float))


# --- synthetic data ---------------------------------------------------------------


def test_synth_disjoint_cliques():
    b = synth_dataset(2, 5, p_in=1.0, p_out=0.0, attr_dim=4, rng=ag.make_rng(0))
    a = b.graph.adjacency.to_dense()
    block = np.repeat([0, 1], 5)
    expected = (block[:, None] == block[None, :]) & ~np.eye(10, dtype=bool)
    np.testing.assert_array_equal(a, expected.astype(float))


def test_synth_full_signal_gives_block_indicators():
    b = synth_dataset(3, 4, attr_dim=6, signal=1.0, rng=ag.make_rng(1))
    owner = np.arange(6) // 2
    expected = (b.labels[:, None] == owner[None, :]).astype(float)
    np.testing.assert_array_equal(b.attributes.values, expected)


def test_synth_planted_partition_modularity():
    b = synth_dataset(3, 60, 0.2, 0.02, 30, 0.9, rng=ag.make_rng(0))
    g = nx.Graph()
    g.add_nodes_from(range(b.n_nodes))
    g.add_edges_from(map(tuple, b.graph.edge_list()))
    communities = [set(np.flatnonzero(b.labels == c)) for c in range(3)]
    assert nx.algorithms.community.modularity(g, communities) > 0.3


def test_synth_argument_checks():
    with pytest.raises(InvalidArgumentError):
        synth_dataset(3, 4, attr_dim=10)
    with pytest.raises(InvalidArgumentError):
        synth_dataset(3, 4, p_in=0.1, p_out=0.2, attr_dim=6)
    with pytest.raises(InvalidArgumentError):
        synth_dataset(3, 4, attr_dim=6, signal=0.5)


# --- file format -------------------------------------------------------------------


def write_fixture(root, attrs="0 0 1\n1 1 1\n2 0 1\n"):
    root.mkdir()
    (root / "meta").write_text("# tiny\nnodes 3\nfeatures 2\nkind categorical\nclasses 2\n")
    (root / "edges").write_text("0 1\n1 2\n")
    (root / "attrs").write_text(attrs)
    (root / "labels").write_text("0 0\n1 1\n2 0\n")
    return root


def test_load_minimal_fixture(tmp_path):
    b = load_dataset(write_fixture(tmp_path / "d"), rng=ag.make_rng(0))
    assert (b.n_nodes, b.n_features, b.n_classes) == (3, 2, 2)
    assert b.graph.n_edges == 2
    np.testing.assert_array_equal(b.labels, [0, 1, 0])


def test_load_rejects_non_binary_categorical(tmp_path):
    with pytest.raises(InvalidDataError) as info:
        load_dataset(write_fixture(tmp_path / "d", "0 0 2\n"))
    assert info.value.line == 1


def test_load_reports_line_numbers(tmp_path):
    root = write_fixture(tmp_path / "d")
    (root / "edges").write_text("0 1\n1 x\n")
    with pytest.raises(LoadError) as info:
        load_dataset(root)
    assert info.value.line == 2


def test_load_drops_self_loops(tmp_path, caplog):
    root = write_fixture(tmp_path / "d")
    (root / "edges").write_text("0 1\n2 2\n")
    assert load_dataset(root, rng=ag.make_rng(0)).graph.n_edges == 1
    assert "self loop" in caplog.text


def test_load_missing_directory(tmp_path):
    with pytest.raises(LoadError):
        load_dataset(tmp_path / "nope")


def test_dataset_round_trip_bit_exact(tmp_path):
    b = synth_dataset(2, 8, 0.5, 0.1, 4, rng=ag.make_rng(3))
    write_dataset(b, tmp_path / "d", header=["fixture"])
    assert load_dataset(tmp_path / "d") == b


def test_real_valued_round_trip_bit_exact(tmp_path):
    r = np.random.default_rng(0)
    g = random_graph(6, 0.5, 1)
    x = r.standard_normal((6, 3)) / 7.0
    b = DatasetBundle(g, AttributeMatrix(x, REAL), split_nodes(6, rng=r), name="real")
    write_dataset(b, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back == b
    np.testing.assert_array_equal(back.attributes.values, x)


def test_bundle_checks_label_count():
    g = Graph.from_edges(3, [])
    with pytest.raises(InvalidDataError):
        DatasetBundle(g, AttributeMatrix(np.eye(3)), split_nodes(3), labels=[0, 1])


def test_predictions_round_trip(tmp_path):
    probs = np.array([[0.9, 0.1, 0.5], [0.2, 0.7, 0.0], [0.1, 0.2, 0.3]])
    write_predictions(tmp_path / "p.txt", [4, 7, 9], probs, CATEGORICAL, header=["run"])
    ids, attrs = read_predictions(tmp_path / "p.txt", 10)
    np.testing.assert_array_equal(ids, [4, 7, 9])
    np.testing.assert_array_equal(attrs.values, [[1, 0, 1], [0, 1, 0], [0, 0, 0]])
    real = np.array([[0.25, -1.5], [3.0, 1 / 3]])
    write_predictions(tmp_path / "r.txt", [0, 2], real, REAL)
    ids, attrs = read_predictions(tmp_path / "r.txt", 3)
    np.testing.assert_array_equal(attrs.values, real)
    assert attrs.kind == REAL
