import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trecor.errors import ConfigError, TreeError
from trecor.phylo import (
    CountMatrix,
    NodeCounts,
    clade_totals,
    leaf_probabilities,
    leaf_to_node_counts,
    load_node_counts,
    node_log_odds,
    node_probabilities,
    node_to_leaf_counts,
    parse_newick,
    prune_tree,
    random_binary_tree,
    read_counts,
    save_node_counts,
    tree_graph_distance,
    tree_path,
    write_counts,
)


def test_parse_smallest_tree():
    t = parse_newick("((A,B),C);")
    assert t.q == 2
    assert set(t.leaf_names) == {"A", "B", "C"}


def test_parse_single_leaf_rejected():
    with pytest.raises(TreeError):
        parse_newick("(A);")


def test_balanced_four_leaf():
    t = parse_newick("((A,B),(C,D));")
    assert t.q == 3
    assert [t.leaf_names[k] for k in t.left_clade(0)] == ["A", "B"]
    assert t.clade_names(0) == ["A", "B", "C", "D"]


def test_listing_order_is_left():
    t = parse_newick("((C,D),(A,B));")
    assert [t.leaf_names[k] for k in t.left_clade(0)] == ["C", "D"]


def test_syntax_error_reports_position():
    with pytest.raises(TreeError, match="position|pos"):
        parse_newick("((A,B),C")


def test_duplicate_labels_rejected():
    with pytest.raises(TreeError, match="duplicate"):
        parse_newick("((A,B),A);")


def test_multifurcation_flag():
    with pytest.raises(TreeError):
        parse_newick("(A,B,C);")
    t = parse_newick("(A,B,C);", resolve_multifurcations=True)
    assert t.q == 2
    assert t.to_newick() == "((A,B),C);"


def test_branch_lengths_and_labels_ignored():
    t = parse_newick("((A:0.1,B:0.2)n1:0.3,'C d':1.0)root;")
    assert t.leaf_names == ("A", "B", "C d")
    assert parse_newick(t.to_newick()).to_newick() == t.to_newick()


def test_dfs_order_is_permutation():
    t = parse_newick("(((A,B),C),((D,E),F));")
    assert sorted(t.dfs_order) == list(range(t.q))
    # preorder: parent index precedes child index
    for j in range(1, t.q):
        assert t.parent[j] < j


def test_leaf_to_node_counts_example():
    t = parse_newick("((A,B),C);")
    nodes = leaf_to_node_counts(t, CountMatrix(np.array([[2, 3, 5]]), ("A", "B", "C"), ("s",)))
    assert nodes.N[0].tolist() == [10, 5]
    assert nodes.y[0].tolist() == [5, 2]


def test_leaf_to_node_counts_name_matched():
    t = parse_newick("((A,B),C);")
    nodes = leaf_to_node_counts(t, CountMatrix(np.array([[5, 2, 3]]), ("C", "A", "B"), ("s",)))
    assert nodes.N[0].tolist() == [10, 5]
    assert nodes.y[0].tolist() == [5, 2]


def test_unmatched_taxon():
    t = parse_newick("((A,B),C);")
    with pytest.raises(ConfigError):
        leaf_to_node_counts(t, CountMatrix(np.array([[1, 2, 3]]), ("A", "B", "X"), ("s",)))


def test_one_split_tree():
    t = parse_newick("(A,B);")
    nodes = leaf_to_node_counts(t, CountMatrix(np.array([[4, 6]]), ("A", "B"), ("s",)))
    assert (nodes.N[0, 0], nodes.y[0, 0]) == (10, 4)


def test_empty_sample_dropped_or_error():
    t = parse_newick("((A,B),C);")
    cm = CountMatrix(np.array([[0, 0, 0], [1, 2, 3]]), ("A", "B", "C"), ("e", "s"))
    nodes = leaf_to_node_counts(t, cm)
    assert nodes.n == 1 and nodes.sample_ids == ("s",)
    with pytest.raises(ConfigError):
        leaf_to_node_counts(t, cm, drop_empty=False)


def test_node_counts_invariants():
    with pytest.raises(ConfigError):
        NodeCounts(np.array([[3]]), np.array([[4]]))


@pytest.mark.parametrize("N,y,expect", [(10, 5, 0.0), (10, 0, np.log(0.5 / 10.5)), (0, 0, 0.0)])
def test_log_odds(N, y, expect):
    v = node_log_odds(NodeCounts(np.array([[N]]), np.array([[y]])), 0.5)[0, 0]
    assert v == pytest.approx(expect, abs=1e-12)
    if y == 0 and N == 10:
        assert v == pytest.approx(-3.0445, abs=1e-4)


def test_log_odds_pseudocount_positive():
    with pytest.raises(ConfigError):
        node_log_odds(NodeCounts(np.array([[1]]), np.array([[0]])), 0.0)


def test_graph_distance_examples():
    t = parse_newick("((A,B),(C,D));")
    D = tree_graph_distance(t)
    assert D[0, 1] == 1 and D[0, 2] == 1
    assert D[1, 2] == 2
    assert np.all(np.diag(D) == 0)
    assert tree_path(t, 1, 2) == [1, 0, 2]


def _brute_distance(t):
    import itertools

    q = t.q
    adj = {j: set() for j in range(q)}
    for j in range(1, q):
        adj[j].add(int(t.parent[j]))
        adj[int(t.parent[j])].add(j)
    D = np.zeros((q, q), dtype=int)
    for s in range(q):
        dist = {s: 0}
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        for k, v in dist.items():
            D[s, k] = v
    del itertools
    return D


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1))
def test_aggregation_matches_brute_force(n_leaves, seed):
    rng = np.random.default_rng(seed)
    t = random_binary_tree([f"t{k}" for k in range(n_leaves)], rng)
    z = rng.integers(0, 20, size=(3, n_leaves))
    tot = clade_totals(t, z)
    for j in range(t.q):
        assert np.array_equal(tot[:, j], z[:, t.clade(j)].sum(axis=1))
        assert np.array_equal(tot[:, t.children[j, 0]], z[:, t.left_clade(j)].sum(axis=1))
    assert np.array_equal(tree_graph_distance(t), _brute_distance(t))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1))
def test_bijection_round_trip(n_leaves, seed):
    rng = np.random.default_rng(seed)
    t = random_binary_tree([f"t{k}" for k in range(n_leaves)], rng)
    theta = rng.dirichlet(np.ones(n_leaves), size=4)
    back = leaf_probabilities(t, node_probabilities(t, theta))
    assert np.max(np.abs(back - theta)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 80), st.integers(0, 2**32 - 1))
def test_newick_round_trip(n_leaves, seed):
    t = random_binary_tree([f"t{k}" for k in range(n_leaves)], np.random.default_rng(seed))
    t2 = parse_newick(t.to_newick())
    assert t2.to_newick() == t.to_newick()
    assert np.array_equal(t2.children, t.children)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_node_to_leaf_inverts(n_leaves, seed):
    rng = np.random.default_rng(seed)
    names = [f"t{k}" for k in range(n_leaves)]
    t = random_binary_tree(names, rng)
    z = rng.integers(0, 30, size=(5, n_leaves))
    z[:, 0] += 1
    nodes = leaf_to_node_counts(t, CountMatrix(z, tuple(names), tuple(f"s{i}" for i in range(5))))
    assert np.array_equal(node_to_leaf_counts(t, nodes), z[:, [names.index(n) for n in t.leaf_names]])


def test_prune_tree():
    t = parse_newick("(((A,B),C),(D,E));")
    p = prune_tree(t, ["A", "C", "D"])
    assert p.to_newick() == "((A,C),D);"
    with pytest.raises(TreeError):
        prune_tree(t, ["A"])


def test_counts_and_bundle_io(tmp_path):
    t = parse_newick("((A,B),C);")
    cm = CountMatrix(np.array([[1, 2, 3], [4, 0, 1]]), ("A", "B", "C"), ("s1", "s2"))
    write_counts(cm, tmp_path / "c.tsv")
    cm2 = read_counts(tmp_path / "c.tsv")
    assert np.array_equal(cm2.z, cm.z) and cm2.taxon_names == cm.taxon_names
    nodes = leaf_to_node_counts(t, cm)
    save_node_counts(nodes, tmp_path / "nb", t)
    back = load_node_counts(tmp_path / "nb")
    assert np.array_equal(back.N, nodes.N) and np.array_equal(back.y, nodes.y)
    assert back.tree_hash == t.topology_hash()
