import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histoexpr.cluster import (
    ClusterAssignment, ClusterError, cluster_correlation_stats, correlation_distance, cut_dendrogram,
    random_reassignment, read_assignment, read_dendrogram, spearman_matrix, ward_linkage,
    write_assignment, write_dendrogram,
)
from histoexpr.stats import spearman_rho

from conftest import naive_ward, random_distance


def test_ward_matches_naive_oracle(backend):
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(2, 16))
        d = random_distance(rng, n)
        tree = ward_linkage(d, backend=backend)
        got = tree.merges()
        want = naive_ward(d)
        assert [(a, b) for a, b, _ in got] == [(a, b) for a, b, _ in want]
        np.testing.assert_allclose([h for *_, h in got], [h for *_, h in want], atol=1e-9, rtol=0)


def test_ward_tie_rule_on_equal_distances(backend):
    d = 1.0 - np.eye(5)
    tree = ward_linkage(d, backend=backend)
    assert tree.merges()[0] == (0, 1, 1.0)
    assert [(a, b) for a, b, _ in tree.merges()] == [(a, b) for a, b, _ in naive_ward(d)]


def test_backends_agree():
    from histoexpr.kernels import BACKENDS
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(3)
    d = random_distance(rng, 40)
    a = ward_linkage(d, backend="python")
    b = ward_linkage(d, backend="cython")
    assert np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)
    np.testing.assert_allclose(a.heights, b.heights, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_ward_structure(n, seed):
    d = random_distance(np.random.default_rng(seed), n)
    tree = ward_linkage(d)
    assert len(tree.left) == n - 1
    assert (tree.left < tree.right).all()
    assert tree.sizes[-1] == n
    # Ward.D heights are monotone for metric inputs
    assert (np.diff(tree.heights) >= -1e-12).all()
    used = np.concatenate([tree.left, tree.right])
    assert sorted(used.tolist()) == list(range(2 * n - 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000), st.data())
def test_cut_gives_k_nonempty_clusters(n, seed, data):
    k = data.draw(st.integers(1, n))
    tree = ward_linkage(random_distance(np.random.default_rng(seed), n))
    a = cut_dendrogram(tree, k)
    assert a.k == k and sorted(set(a.labels.tolist())) == list(range(1, k + 1))
    # clusters numbered by first leaf in leaf order
    firsts = [int(np.flatnonzero(a.labels == c)[0]) for c in range(1, k + 1)]
    assert firsts == sorted(firsts)


def test_cut_is_nested():
    tree = ward_linkage(random_distance(np.random.default_rng(5), 12))
    prev = cut_dendrogram(tree, 2).labels
    for k in range(3, 13):
        cur = cut_dendrogram(tree, k).labels
        # each finer cluster lies inside one coarser cluster
        for c in np.unique(cur):
            assert len(set(prev[cur == c].tolist())) == 1
        prev = cur


def test_spearman_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 6))
    x[:, 3] = np.round(x[:, 3])
    rho = spearman_matrix(x)
    for i in range(6):
        for j in range(6):
            expect = 1.0 if i == j else spearman_rho(x[:, i], x[:, j])
            assert rho[i, j] == pytest.approx(expect, abs=1e-12)


def test_spearman_matrix_rejects_constant():
    x = np.random.default_rng(0).normal(size=(10, 3))
    x[:, 1] = 2.0
    with pytest.raises(ClusterError, match="constant"):
        spearman_matrix(x, ["a", "b", "c"])


def test_correlation_distance():
    assert correlation_distance(-0.25) == 0.75
    np.testing.assert_array_equal(correlation_distance(np.array([1.0, 0.0])), [0.0, 1.0])


def test_block_structure_recovered():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(80, 3))
    cols = [z[:, b] + 0.3 * rng.normal(size=80) for b in range(3) for _ in range(5)]
    x = np.column_stack(cols)
    ids = [f"g{j}" for j in range(15)]
    a = cut_dendrogram(ward_linkage(correlation_distance(spearman_matrix(x)), ids), 3)
    assert sorted(map(sorted, a.groups())) == sorted(sorted(ids[b * 5:(b + 1) * 5]) for b in range(3))
    stats = cluster_correlation_stats(a, spearman_matrix(x))
    assert min(v for v in stats.within if v is not None) > 0.7


def test_random_reassignment_keeps_sizes():
    ids = [f"t{i}" for i in range(20)]
    labels = np.array([1] * 3 + [2] * 7 + [3] * 10)
    a = ClusterAssignment(3, tuple(ids), labels)
    r = random_reassignment(a, seed=4)
    assert r.sizes() == a.sizes()
    assert random_reassignment(a, seed=4).labels.tolist() == r.labels.tolist()
    assert r.provenance != "correlation"


def test_assignment_requires_all_ids():
    with pytest.raises(ClusterError):
        ClusterAssignment(3, ("a", "b"), np.array([1, 3]))


def test_roundtrip(tmp_path):
    tree = ward_linkage(random_distance(np.random.default_rng(1), 7), [f"x{i}" for i in range(7)])
    write_dendrogram(tmp_path / "d.txt", tree)
    back = read_dendrogram(tmp_path / "d.txt")
    assert back.leaf_ids == tree.leaf_ids
    np.testing.assert_array_equal(back.heights, tree.heights)
    a = cut_dendrogram(tree, 3)
    write_assignment(tmp_path / "a.tsv", a)
    assert read_assignment(tmp_path / "a.tsv").as_dict() == a.as_dict()


def test_invalid_distance_inputs():
    with pytest.raises(ClusterError):
        ward_linkage(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ClusterError):
        ward_linkage(np.array([1.0, 2.0]))
    with pytest.raises(ClusterError):
        ward_linkage(np.array([-1.0]))
