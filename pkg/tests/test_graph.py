import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from ntforecast.errors import ArgumentError
from ntforecast.graph import (
    ClusterAssignment,
    CorrelationMatrix,
    LineDigraph,
    cluster_series,
    k_hop_adjacency,
    line_digraph,
    pearson_matrix,
    spearman_matrix,
)
from ntforecast.synth import synth_generate


def bfs_reach(n, arcs, k, symmetric, self_loops):
    adj = [set() for _ in range(n)]
    for i, j in arcs:
        adj[i].add(j)
        if symmetric:
            adj[j].add(i)
    out = np.zeros((n, n), dtype=bool)
    for s in range(n):
        dist = {s: 0}
        q = deque([s])
        while q:
            u = q.popleft()
            if dist[u] == k:
                continue
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        for v, dv in dist.items():
            if dv >= 1:
                out[s, v] = True
        # s reaches itself within k only through a cycle; the diagonal is overridden anyway
        out[s, s] = self_loops
    return out


def random_digraph(rng, n, p):
    arcs = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < p]
    return LineDigraph(tuple(str(i) for i in range(n)), tuple(arcs))


def path4():
    return LineDigraph(("0", "1", "2", "3"), ((0, 1), (1, 2), (2, 3)))


# ---------------------------------------------------------------- line digraph

def line_digraph_oracle(arcs):
    return {(a, b) for a, (_, ha) in enumerate(arcs) for b, (tb, _) in enumerate(arcs) if a != b and ha == tb}


def test_line_digraph_path():
    g = line_digraph([("u", "v"), ("v", "w")])
    assert g.node_ids == ("u->v", "v->w")
    assert g.arcs == ((0, 1),)


def test_line_digraph_single_arc():
    g = line_digraph([("u", "v")])
    assert g.n_nodes == 1 and g.arcs == ()


def test_line_digraph_three_cycle():
    g = line_digraph([("u", "v"), ("v", "w"), ("w", "u")])
    assert set(g.arcs) == {(0, 1), (1, 2), (2, 0)}


def test_line_digraph_empty():
    with pytest.raises(ArgumentError):
        line_digraph([])


def test_line_digraph_matches_definition_on_random_networks():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        arcs = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.4]
        if not arcs:
            continue
        assert set(line_digraph(arcs).arcs) == line_digraph_oracle(arcs)


# ---------------------------------------------------------------- k-hop

def test_khop_path_k1():
    m = k_hop_adjacency(path4(), 1).matrix
    expected = np.eye(4, dtype=bool) | np.eye(4, k=1, dtype=bool)
    np.testing.assert_array_equal(m, expected)


def test_khop_path_k3():
    m = k_hop_adjacency(path4(), 3).matrix
    np.testing.assert_array_equal(m, np.triu(np.ones((4, 4), dtype=bool)))


def test_khop_symmetric_connected_is_full():
    r = synth_generate(10, 400, 2, seed=0)
    m = k_hop_adjacency(r.graph, r.graph.n_nodes - 1, "symmetric").matrix
    assert m.all()


def test_khop_self_loops_flag_and_errors():
    m = k_hop_adjacency(path4(), 2, self_loops=False).matrix
    assert not m.diagonal().any()
    with pytest.raises(ArgumentError):
        k_hop_adjacency(path4(), 0)


def test_khop_matches_bfs_random():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n = int(rng.integers(2, 10))
        g = random_digraph(rng, n, float(rng.uniform(0.05, 0.5)))
        k = int(rng.integers(1, 5))
        for mode in ("directed", "symmetric"):
            for loops in (True, False):
                got = k_hop_adjacency(g, k, mode, loops).matrix
                np.testing.assert_array_equal(got, bfs_reach(n, g.arcs, k, mode == "symmetric", loops))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.floats(0.05, 0.6), st.integers(1, 6), st.integers(0, 10_000))
def test_khop_monotone_in_k(n, p, k, seed):
    g = random_digraph(np.random.default_rng(seed), n, p)
    for mode in ("directed", "symmetric"):
        a = k_hop_adjacency(g, k, mode).matrix
        b = k_hop_adjacency(g, k + 1, mode).matrix
        assert not (a & ~b).any()


def test_edge_list_export():
    text = k_hop_adjacency(path4(), 1).edge_list(path4().node_ids)
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert len(lines) == 7
    assert "0\t1" in lines


# ---------------------------------------------------------------- correlation

def rank_then_pearson(x, y):
    def avg_ranks(v):
        v = list(v)
        r = []
        for a in v:
            less = sum(1 for b in v if b < a)
            equal = sum(1 for b in v if b == a)
            r.append(less + (equal + 1) / 2)
        return np.array(r, dtype=float)

    rx, ry = avg_ranks(x), avg_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))


def test_spearman_perfect_monotone():
    assert spearman_matrix(np.array([[1, 10], [2, 20], [3, 30]])).rho[0, 1] == pytest.approx(1.0)
    assert spearman_matrix(np.array([[1, 3], [2, 2], [3, 1]])).rho[0, 1] == pytest.approx(-1.0)


def test_spearman_matches_oracle_small():
    x, y = [1, 2, 3, 4], [1, 4, 9, 7]
    rho = spearman_matrix(np.array([x, y], dtype=float).T).rho[0, 1]
    assert rho == pytest.approx(rank_then_pearson(x, y), abs=1e-12)
    assert rho == pytest.approx(0.8, abs=1e-12)


def test_spearman_ties_and_constants():
    v = np.array([[1, 5, 2], [1, 5, 2], [2, 5, 3], [3, 5, 3]], dtype=float)
    rho = spearman_matrix(v).rho
    assert rho[0, 2] == pytest.approx(rank_then_pearson(v[:, 0], v[:, 2]), abs=1e-12)
    assert rho[1, 1] == 1.0 and rho[1, 0] == 0.0 and rho[2, 1] == 0.0
    with pytest.raises(ArgumentError):
        spearman_matrix(v[:2])


def test_correlation_matrix_invariants():
    rng = np.random.default_rng(1)
    for fn in (spearman_matrix, pearson_matrix):
        rho = fn(rng.normal(size=(50, 6))).rho
        np.testing.assert_array_equal(rho, rho.T)
        np.testing.assert_array_equal(np.diag(rho), 1.0)
        assert np.all(np.abs(rho) <= 1.0)


def test_spearman_rank_invariance_pearson_not():
    rng = np.random.default_rng(2)
    v = rng.gamma(2.0, size=(200, 4))
    w = v.copy()
    w[:, 1] = np.exp(3 * v[:, 1])
    np.testing.assert_allclose(spearman_matrix(v).rho, spearman_matrix(w).rho, atol=1e-9)
    assert np.abs(pearson_matrix(v).rho[1] - pearson_matrix(w).rho[1]).max() > 1e-3


# ---------------------------------------------------------------- clustering

def block_rho(sizes, within=1.0, across=0.0):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    rho = np.where(labels[:, None] == labels[None, :], within, across)
    np.fill_diagonal(rho, 1.0)
    return CorrelationMatrix("spearman", rho), labels


def within_cost(rho, labels):
    d = 1 - rho
    return sum(d[i, j] for i in range(len(labels)) for j in range(i + 1, len(labels)) if labels[i] == labels[j])


def test_cluster_recovers_perfect_blocks():
    # interleave the blocks so index order gives no hint
    corr, labels = block_rho([3, 4])
    perm = np.array([0, 3, 1, 4, 5, 2, 6])
    corr = CorrelationMatrix("spearman", corr.rho[np.ix_(perm, perm)])
    labels = labels[perm]
    got = cluster_series(corr, 2).labels
    assert adjusted_rand_score(labels, got) == 1.0
    # brute force: the recovered partition minimises within-cluster distance
    n = len(labels)
    best = min(
        within_cost(corr.rho, np.array(lab))
        for lab in itertools.product([0, 1], repeat=n)
        if 0 < sum(lab) < n
    )
    assert within_cost(corr.rho, got) == best


def test_cluster_extremes():
    corr, _ = block_rho([2, 3, 1], within=0.7, across=0.1)
    assert len(set(cluster_series(corr, 6).labels)) == 6
    assert set(cluster_series(corr, 1).labels) == {0}
    for k in (0, 7):
        with pytest.raises(ArgumentError):
            cluster_series(corr, k)


def test_cluster_tie_break_is_lowest_pair():
    rho = np.eye(4)
    got = cluster_series(CorrelationMatrix("spearman", rho), 3).labels
    # every pair is equally far; (0, 1) merges first
    np.testing.assert_array_equal(got, [0, 0, 1, 2])


def test_cluster_deterministic():
    r = synth_generate(24, 600, 3, seed=5)
    corr = spearman_matrix(r.data)
    a = cluster_series(corr, 3).labels
    b = cluster_series(spearman_matrix(r.data), 3).labels
    np.testing.assert_array_equal(a, b)


def test_cluster_recovers_synthetic_ground_truth():
    r = synth_generate(32, 2160, 4, seed=11, noise=0.02)
    got = cluster_series(spearman_matrix(r.data), 4)
    assert adjusted_rand_score(r.ground_truth.labels, got.labels) == 1.0


def test_assignment_json_round_trip():
    a = ClusterAssignment(3, np.array([0, 2, 1, 1, 0]))
    b = ClusterAssignment.from_json(a.to_json())
    assert b.k == 3 and b.labels.tolist() == [0, 2, 1, 1, 0]
    with pytest.raises(ArgumentError):
        ClusterAssignment(3, np.array([0, 0, 1]))
