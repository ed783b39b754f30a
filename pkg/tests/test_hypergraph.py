from contextlib import nullcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whcn.errors import NoSeeds, ParseError, ShapeMismatch
from whcn.hypergraph import (
    Hypergraph,
    HypergraphWarning,
    build_hypergraph,
    disjoint_union,
    dump_hypergraph,
    hyperedge_degrees,
    hypergraph_laplacian,
    knn_table,
    load_hypergraph,
    propagation_operator,
    superpoint_adjacency,
    vertex_degrees,
)
from whcn.numcore import sym_eig
from whcn.seeds import SeedSet


def _seeds(pairs):
    sp = np.array([p[0] for p in pairs], dtype=np.int64)
    cat = np.array([p[1] for p in pairs], dtype=np.int64)
    return SeedSet(0, sp, cat, np.ones(len(pairs)))


def _simple(H, w):
    H = np.asarray(H, dtype=float)
    return Hypergraph(H, np.asarray(w, dtype=float), [("knn", e) for e in range(H.shape[1])])


def _random_hypergraph(rng, n=None):
    n = n or int(rng.integers(2, 51))
    d = int(rng.integers(2, 6))
    F = rng.normal(size=(n, d))
    t = int(rng.integers(1, n + 1))
    sp = rng.choice(n, size=t, replace=False)
    cat = rng.integers(0, 4, size=t)
    with pytest.warns(HypergraphWarning) if np.any(np.bincount(cat) == 1) else nullcontext():
        adjacency = rng.integers(0, n, size=(n, 2)) if rng.random() < 0.5 else None
        hg = build_hypergraph(
            _seeds(list(zip(sp, cat))), F, k_h=int(rng.integers(1, 7)), adjacency=adjacency
        )
    return hg.with_weights(rng.uniform(0.05, 3.0, hg.n_edges))


def _degree_oracle(H, w):
    n, m = H.shape
    d = [0.0] * n
    b = [0.0] * m
    for v in range(n):
        for e in range(m):
            d[v] += w[e] * H[v, e]
            b[e] += H[v, e]
    return np.array(d), np.array(b)


def _laplacian_oracle(H, w):
    n, m = H.shape
    d, b = _degree_oracle(H, w)
    lap = np.eye(n)
    for u in range(n):
        for v in range(n):
            if d[u] == 0 or d[v] == 0:
                continue
            s = sum(H[u, e] * H[v, e] * w[e] / b[e] for e in range(m))
            lap[u, v] -= s / np.sqrt(d[u] * d[v])
    return lap


def test_build_counts_and_sizes():
    F = np.random.default_rng(0).normal(size=(10, 4))
    hg = build_hypergraph(_seeds([(0, 1), (3, 1), (5, 2), (7, 2), (8, 2)]), F, k_h=3)
    assert hg.n_edges == 2 + 10
    assert hg.edge_kind[:2] == [("class", 1), ("class", 2)]
    assert np.all(hyperedge_degrees(hg)[2:] == 4)
    assert np.all(hg.weights == 1.0)
    assert set(hg.members(0)) == {0, 3}
    assert set(hg.members(1)) == {5, 7, 8}


def test_single_seed_category_dropped_with_warning():
    F = np.random.default_rng(1).normal(size=(6, 3))
    with pytest.warns(HypergraphWarning, match="category 4"):
        hg = build_hypergraph(_seeds([(0, 1), (1, 1), (2, 4)]), F, k_h=2)
    assert ("class", 4) not in hg.edge_kind
    assert any("category 4" in note for note in hg.notes)
    assert hg.labeled_vertices == [(0, 1), (1, 1), (2, 4)]


def test_no_seeds_raises():
    with pytest.raises(NoSeeds):
        build_hypergraph(_seeds([]), np.zeros((4, 2)), k_h=2)


def test_knn_hyperedge_size_k5():
    F = np.random.default_rng(2).normal(size=(20, 5))
    hg = build_hypergraph(_seeds([(0, 0), (1, 0)]), F, k_h=5)
    assert np.all(hyperedge_degrees(hg)[1:] == 6)


def test_knn_table_matches_sort():
    rng = np.random.default_rng(3)
    F = rng.integers(0, 3, size=(25, 2)).astype(float)
    table = knn_table(F, 4)
    for i in range(25):
        order = sorted((float(np.sum((F[i] - F[j]) ** 2)), j) for j in range(25) if j != i)
        assert table[i].tolist() == [j for _, j in order[:4]]


def test_degree_examples():
    hg = _simple([[1, 0], [1, 1], [0, 1]], [1, 1])
    assert vertex_degrees(hg).tolist() == [1, 2, 1]
    assert hyperedge_degrees(hg).tolist() == [2, 2]
    assert vertex_degrees(hg.with_weights([2, 1])).tolist() == [2, 3, 1]


def test_laplacian_two_vertices():
    lap = hypergraph_laplacian(_simple([[1], [1]], [1]))
    assert np.allclose(lap, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
    vals, _ = sym_eig(lap)
    assert np.allclose(vals, [0, 1], atol=1e-12)


def test_isolated_vertex_row_is_identity():
    hg = _simple([[1], [1], [0]], [1])
    lap = hypergraph_laplacian(hg)
    assert lap[2].tolist() == [0, 0, 1]
    assert lap[:, 2].tolist() == [0, 0, 1]


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_degrees_match_loop_oracle(seed):
    hg = _random_hypergraph(np.random.default_rng(seed))
    d, b = _degree_oracle(hg.incidence, hg.weights)
    assert np.max(np.abs(vertex_degrees(hg) - d)) <= 1e-12
    assert np.array_equal(hyperedge_degrees(hg), b)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_laplacian_properties(seed):
    rng = np.random.default_rng(seed)
    hg = _random_hypergraph(rng, n=int(rng.integers(2, 30)))
    lap = hypergraph_laplacian(hg)
    assert np.max(np.abs(lap - lap.T)) <= 1e-12
    assert np.max(np.abs(lap - _laplacian_oracle(hg.incidence, hg.weights))) <= 1e-12
    vals, _ = sym_eig(lap)
    assert vals[0] >= -1e-8 and vals[-1] <= 2 + 1e-8
    d = vertex_degrees(hg)
    assert np.all(d > 0)
    assert np.linalg.norm(lap @ np.sqrt(d)) <= 1e-10


def test_invariants_of_constructed_hypergraphs():
    rng = np.random.default_rng(4)
    for _ in range(20):
        hg = _random_hypergraph(rng)
        assert np.all(hyperedge_degrees(hg) >= 2)
        assert np.all(hg.weights > 0)
        for e, (kind, c) in enumerate(hg.edge_kind):
            if kind == "class":
                assert set(hg.members(e)) == set(hg.seed_vertices[hg.seed_labels == c])


def test_removing_hyperedge_never_raises_degree():
    rng = np.random.default_rng(5)
    for _ in range(20):
        hg = _random_hypergraph(rng)
        mask = np.zeros(hg.n_edges, dtype=bool)
        mask[rng.integers(hg.n_edges)] = True
        # summation order changes when a column goes, so allow rounding
        assert np.all(vertex_degrees(hg.drop_edges(mask)) <= vertex_degrees(hg) + 1e-12)


def test_class_only_shape():
    F = np.random.default_rng(6).normal(size=(12, 3))
    hg = build_hypergraph(_seeds([(0, 0), (1, 0), (2, 3), (3, 3)]), F, k_h=2)
    class_only = hg.drop_edges([k == "knn" for k, _ in hg.edge_kind])
    assert class_only.incidence.shape == (12, 2)


def test_propagation_complements_laplacian():
    hg = _random_hypergraph(np.random.default_rng(7))
    op = propagation_operator(hg)
    assert np.allclose(np.eye(hg.n_vertices) - op, hypergraph_laplacian(hg), atol=1e-14)


def test_disjoint_union_block_structure():
    rng = np.random.default_rng(8)
    a, b = _random_hypergraph(rng, 6), _random_hypergraph(rng, 9)
    u, offsets = disjoint_union([a, b])
    assert offsets.tolist() == [0, 6, 15]
    assert u.incidence.shape == (15, a.n_edges + b.n_edges)
    lap = hypergraph_laplacian(u)
    assert np.allclose(lap[:6, :6], hypergraph_laplacian(a), atol=1e-14)
    assert np.allclose(lap[6:, 6:], hypergraph_laplacian(b), atol=1e-14)
    assert np.all(lap[:6, 6:] == 0)
    assert u.seed_vertices.tolist() == a.seed_vertices.tolist() + (b.seed_vertices + 6).tolist()


def test_dump_roundtrip(tmp_path):
    hg = _random_hypergraph(np.random.default_rng(9))
    path = tmp_path / "hg.txt"
    dump_hypergraph(hg, path)
    assert path.read_text().startswith(f"WHCN-HYPERGRAPH v1 {hg.n_vertices} {hg.n_edges}")
    back = load_hypergraph(path)
    assert np.array_equal(back.incidence, hg.incidence)
    assert np.array_equal(back.weights, hg.weights)
    assert back.edge_kind == hg.edge_kind
    assert back.labeled_vertices == hg.labeled_vertices


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("HYPERGRAPH 3 1 0\n")
    with pytest.raises(ParseError):
        load_hypergraph(path)
    path.write_text("WHCN-HYPERGRAPH v1 3 1 0\nedge 0 1.0 0 1\n")
    with pytest.raises(ParseError) as info:
        load_hypergraph(path)
    assert info.value.line == 2


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        Hypergraph(np.ones((3, 2)), np.ones(3), [("knn", 0)] * 3)
    with pytest.raises(ShapeMismatch):
        build_hypergraph(_seeds([(5, 0), (6, 0)]), np.zeros((4, 2)), k_h=1)


def test_superpoint_adjacency_pairs():
    assign = np.array([0, 0, 1, 1, 2, 2])
    edges = np.array([[0, 1], [1, 2], [2, 1], [3, 4], [5, 4]])
    assert superpoint_adjacency(assign, edges).tolist() == [[0, 1], [1, 2]]
    assert len(superpoint_adjacency(assign, np.array([[0, 1]]))) == 0


def test_adjacency_hyperedges():
    F = np.random.default_rng(10).normal(size=(5, 3))
    seeds = _seeds([(0, 0), (1, 0)])
    hg = build_hypergraph(seeds, F, k_h=2, adjacency=[[0, 1], [1, 2]])
    adj = [(e, tag) for e, (kind, tag) in enumerate(hg.edge_kind) if kind == "adj"]
    assert [tag for _, tag in adj] == [0, 1, 2]
    assert [set(hg.members(e)) for e, _ in adj] == [{0, 1}, {0, 1, 2}, {1, 2}]
    assert hg.n_edges == 1 + 5 + 3
    assert build_hypergraph(seeds, F, k_h=2).n_edges == 6
