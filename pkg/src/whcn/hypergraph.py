"""Hypergraph over superpoints: construction, degrees, normalized Laplacian.

Vertices are superpoints. Each category with at least two seeds gets a class
hyperedge holding exactly its seeds; every vertex also gets a k-NN hyperedge
(itself plus its nearest neighbors in descriptor space) so that unlabeled
vertices are reachable by propagation. Optionally every vertex with spatial
neighbors gets an adjacency hyperedge (itself plus the superpoints it touches
in the point graph).
"""
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import IoError, NoSeeds, ParseError, ShapeMismatch

HEADER = "WHCN-HYPERGRAPH"
VERSION = "v1"


class HypergraphWarning(UserWarning):
    pass


@dataclass
class Hypergraph:
    incidence: np.ndarray
    weights: np.ndarray
    edge_kind: list
    seed_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.incidence = np.asarray(self.incidence, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.incidence.ndim != 2 or self.incidence.shape[1] != len(self.weights):
            raise ShapeMismatch(
                f"incidence {self.incidence.shape} vs {len(self.weights)} hyperedge weights"
            )
        if len(self.edge_kind) != len(self.weights):
            raise ShapeMismatch("one kind tag per hyperedge required")

    @property
    def n_vertices(self):
        return self.incidence.shape[0]

    @property
    def n_edges(self):
        return self.incidence.shape[1]

    @property
    def labeled_vertices(self):
        return list(zip(self.seed_vertices.tolist(), self.seed_labels.tolist()))

    def members(self, e):
        return np.flatnonzero(self.incidence[:, e])

    def with_weights(self, weights):
        return replace(self, weights=np.asarray(weights, dtype=np.float64), notes=list(self.notes))

    def drop_edges(self, mask):
        keep = ~np.asarray(mask, dtype=bool)
        return replace(
            self,
            incidence=self.incidence[:, keep],
            weights=self.weights[keep],
            edge_kind=[k for k, ok in zip(self.edge_kind, keep) if ok],
            notes=list(self.notes),
        )

    def sparse_incidence(self):
        return sparse.csr_matrix(self.incidence)


def knn_table(X, k):
    """Directed k-NN (n, k) under Euclidean distance; ties to the lower index."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    diff = X[:, None, :] - X[None, :, :]
    d = np.sum(diff * diff, axis=2)
    d[np.arange(n), np.arange(n)] = np.inf
    cols = np.broadcast_to(np.arange(n), d.shape)
    order = np.lexsort((cols, d), axis=1)
    return order[:, :k]


def superpoint_adjacency(assignment, edges):
    """Unique superpoint pairs ``(u, v)``, u < v, joined by at least one point edge."""
    a = np.asarray(assignment, dtype=np.int64)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    u, v = a[e[:, 0]], a[e[:, 1]]
    cross = u != v
    pairs = np.column_stack([np.minimum(u, v)[cross], np.maximum(u, v)[cross]])
    return np.unique(pairs, axis=0) if len(pairs) else pairs


def build_hypergraph(seeds, descriptors, k_h=5, adjacency=None):
    """Class hyperedges from ``seeds`` plus one k-NN hyperedge per vertex.

    Class hyperedges come first (ascending category), then k-NN hyperedges in
    vertex order, then, when ``adjacency`` pairs are given, one adjacency
    hyperedge per vertex that has neighbors. Categories with a single seed are
    dropped with a :class:`HypergraphWarning`. All weights start at 1.
    """
    F = np.asarray(descriptors, dtype=np.float64)
    n = len(F)
    if len(seeds) == 0:
        raise NoSeeds("cannot build a hypergraph without seed labels")
    if n < 2:
        raise ShapeMismatch("a hypergraph needs at least two vertices")
    if k_h < 1:
        raise ValueError("k_h must be at least 1")
    sp = np.asarray(seeds.superpoints, dtype=np.int64)
    cat = np.asarray(seeds.categories, dtype=np.int64)
    if sp.max() >= n:
        raise ShapeMismatch(f"seed superpoint {sp.max()} outside {n} vertices")
    columns, kinds, notes = [], [], []
    for c in np.unique(cat):
        members = sp[cat == c]
        if len(members) < 2:
            msg = f"category {int(c)} has a single seed; class hyperedge dropped"
            warnings.warn(msg, HypergraphWarning, stacklevel=2)
            notes.append(msg)
            continue
        col = np.zeros(n)
        col[members] = 1.0
        columns.append(col)
        kinds.append(("class", int(c)))
    k = min(k_h, n - 1)
    nbrs = knn_table(F, k)
    for v in range(n):
        col = np.zeros(n)
        col[v] = 1.0
        col[nbrs[v]] = 1.0
        columns.append(col)
        kinds.append(("knn", v))
    if adjacency is not None:
        pairs = np.asarray(adjacency, dtype=np.int64).reshape(-1, 2)
        A = np.zeros((n, n))
        A[pairs[:, 0], pairs[:, 1]] = 1.0
        A[pairs[:, 1], pairs[:, 0]] = 1.0
        np.fill_diagonal(A, 0.0)
        for v in np.flatnonzero(A.any(axis=1)):
            col = A[v].copy()
            col[v] = 1.0
            columns.append(col)
            kinds.append(("adj", int(v)))
    H = np.column_stack(columns)
    return Hypergraph(H, np.ones(H.shape[1]), kinds, sp.copy(), cat.copy(), notes)


def vertex_degrees(hg, weights=None):
    """d(v) = sum_e w(e) h(v, e)."""
    w = hg.weights if weights is None else np.asarray(weights, dtype=np.float64)
    return hg.incidence @ w


def hyperedge_degrees(hg):
    """b(e) = sum_v h(v, e)."""
    return hg.incidence.sum(axis=0)


def inv_sqrt_degrees(d):
    """d^{-1/2} with zero degrees mapped to zero."""
    out = np.zeros_like(d, dtype=np.float64)
    pos = d > 0
    out[pos] = 1.0 / np.sqrt(d[pos])
    return out


def propagation_operator(hg, weights=None):
    """Dense ``D^{-1/2} H W B^{-1} H^T D^{-1/2}``."""
    w = hg.weights if weights is None else np.asarray(weights, dtype=np.float64)
    H = hg.incidence
    dinv = inv_sqrt_degrees(H @ w)
    b = hyperedge_degrees(hg)
    scaled = H * (w / b)
    theta = scaled @ H.T
    return dinv[:, None] * theta * dinv[None, :]


def hypergraph_laplacian(hg, weights=None):
    """Normalized Laplacian ``I - D^{-1/2} H W B^{-1} H^T D^{-1/2}``."""
    op = propagation_operator(hg, weights)
    lap = np.eye(hg.n_vertices) - op
    return 0.5 * (lap + lap.T)


def disjoint_union(hypergraphs):
    """Block-diagonal union; vertex ids of later graphs are offset."""
    blocks = [hg.incidence for hg in hypergraphs]
    H = sparse.block_diag(blocks, format="csr").toarray() if blocks else np.zeros((0, 0))
    offsets = np.cumsum([0] + [hg.n_vertices for hg in hypergraphs])
    kinds, sv, sl, notes = [], [], [], []
    for off, hg in zip(offsets, hypergraphs):
        kinds += [(kind, int(tag) + off if kind != "class" else tag) for kind, tag in hg.edge_kind]
        sv.append(hg.seed_vertices + off)
        sl.append(hg.seed_labels)
        notes += hg.notes
    return Hypergraph(
        H,
        np.concatenate([hg.weights for hg in hypergraphs]),
        kinds,
        np.concatenate(sv).astype(np.int64),
        np.concatenate(sl).astype(np.int64),
        notes,
    ), offsets


def dump_hypergraph(hg, path):
    path = Path(path)
    lines = [f"{HEADER} {VERSION} {hg.n_vertices} {hg.n_edges} {len(hg.seed_vertices)}"]
    for e, (kind, tag) in enumerate(hg.edge_kind):
        members = " ".join(str(v) for v in hg.members(e).tolist())
        lines.append(f"{kind} {tag} {float(hg.weights[e])!r} {members}")
    for v, c in hg.labeled_vertices:
        lines.append(f"seed {v} {c}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_hypergraph(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[0] != HEADER or head[1] != VERSION:
        raise ParseError(1, f"expected '{HEADER} {VERSION} <N> <E> <T>'")
    n, n_e, n_t = (int(x) for x in head[2:])
    H = np.zeros((n, n_e))
    weights, kinds, sv, sl = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "seed":
                sv.append(int(tok[1]))
                sl.append(int(tok[2]))
            elif tok[0] in ("class", "knn", "adj"):
                e = len(weights)
                kinds.append((tok[0], int(tok[1])))
                weights.append(float(tok[2]))
                H[[int(v) for v in tok[3:]], e] = 1.0
            else:
                raise ParseError(lineno, "unknown record kind", tok[0])
        except (ValueError, IndexError):
            raise ParseError(lineno, "malformed record", line) from None
    if len(weights) != n_e or len(sv) != n_t:
        raise ParseError(1, "record counts disagree with the header")
    return Hypergraph(H, np.array(weights), kinds, np.array(sv, dtype=np.int64), np.array(sl, dtype=np.int64))
