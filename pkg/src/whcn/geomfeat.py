"""k-nearest-neighbor point graph and local eigenvalue shape features."""
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InvalidK, ShapeMismatch, TooFewPoints

FEATURE_NAMES = ("linearity", "planarity", "scattering", "verticality")
DEGENERATE_EIG = 1e-12
_BRUTE_CHUNK = 256
_TREE_THRESHOLD = 1000


@dataclass
class PointGraph:
    """Undirected simple graph; ``edges`` rows are ``(i, j)`` with ``i < j``, sorted."""

    n: int
    edges: np.ndarray
    k: int

    @property
    def n_edges(self):
        return len(self.edges)

    def adjacency(self):
        """Symmetric 0/1 CSR adjacency without self-loops."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sparse.csr_matrix(
            (data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(self.n, self.n)
        )

    def degrees(self):
        return np.bincount(self.edges.ravel(), minlength=self.n)


def _check_points(points):
    pts = check_array(points, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    if pts.shape[1] != 3:
        raise ShapeMismatch(f"points must be (n, 3), got {pts.shape}")
    return pts


def _sq_dists(pts, rows, cols):
    diff = pts[rows][:, None, :] - pts[cols][None, :, :]
    return np.sum(diff * diff, axis=2)


def _select_k(d, cols, k):
    """Per row, the ``k`` columns smallest by (distance, column index)."""
    order = np.lexsort((np.broadcast_to(cols, d.shape), d), axis=1)
    return np.take_along_axis(np.broadcast_to(cols, d.shape), order[:, :k], axis=1)


def _knn_brute(pts, k):
    n = len(pts)
    nbrs = np.empty((n, k), dtype=np.int64)
    cols = np.arange(n)
    for start in range(0, n, _BRUTE_CHUNK):
        rows = np.arange(start, min(start + _BRUTE_CHUNK, n))
        d = _sq_dists(pts, rows, cols)
        d[np.arange(len(rows)), rows] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1]
        below = d < kth[:, None]
        at = d == kth[:, None]
        need = k - below.sum(axis=1)
        take = below | (at & (np.cumsum(at, axis=1) <= need[:, None]))
        # exactly k columns per row, in index order; reorder by (distance, index)
        idx = np.nonzero(take)[1].reshape(len(rows), k)
        nbrs[rows] = _select_k(np.take_along_axis(d, idx, axis=1), idx, k)
    return nbrs


def _knn_tree(pts, k):
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=k + 1)
    radius = dist[:, -1]
    nbrs = np.empty((len(pts), k), dtype=np.int64)
    for i, cand in enumerate(tree.query_ball_point(pts, radius * (1 + 1e-9) + 1e-15)):
        cand = np.array([c for c in cand if c != i], dtype=np.int64)
        d = _sq_dists(pts, np.array([i]), cand)
        nbrs[i] = _select_k(d, cand, k)[0]
    return nbrs


def knn_neighbors(points, k, method="auto"):
    """Directed k-NN table (n, k); ties broken by lower point index."""
    pts = _check_points(points)
    n = len(pts)
    if n < 2:
        raise TooFewPoints(f"need at least 2 points, got {n}")
    if not 1 <= k <= n - 1:
        raise InvalidK(f"K={k} outside [1, {n - 1}]")
    if method == "auto":
        method = "brute" if n <= _TREE_THRESHOLD else "tree"
    if method == "brute":
        return _knn_brute(pts, k)
    if method == "tree":
        return _knn_tree(pts, k)
    raise ValueError(f"unknown method {method!r}")


def knn_graph(points, k=10, method="auto"):
    """Union-symmetrized k-NN graph under Euclidean distance."""
    nbrs = knn_neighbors(points, k, method)
    n = len(nbrs)
    src = np.repeat(np.arange(n), k)
    dst = nbrs.ravel()
    pairs = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    edges = np.unique(pairs, axis=0)
    return PointGraph(n=n, edges=edges, k=k)


def neighborhood_covariances(points, graph):
    """Covariance of each point together with its graph neighbors, (n, 3, 3)."""
    pts = _check_points(points)
    if len(pts) != graph.n:
        raise ShapeMismatch(f"graph has {graph.n} vertices, cloud has {len(pts)} points")
    n = graph.n
    e = graph.edges
    centers = np.concatenate([np.arange(n), e[:, 0], e[:, 1]])
    members = np.concatenate([np.arange(n), e[:, 1], e[:, 0]])
    counts = np.bincount(centers, minlength=n).astype(np.float64)
    means = np.stack(
        [np.bincount(centers, weights=pts[members, a], minlength=n) for a in range(3)], axis=1
    ) / counts[:, None]
    diff = pts[members] - means[centers]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(centers, weights=diff[:, a] * diff[:, b], minlength=n) / counts
            cov[:, a, b] = s
            cov[:, b, a] = s
    return cov


def geometric_features(points, graph):
    """Per-point (linearity, planarity, scattering, verticality), each in [0, 1]."""
    cov = neighborhood_covariances(points, graph)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    l1, l2, l3 = vals[:, 2], vals[:, 1], vals[:, 0]
    ok = l1 > DEGENERATE_EIG
    safe = np.where(ok, l1, 1.0)
    feats = np.zeros((graph.n, 4))
    feats[:, 0] = (l1 - l2) / safe
    feats[:, 1] = (l2 - l3) / safe
    feats[:, 2] = l3 / safe
    feats[:, 3] = 1.0 - np.abs(vecs[:, 2, 0])
    feats[~ok] = 0.0
    return np.clip(feats, 0.0, 1.0)


class GeometricFeatures(TransformerMixin, BaseEstimator):
    """Transformer wrapping :func:`knn_graph` and :func:`geometric_features`.

    ``fit`` stores the graph in ``graph_`` and the features in ``features_``.
    """

    def __init__(self, n_neighbors=10, method="auto"):
        self.n_neighbors = n_neighbors
        self.method = method

    def fit(self, X, y=None):
        self.graph_ = knn_graph(X, self.n_neighbors, self.method)
        self.features_ = geometric_features(X, self.graph_)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "graph_")
        return geometric_features(X, knn_graph(X, self.n_neighbors, self.method))

    def fit_transform(self, X, y=None):
        return self.fit(X).features_

    def get_feature_names_out(self, input_features=None):
        return np.array(FEATURE_NAMES, dtype=object)
