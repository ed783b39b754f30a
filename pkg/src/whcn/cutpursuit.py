"""Superpoint partitioning by greedy l0 cut pursuit.

The energy of a partition assigns every point the mean feature of its region
and pays ``rho`` for each graph edge crossing two regions::

    E = sum_i ||g_i - f_i||^2 + rho * #{(i, j) in edges : region(i) != region(j)}

Regions are split top-down: a two-centroid binary labeling solved by min-cut,
then connected-component refinement. A split is kept only when it strictly
lowers the energy.
"""
import heapq
import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array

from .errors import ShapeMismatch, TooLarge
from .maxflow import binary_min_cut

MAX_ALTERNATIONS = 5
EXACT_FARTHEST_PAIR = 512
MULTI_START_MAX = 12
BRUTE_FORCE_MAX_N = 9


@dataclass
class SuperpointPartition:
    assignment: np.ndarray
    n_superpoints: int
    region_means: np.ndarray

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.n_superpoints)

    def members(self, r):
        return np.flatnonzero(self.assignment == r)


def region_means(features, assignment, n_regions):
    counts = np.bincount(assignment, minlength=n_regions).astype(np.float64)
    sums = np.zeros((n_regions, features.shape[1]))
    np.add.at(sums, assignment, features)
    return sums / counts[:, None]


def partition_from_assignment(features, assignment):
    """Canonical partition: regions numbered by their lowest point index."""
    features = _check_features(features)
    assignment = np.asarray(assignment, dtype=np.int64)
    if len(assignment) != len(features):
        raise ShapeMismatch(f"{len(assignment)} labels for {len(features)} points")
    _, first, inverse = np.unique(assignment, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    canon = rank[inverse.ravel()]
    n_regions = len(first)
    return SuperpointPartition(canon, n_regions, region_means(features, canon, n_regions))


def single_region(features):
    return partition_from_assignment(features, np.zeros(len(features), dtype=np.int64))


def _check_features(features):
    f = check_array(features, dtype=np.float64, ensure_2d=False)
    return f.reshape(len(f), -1)


def _edges(graph):
    return np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)


def partition_energy(features, graph, partition, rho):
    """Fidelity to region means plus ``rho`` per cut edge."""
    f = _check_features(features)
    if len(f) != graph.n or len(partition.assignment) != graph.n:
        raise ShapeMismatch("features, graph and partition sizes differ")
    a = partition.assignment
    means = region_means(f, a, partition.n_superpoints)
    fidelity = float(np.sum((f - means[a]) ** 2))
    e = _edges(graph)
    cut = int(np.count_nonzero(a[e[:, 0]] != a[e[:, 1]])) if len(e) else 0
    return fidelity + rho * cut


def _farthest_pair(f):
    m = len(f)
    if m <= EXACT_FARTHEST_PAIR:
        d = np.sum((f[:, None, :] - f[None, :, :]) ** 2, axis=2)
        i, j = np.unravel_index(np.argmax(d), d.shape)
        return f[i], f[j]
    # double sweep for large regions
    i = int(np.argmax(np.sum((f - f.mean(axis=0)) ** 2, axis=1)))
    j = int(np.argmax(np.sum((f - f[i]) ** 2, axis=1)))
    return f[i], f[j]


def _components(m, local_edges):
    if len(local_edges) == 0:
        return m, np.arange(m)
    adj = sparse.csr_matrix(
        (np.ones(len(local_edges)), (local_edges[:, 0], local_edges[:, 1])), shape=(m, m)
    )
    return connected_components(adj, directed=False)


def _initial_pairs(f):
    yield _farthest_pair(f)
    if len(f) <= MULTI_START_MAX:
        for i in range(len(f)):
            for j in range(i + 1, len(f)):
                yield f[i], f[j]


def _propose_split(f, local_edges, rho, solver):
    """Best split found for one region: ``(delta_energy, component_labels)`` or None."""
    if len(f) < 2:
        return None
    best = None
    for c0, c1 in _initial_pairs(f):
        if np.array_equal(c0, c1):
            continue
        proposal = _split_from(f, local_edges, rho, solver, c0, c1)
        if proposal is not None and (best is None or proposal[0] < best[0]):
            best = proposal
    return best


def _split_from(f, local_edges, rho, solver, c0, c1):
    m = len(f)
    labels = None
    for _ in range(MAX_ALTERNATIONS):
        u0 = np.sum((f - c0) ** 2, axis=1)
        u1 = np.sum((f - c1) ** 2, axis=1)
        new = binary_min_cut(u0, u1, local_edges, rho, solver=solver)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        if labels.all() or not labels.any():
            return None
        c0 = f[~labels].mean(axis=0)
        c1 = f[labels].mean(axis=0)
    # refine both sides into connected components
    same = labels[local_edges[:, 0]] == labels[local_edges[:, 1]] if len(local_edges) else []
    n_comp, comp = _components(m, local_edges[same] if len(local_edges) else local_edges)
    if n_comp < 2:
        return None
    old_fid = float(np.sum((f - f.mean(axis=0)) ** 2))
    new_fid = float(np.sum((f - region_means(f, comp, n_comp)[comp]) ** 2))
    new_cut = int(np.count_nonzero(comp[local_edges[:, 0]] != comp[local_edges[:, 1]]))
    return new_fid - old_fid + rho * new_cut, comp


@dataclass
class CutPursuitResult:
    partition: SuperpointPartition
    energy_trace: list
    n_splits: int


def l0_cut_pursuit(features, graph, rho=0.03, max_superpoints=None, solver="auto"):
    """Greedy top-down minimization of the partition energy.

    Starts from the connected components of ``graph`` and repeatedly applies
    the most energy-reducing split among all regions until no split helps or
    ``max_superpoints`` regions exist. Returns a :class:`CutPursuitResult`
    whose ``energy_trace`` holds the energy before and after every split.
    """
    f = _check_features(features)
    if len(f) != graph.n:
        raise ShapeMismatch(f"{len(f)} feature rows for a {graph.n}-vertex graph")
    if not (np.isfinite(rho) and rho >= 0):
        raise ValueError("rho must be finite and non-negative")
    n = len(f)
    edges = _edges(graph)
    _, assign = _components(n, edges)
    assign = assign.astype(np.int64)
    n_regions = int(assign.max()) + 1 if n else 0
    tie = itertools.count()
    heap = []

    def consider(r):
        idx = np.flatnonzero(assign == r)
        if len(idx) < 2:
            return
        local = np.full(n, -1, dtype=np.int64)
        local[idx] = np.arange(len(idx))
        inside = (assign[edges[:, 0]] == r) & (assign[edges[:, 1]] == r)
        local_edges = local[edges[inside]]
        proposal = _propose_split(f[idx], local_edges, rho, solver)
        if proposal is None:
            return
        delta, comp = proposal
        if delta < -1e-12 * max(1.0, abs(energy)):
            heapq.heappush(heap, (delta, next(tie), r, idx, comp))

    energy = partition_energy(f, graph, _as_partition(f, assign, n_regions), rho)
    trace = [energy]
    for r in range(n_regions):
        consider(r)
    n_splits = 0
    while heap and (max_superpoints is None or n_regions < max_superpoints):
        _, _, r, idx, comp = heapq.heappop(heap)
        new_ids = [r] + list(range(n_regions, n_regions + int(comp.max())))
        assign[idx] = np.asarray(new_ids)[comp]
        n_regions += int(comp.max())
        n_splits += 1
        energy = partition_energy(f, graph, _as_partition(f, assign, n_regions), rho)
        trace.append(energy)
        for nr in new_ids:
            consider(nr)
    return CutPursuitResult(partition_from_assignment(f, assign), trace, n_splits)


def _as_partition(f, assign, n_regions):
    return SuperpointPartition(assign, n_regions, region_means(f, assign, n_regions))


# -- exhaustive oracle -------------------------------------------------------


def set_partitions(n):
    """All set partitions of ``range(n)`` as restricted growth strings."""
    if n == 0:
        yield ()
        return
    labels = [0] * n
    maxes = [0] * n

    def rec(i):
        if i == n:
            yield tuple(labels)
            return
        for v in range(maxes[i - 1] + 2):
            labels[i] = v
            maxes[i] = max(maxes[i - 1], v)
            yield from rec(i + 1)

    yield from rec(1)


def brute_force_partition(features, graph, rho):
    """Exact minimizer of the partition energy by enumeration (n <= 9).

    Each raw set partition is refined into graph-connected parts before
    scoring. Returns ``(partition, energy)``.
    """
    f = _check_features(features)
    n = len(f)
    if n > BRUTE_FORCE_MAX_N:
        raise TooLarge(f"brute force is limited to {BRUTE_FORCE_MAX_N} points, got {n}")
    edges = [tuple(e) for e in _edges(graph).tolist()]
    best, best_energy = None, np.inf
    for labels in set_partitions(n):
        refined = _refine_connected(labels, edges, n)
        energy = 0.0
        for block in set(refined):
            rows = [i for i in range(n) if refined[i] == block]
            mean = f[rows].mean(axis=0)
            energy += float(np.sum((f[rows] - mean) ** 2))
        energy += rho * sum(1 for i, j in edges if refined[i] != refined[j])
        if energy < best_energy:
            best, best_energy = refined, energy
    return partition_from_assignment(f, np.asarray(best)), best_energy


def _refine_connected(labels, edges, n):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        if labels[i] == labels[j]:
            parent[find(i)] = find(j)
    return tuple(find(i) for i in range(n))


class CutPursuit(ClusterMixin, BaseEstimator):
    """Estimator front-end to :func:`l0_cut_pursuit`.

    ``fit(X, graph=...)`` takes per-point features ``X`` and a
    :class:`~whcn.geomfeat.PointGraph`; the superpoint index of each point
    ends up in ``labels_``.
    """

    def __init__(self, rho=0.03, max_superpoints=None, solver="auto"):
        self.rho = rho
        self.max_superpoints = max_superpoints
        self.solver = solver

    def fit(self, X, y=None, graph=None):
        if graph is None:
            raise ValueError("CutPursuit.fit needs the point graph")
        result = l0_cut_pursuit(X, graph, self.rho, self.max_superpoints, self.solver)
        self.partition_ = result.partition
        self.labels_ = result.partition.assignment
        self.n_superpoints_ = result.partition.n_superpoints
        self.energy_trace_ = result.energy_trace
        self.energy_ = result.energy_trace[-1]
        return self

    def fit_predict(self, X, y=None, graph=None):
        return self.fit(X, graph=graph).labels_


def default_superpoint_target(n_points):
    return max(1, min(64, n_points // 16))
