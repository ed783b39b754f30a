"""s-t minimum cuts for binary labeling problems.

Two interchangeable solvers: an exact Edmonds-Karp over float capacities
(pure Python, used for small graphs) and scipy's integer max-flow on scaled
capacities for large ones.
"""
from collections import deque

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

_SCIPY_BUDGET = 5e8
EXACT_MAX_NODES = 64


def edmonds_karp(n, arcs, source, sink):
    """Max flow by BFS augmenting paths.

    ``arcs`` is an iterable of ``(u, v, capacity)``; parallel arcs add up.
    Returns ``(flow_value, source_side)`` where ``source_side`` is a boolean
    mask of nodes reachable from ``source`` in the final residual graph.
    """
    residual = [dict() for _ in range(n)]
    for u, v, c in arcs:
        if c <= 0 or u == v:
            continue
        residual[u][v] = residual[u].get(v, 0.0) + c
        residual[v].setdefault(u, 0.0)
    flow = 0.0
    while True:
        parent = [-1] * n
        parent[source] = source
        queue = deque([source])
        while queue and parent[sink] == -1:
            u = queue.popleft()
            for v, cap in residual[u].items():
                if cap > 0 and parent[v] == -1:
                    parent[v] = u
                    queue.append(v)
        if parent[sink] == -1:
            break
        bottleneck = np.inf
        v = sink
        while v != source:
            u = parent[v]
            bottleneck = min(bottleneck, residual[u][v])
            v = u
        v = sink
        while v != source:
            u = parent[v]
            residual[u][v] -= bottleneck
            residual[v][u] += bottleneck
            v = u
        flow += bottleneck
    side = np.zeros(n, dtype=bool)
    side[source] = True
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v, cap in residual[u].items():
            if cap > 0 and not side[v]:
                side[v] = True
                queue.append(v)
    return flow, side


def _scipy_cut(n, rows, cols, caps, source, flow_bound):
    # every capacity and the total flow stay below the int32 range
    scale = _SCIPY_BUDGET / max(flow_bound, caps.max() if len(caps) else 0.0, 1e-300)
    icap = np.maximum(np.rint(caps * scale), 0).astype(np.int32)
    # reverse arcs with zero capacity so residuals exist in both directions
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    d = np.concatenate([icap, np.zeros_like(icap)])
    graph = sparse.csr_matrix((d, (r, c)), shape=(n, n), dtype=np.int32)
    graph.sum_duplicates()
    res = maximum_flow(graph, source, n - 1, method="dinic")
    flow = res.flow.tocsr().astype(np.int64)
    cap = graph.astype(np.int64)
    resid = (cap - flow).tocsr()
    resid.data = (resid.data > 0).astype(np.int8)
    resid.eliminate_zeros()
    reach = breadth_first_order(resid, source, directed=True, return_predecessors=False)
    side = np.zeros(n, dtype=bool)
    side[reach] = True
    return side


def binary_min_cut(unary0, unary1, edges, pair_cost, solver="auto"):
    """Minimize ``sum_i unary[label_i]`` plus ``pair_cost`` per disagreeing edge.

    ``edges`` is an (m, 2) array of undirected pairs among ``len(unary0)``
    nodes. Returns a boolean array, True where the node takes label 1.
    """
    unary0 = np.asarray(unary0, dtype=np.float64)
    unary1 = np.asarray(unary1, dtype=np.float64)
    m = len(unary0)
    s, t = m, m + 1
    diff = unary1 - unary0
    nodes = np.arange(m)
    # s->i is cut when i takes label 1, i->t when it takes label 0
    src_cap = np.maximum(diff, 0.0)
    snk_cap = np.maximum(-diff, 0.0)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    pair = min(float(pair_cost), float(src_cap.sum()) + 1.0)
    if solver == "auto":
        solver = "exact" if m <= EXACT_MAX_NODES else "scipy"
    if solver == "exact":
        arcs = [(s, int(i), float(c)) for i, c in zip(nodes, src_cap) if c > 0]
        arcs += [(int(i), t, float(c)) for i, c in zip(nodes, snk_cap) if c > 0]
        for i, j in edges.tolist():
            arcs.append((i, j, pair))
            arcs.append((j, i, pair))
        _, side = edmonds_karp(m + 2, arcs, s, t)
    elif solver == "scipy":
        keep_s = src_cap > 0
        keep_t = snk_cap > 0
        rows = np.concatenate([np.full(keep_s.sum(), s), nodes[keep_t], edges[:, 0], edges[:, 1]])
        cols = np.concatenate([nodes[keep_s], np.full(keep_t.sum(), t), edges[:, 1], edges[:, 0]])
        caps = np.concatenate([src_cap[keep_s], snk_cap[keep_t], np.full(2 * len(edges), pair)])
        side = _scipy_cut(m + 2, rows, cols, caps, s, float(src_cap.sum()) + 1.0)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return ~side[:m]
