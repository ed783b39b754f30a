"""Weighted hypergraph convolutional network.

Each layer computes hyperedge attention weights from its own input, rebuilds
the degree matrices from those weights, and applies::

    X' = act(D^{-1/2} H W B^{-1} H^T D^{-1/2} X Theta)

with ReLU on hidden layers and identity on the output layer, followed by a
row-wise softmax. Gradients are written out by hand, including the path
through the attention weights and the degree normalization.
"""
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import (
    DegenerateHyperedge,
    IoError,
    NoLabeledVertices,
    ParseError,
    ShapeMismatch,
)
from .hypergraph import hyperedge_degrees, inv_sqrt_degrees
from .numcore import AdamState, adam_step

MODEL_HEADER = "WHCN-MODEL v1"
LOG_FLOOR = 1e-12
# per_layer: every layer scores hyperedges from its own input with its own a;
# shared: the first layer's weights are reused by every later layer
ATTENTION_MODES = ("per_layer", "shared")


@dataclass
class WhcnModel:
    thetas: list
    attention: list
    hidden_dim: int = 32
    dropout: float = 0.5
    mu: float = 1.0
    leaky_slope: float = 0.01
    rng_seed: int = 0
    use_attention: bool = True
    attention_mode: str = "per_layer"

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if len(self.thetas) != len(self.attention):
            raise ShapeMismatch("one attention vector per layer required")
        for t, a in zip(self.thetas, self.attention):
            if len(a) != 2 * t.shape[1]:
                raise ShapeMismatch(f"attention of length {len(a)} for a {t.shape} layer")

    @property
    def n_layers(self):
        return len(self.thetas)

    @property
    def dims(self):
        return [self.thetas[0].shape[0]] + [t.shape[1] for t in self.thetas]

    def parameters(self):
        return list(self.thetas) + list(self.attention)

    def with_parameters(self, params):
        k = self.n_layers
        return replace(self, thetas=list(params[:k]), attention=list(params[k:]))


def init_model(n_features, n_classes, hidden_dim=32, dropout=0.5, mu=1.0,
               leaky_slope=0.01, rng_seed=0, use_attention=True, n_layers=2,
               attention_mode="per_layer"):
    """Scaled uniform init: Theta in +-sqrt(6 / (d_in + d_out)), a in +-0.05."""
    rng = np.random.default_rng(rng_seed)
    dims = [n_features] + [hidden_dim] * (n_layers - 1) + [n_classes]
    thetas, attn = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (d_in + d_out))
        thetas.append(rng.uniform(-lim, lim, size=(d_in, d_out)))
        attn.append(rng.uniform(-0.05, 0.05, size=2 * d_out))
    return WhcnModel(
        thetas, attn, hidden_dim, dropout, mu, leaky_slope, rng_seed, use_attention, attention_mode
    )


@dataclass
class VertexLabeling:
    probabilities: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.labels is None:
            self.labels = np.argmax(self.probabilities, axis=1)


class _Ops:
    """Sparse incidence and ordered member pairs of a hypergraph."""

    def __init__(self, hg):
        self.n = hg.n_vertices
        self.H = sparse.csr_matrix(hg.incidence)
        self.Ht = self.H.T.tocsr()
        self.b = hyperedge_degrees(hg)
        csc = self.H.tocsc()
        pi, pj, pe = [], [], []
        for e in range(csc.shape[1]):
            m = csc.indices[csc.indptr[e]:csc.indptr[e + 1]]
            ii, jj = np.meshgrid(m, m, indexing="ij")
            off = ii != jj
            pi.append(ii[off])
            pj.append(jj[off])
            pe.append(np.full(off.sum(), e))
        self.pi = np.concatenate(pi) if pi else np.zeros(0, dtype=np.int64)
        self.pj = np.concatenate(pj) if pj else np.zeros(0, dtype=np.int64)
        self.pe = np.concatenate(pe) if pe else np.zeros(0, dtype=np.int64)
        self.n_pairs = self.b * (self.b - 1)


def _ops(hg):
    ops = getattr(hg, "_ops", None)
    if ops is None:
        ops = _Ops(hg)
        hg._ops = ops
    return ops


def _leaky(s, slope):
    return np.where(s > 0, s, slope * s)


def _attention(Z, a, ops, mu, slope):
    if np.any(ops.b < 2):
        bad = int(np.flatnonzero(ops.b < 2)[0])
        raise DegenerateHyperedge(f"hyperedge {bad} has fewer than two members")
    d = Z.shape[1]
    p = Z @ a[:d]
    q = Z @ a[d:]
    s = p[ops.pi] + q[ops.pj]
    g = np.exp(-_leaky(s, slope) / mu)
    w = np.bincount(ops.pe, weights=g, minlength=len(ops.b)) / ops.n_pairs
    return w, (s, g, p, q)


def _attention_backward(dw, Z, a, ops, mu, slope, cache):
    s, g, _, _ = cache
    d = Z.shape[1]
    dg = dw[ops.pe] / ops.n_pairs[ops.pe]
    ds = dg * (-g / mu) * np.where(s > 0, 1.0, slope)
    dp = np.bincount(ops.pi, weights=ds, minlength=ops.n)
    dq = np.bincount(ops.pj, weights=ds, minlength=ops.n)
    da = np.concatenate([Z.T @ dp, Z.T @ dq])
    dZ = np.outer(dp, a[:d]) + np.outer(dq, a[d:])
    return da, dZ


def hyperedge_attention_weights(x, theta, a, hg, mu=1.0, leaky_slope=0.01):
    """Mean of ``exp(-LeakyReLU(a . [x_i Theta || x_j Theta]) / mu)`` over ordered member pairs."""
    Z = np.asarray(x, dtype=np.float64) @ np.asarray(theta, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if len(a) != 2 * Z.shape[1]:
        raise ShapeMismatch(f"attention vector of length {len(a)} for {Z.shape[1]} channels")
    return _attention(Z, a, _ops(hg), mu, leaky_slope)[0]


def _propagate(Z, w, ops):
    dinv = inv_sqrt_degrees(ops.H @ w)
    c = w / ops.b
    U0 = ops.Ht @ (dinv[:, None] * Z)
    V = ops.H @ (c[:, None] * U0)
    return dinv[:, None] * V, (dinv, c, U0, V)


def _propagate_backward(dY, Z, w, ops, cache):
    dinv, c, U0, V = cache
    dV = dinv[:, None] * dY
    d_dinv = np.sum(dY * V, axis=1)
    dU = ops.Ht @ dV
    dc = np.sum(dU * U0, axis=1)
    dS = ops.H @ (c[:, None] * dU)
    dZ = dinv[:, None] * dS
    d_dinv += np.sum(dS * Z, axis=1)
    dd = -0.5 * dinv ** 3 * d_dinv
    dw = ops.Ht @ dd + dc / ops.b
    return dZ, dw


def whcn_layer(x, hg, theta, activation="relu", weights=None):
    """One propagation step with the hypergraph's current (or given) weights."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != hg.n_vertices or x.shape[1] != theta.shape[0]:
        raise ShapeMismatch(f"input {x.shape}, theta {theta.shape}, {hg.n_vertices} vertices")
    w = hg.weights if weights is None else np.asarray(weights, dtype=np.float64)
    Y, _ = _propagate(x @ theta, w, _ops(hg))
    if activation == "relu":
        return np.maximum(Y, 0.0)
    if activation == "identity":
        return Y
    raise ValueError(f"unknown activation {activation!r}")


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dropout_mask(rng, shape, rate):
    if rng is None or rate == 0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def forward(model, x0, hg, training=False, rng=None, return_cache=False):
    """Vertex probabilities; dropout on hidden activations only when ``training``."""
    x = check_array(x0, dtype=np.float64)
    if x.shape != (hg.n_vertices, model.dims[0]):
        raise ShapeMismatch(f"input {x.shape} vs {hg.n_vertices} vertices x {model.dims[0]} features")
    ops = _ops(hg)
    caches = []
    for layer, (theta, a) in enumerate(zip(model.thetas, model.attention)):
        Z = x @ theta
        if model.use_attention and (layer == 0 or model.attention_mode == "per_layer"):
            w, acache = _attention(Z, a, ops, model.mu, model.leaky_slope)
        elif model.use_attention:
            w, acache = caches[0][2], None
        else:
            w, acache = np.ones(len(ops.b)), None
        Y, pcache = _propagate(Z, w, ops)
        last = layer == model.n_layers - 1
        mask = None
        if last:
            out = Y
        else:
            out = np.maximum(Y, 0.0)
            if training:
                mask = _dropout_mask(rng, out.shape, model.dropout)
                if mask is not None:
                    out = out * mask
        caches.append((x, Z, w, acache, pcache, Y, mask))
        x = out
    labeling = VertexLabeling(softmax(x))
    return (labeling, caches) if return_cache else labeling


def _check_targets(vertices, labels, n, n_classes):
    vertices = np.asarray(vertices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(vertices) == 0:
        raise NoLabeledVertices("loss needs at least one labeled vertex")
    if len(vertices) != len(labels):
        raise ShapeMismatch("one label per labeled vertex required")
    if vertices.min() < 0 or vertices.max() >= n or labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeMismatch("labeled vertex or category out of range")
    return vertices, labels


def loss(labeling, vertices, labels):
    """Cross-entropy summed over the labeled vertices, log clamped at 1e-12."""
    P = getattr(labeling, "probabilities", labeling)
    vertices, labels = _check_targets(vertices, labels, P.shape[0], P.shape[1])
    return float(-np.sum(np.log(np.maximum(P[vertices, labels], LOG_FLOOR))))


def loss_and_grads(model, x0, hg, vertices, labels, training=False, rng=None):
    """Objective and its gradient for every parameter, in ``model.parameters()`` order."""
    labeling, caches = forward(model, x0, hg, training, rng, return_cache=True)
    P = labeling.probabilities
    vertices, labels = _check_targets(vertices, labels, *P.shape)
    value = loss(P, vertices, labels)
    dlogits = np.zeros_like(P)
    np.add.at(dlogits, vertices, P[vertices])
    np.add.at(dlogits, (vertices, labels), -1.0)
    # the clamped log is flat, so those rows carry no gradient
    dead = P[vertices, labels] < LOG_FLOOR
    if dead.any():
        np.add.at(dlogits, vertices[dead], -(P[vertices[dead]] - np.eye(P.shape[1])[labels[dead]]))
    ops = _ops(hg)
    d_theta = [None] * model.n_layers
    d_attn = [None] * model.n_layers
    d_out = dlogits
    shared_dw = 0.0
    for layer in reversed(range(model.n_layers)):
        x, Z, w, acache, pcache, Y, mask = caches[layer]
        if layer < model.n_layers - 1:
            if mask is not None:
                d_out = d_out * mask
            d_out = d_out * (Y > 0)
        dZ, dw = _propagate_backward(d_out, Z, w, ops, pcache)
        if model.use_attention and acache is None:
            # reused weights: route their gradient to the layer that made them
            shared_dw = shared_dw + dw
            da = np.zeros_like(model.attention[layer])
        elif model.use_attention:
            dw = dw + shared_dw
            da, dZa = _attention_backward(
                dw, Z, model.attention[layer], ops, model.mu, model.leaky_slope, acache
            )
            dZ = dZ + dZa
        else:
            da = np.zeros_like(model.attention[layer])
        d_theta[layer] = x.T @ dZ
        d_attn[layer] = da
        d_out = dZ @ model.thetas[layer].T
    return value, d_theta + d_attn


def train(model, x0, hg, vertices, labels, epochs=500, learning_rate=0.003):
    """Full-batch Adam. Returns ``(trained_model, loss_trace)``.

    The dropout mask of epoch ``t`` is drawn from a generator seeded by
    ``(model.rng_seed, t)``, so runs are reproducible.
    """
    if len(vertices) == 0:
        raise NoLabeledVertices("training needs at least one seed")
    params = [p.copy() for p in model.parameters()]
    states = [AdamState(p.shape, learning_rate=learning_rate) for p in params]
    trace = []
    for epoch in range(epochs):
        rng = np.random.default_rng([model.rng_seed, epoch])
        current = model.with_parameters(params)
        value, grads = loss_and_grads(current, x0, hg, vertices, labels, training=True, rng=rng)
        trace.append(value)
        for i, (p, g) in enumerate(zip(params, grads)):
            params[i], states[i] = adam_step(p, g, states[i])
    return model.with_parameters(params), trace


def masked_labels(probabilities, allowed):
    """Argmax restricted to the ``allowed`` categories."""
    allowed = np.asarray(sorted(allowed), dtype=np.int64)
    return allowed[np.argmax(np.asarray(probabilities)[:, allowed], axis=1)]


def expand_to_points(labeling, partition):
    """Every point takes the label of its superpoint."""
    labels = np.asarray(getattr(labeling, "labels", labeling))
    if len(labels) != partition.n_superpoints:
        raise ShapeMismatch(f"{len(labels)} vertex labels for {partition.n_superpoints} superpoints")
    return labels[partition.assignment]


# -- persistence ---------------------------------------------------------------


def _fmt_row(row):
    return " ".join(repr(float(v)) for v in row)


def save_model(model, path):
    path = Path(path)
    lines = [
        MODEL_HEADER,
        f"layers {model.n_layers} dims {' '.join(str(d) for d in model.dims)}",
        f"hidden_dim {model.hidden_dim}",
        f"dropout {model.dropout!r}",
        f"mu {model.mu!r}",
        f"leaky_slope {model.leaky_slope!r}",
        f"rng_seed {model.rng_seed}",
        f"use_attention {int(model.use_attention)}",
        f"attention_mode {model.attention_mode}",
    ]
    for layer, (theta, a) in enumerate(zip(model.thetas, model.attention)):
        lines.append(f"theta {layer} {theta.shape[0]} {theta.shape[1]}")
        lines += [_fmt_row(r) for r in theta]
        lines.append(f"attention {layer} {len(a)}")
        lines.append(_fmt_row(a))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0].strip() != MODEL_HEADER:
        raise ParseError(1, f"expected '{MODEL_HEADER}'")
    pos = 1

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(pos, "unexpected end of checkpoint")
        pos += 1
        return pos, lines[pos - 1].split()

    try:
        _, head = take()
        n_layers = int(head[1])
        meta = {}
        for _ in range(7):
            _, tok = take()
            meta[tok[0]] = tok[1]
        thetas, attn = [], []
        for _ in range(n_layers):
            _, tok = take()
            rows, cols = int(tok[2]), int(tok[3])
            thetas.append(np.array([[float(v) for v in take()[1]] for _ in range(rows)]).reshape(rows, cols))
            take()
            attn.append(np.array([float(v) for v in take()[1]]))
    except (ValueError, IndexError):
        raise ParseError(pos, "malformed checkpoint line", lines[pos - 1] if pos else None) from None
    return WhcnModel(
        thetas, attn,
        hidden_dim=int(meta["hidden_dim"]),
        dropout=float(meta["dropout"]),
        mu=float(meta["mu"]),
        leaky_slope=float(meta["leaky_slope"]),
        rng_seed=int(meta["rng_seed"]),
        use_attention=bool(int(meta["use_attention"])),
        attention_mode=meta["attention_mode"],
    )


def write_loss_csv(trace, path):
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss"])
            for epoch, value in enumerate(trace):
                writer.writerow([epoch, repr(float(value))])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_loss_csv(path):
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            return [float(row["loss"]) for row in csv.DictReader(fh)]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# -- estimator -------------------------------------------------------------------


class WHCN(ClassifierMixin, BaseEstimator):
    """Transductive vertex classifier on a fixed hypergraph.

    ``fit(X, y, hypergraph=hg)`` takes vertex descriptors ``X`` and per-vertex
    targets ``y`` with ``-1`` for unlabeled vertices. When ``y`` is None the
    hypergraph's own seed labels are used. Predictions for every vertex are
    stored in ``transduction_``.
    """

    def __init__(self, n_classes=None, hidden_dim=32, epochs=500, learning_rate=0.003,
                 dropout=0.5, mu=1.0, leaky_slope=0.01, use_attention=True,
                 attention_mode="per_layer", random_state=0):
        self.n_classes = n_classes
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.mu = mu
        self.leaky_slope = leaky_slope
        self.use_attention = use_attention
        self.attention_mode = attention_mode
        self.random_state = random_state

    def fit(self, X, y=None, hypergraph=None):
        if hypergraph is None:
            raise ValueError("WHCN.fit needs the hypergraph")
        X = check_array(X, dtype=np.float64)
        if y is None:
            vertices, labels = hypergraph.seed_vertices, hypergraph.seed_labels
        else:
            y = np.asarray(y, dtype=np.int64)
            if len(y) != len(X):
                raise ShapeMismatch(f"{len(y)} targets for {len(X)} vertices")
            vertices = np.flatnonzero(y >= 0)
            labels = y[vertices]
        if len(vertices) == 0:
            raise NoLabeledVertices("no labeled vertices to train on")
        n_classes = self.n_classes or int(labels.max()) + 1
        model = init_model(
            X.shape[1], n_classes, self.hidden_dim, self.dropout, self.mu,
            self.leaky_slope, self.random_state, self.use_attention,
            attention_mode=self.attention_mode,
        )
        self.model_, self.loss_trace_ = train(
            model, X, hypergraph, vertices, labels, self.epochs, self.learning_rate
        )
        self.hypergraph_ = hypergraph
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[1]
        self.label_distributions_ = self.predict_proba(X)
        self.transduction_ = np.argmax(self.label_distributions_, axis=1)
        return self

    def predict_proba(self, X, hypergraph=None):
        check_is_fitted(self, "model_")
        hg = self.hypergraph_ if hypergraph is None else hypergraph
        return forward(self.model_, X, hg).probabilities

    def predict(self, X, hypergraph=None):
        return np.argmax(self.predict_proba(X, hypergraph), axis=1)

    def hyperedge_weights(self, X, hypergraph=None, layer=0):
        """Hyperedge weights the fitted model uses at ``layer`` (all ones without attention)."""
        check_is_fitted(self, "model_")
        hg = self.hypergraph_ if hypergraph is None else hypergraph
        _, caches = forward(self.model_, X, hg, return_cache=True)
        return caches[layer][2]
