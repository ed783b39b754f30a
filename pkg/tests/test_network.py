import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whcn.cutpursuit import SuperpointPartition, partition_from_assignment
from whcn.errors import DegenerateHyperedge, NoLabeledVertices, ParseError, ShapeMismatch
from whcn.hypergraph import Hypergraph, build_hypergraph, propagation_operator
from whcn.network import (
    WHCN,
    VertexLabeling,
    WhcnModel,
    expand_to_points,
    forward,
    hyperedge_attention_weights,
    init_model,
    load_model,
    loss,
    loss_and_grads,
    masked_labels,
    read_loss_csv,
    save_model,
    softmax,
    train,
    whcn_layer,
    write_loss_csv,
)
from whcn.numcore import finite_diff_grad, relative_error
from whcn.seeds import SeedSet


def _instance(seed, n=12, d=5, n_classes=3, hidden=8):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    sp = rng.choice(n, 2 * n_classes, replace=False)
    cat = np.repeat(np.arange(n_classes), 2)
    hg = build_hypergraph(SeedSet(0, sp, cat, np.ones(len(sp))), X, k_h=3)
    model = init_model(d, n_classes, hidden_dim=hidden, rng_seed=seed)
    # larger attention vectors so the attention path carries real signal
    model = model.with_parameters(model.thetas + [3.0 * a for a in model.attention])
    return X, hg, model, sp, cat


def _attention_oracle(X, theta, a, H, mu, slope):
    Z = X @ theta
    d = Z.shape[1]
    out = []
    for e in range(H.shape[1]):
        members = [v for v in range(H.shape[0]) if H[v, e]]
        total, count = 0.0, 0
        for i in members:
            for j in members:
                if i == j:
                    continue
                s = sum(a[k] * Z[i, k] for k in range(d)) + sum(a[d + k] * Z[j, k] for k in range(d))
                lr = s if s > 0 else slope * s
                total += math.exp(-lr / mu)
                count += 1
        out.append(total / count)
    return np.array(out)


def _two_clusters(seed=0, per=20):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(-2.0, 0.5, size=(per, 4)), rng.normal(2.0, 0.5, size=(per, 4))])
    y = np.repeat([0, 1], per)
    labeled = np.concatenate([rng.choice(per, 4, replace=False), per + rng.choice(per, 4, replace=False)])
    hg = build_hypergraph(SeedSet(0, labeled, y[labeled], np.ones(8)), X, k_h=5)
    return X, y, labeled, hg


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_attention_matches_pair_oracle(seed):
    rng = np.random.default_rng(seed)
    X, hg, _, _, _ = _instance(seed, n=int(rng.integers(6, 14)))
    theta = rng.normal(size=(X.shape[1], 3))
    a = rng.normal(size=6)
    mu, slope = rng.uniform(0.3, 3.0), rng.uniform(0.0, 0.3)
    got = hyperedge_attention_weights(X, theta, a, hg, mu, slope)
    want = _attention_oracle(X, theta, a, hg.incidence, mu, slope)
    # weights can reach 1e3 here, so the bound scales with magnitude above 1
    assert np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want))) <= 1e-12
    assert np.all(got > 0)


def test_attention_limits():
    X, hg, model, _, _ = _instance(1)
    theta = model.thetas[0]
    assert np.all(hyperedge_attention_weights(X, theta, np.zeros(16), hg) == 1.0)
    w = hyperedge_attention_weights(X, theta, model.attention[0], hg, mu=1e12)
    assert np.max(np.abs(w - 1.0)) <= 1e-9


def test_attention_rejects_singleton_hyperedge():
    hg = Hypergraph(np.array([[1.0], [0.0]]), np.ones(1), [("knn", 0)])
    with pytest.raises(DegenerateHyperedge):
        hyperedge_attention_weights(np.ones((2, 2)), np.eye(2), np.ones(4), hg)


def test_layer_isolated_vertex_is_zero():
    H = np.array([[1.0], [1.0], [0.0]])
    hg = Hypergraph(H, np.ones(1), [("knn", 0)])
    out = whcn_layer(np.arange(6.0).reshape(3, 2) + 1, hg, np.eye(2), "identity")
    assert np.all(out[2] == 0)


def test_layer_single_hyperedge_dense_oracle():
    rng = np.random.default_rng(2)
    n = 7
    hg = Hypergraph(np.ones((n, 1)), np.ones(1), [("class", 0)])
    x = rng.normal(size=(n, 3))
    H = np.ones((n, 1))
    Dm = np.diag(1 / np.sqrt(H.sum(axis=1)))
    want = Dm @ H @ (H.T / n) @ Dm @ x
    got = whcn_layer(x, hg, np.eye(3), "identity")
    assert np.max(np.abs(got - want)) <= 1e-12
    assert np.allclose(got, got[0])


def test_layer_relu_nonnegative_and_matches_operator():
    X, hg, model, _, _ = _instance(3)
    out = whcn_layer(X, hg, model.thetas[0], "relu")
    assert np.all(out >= 0)
    pre = whcn_layer(X, hg, model.thetas[0], "identity")
    assert np.max(np.abs(pre - propagation_operator(hg) @ X @ model.thetas[0])) <= 1e-12


def test_layer_shape_mismatch():
    X, hg, model, _, _ = _instance(4)
    with pytest.raises(ShapeMismatch):
        whcn_layer(X[:5], hg, model.thetas[0])


def test_forward_deterministic_and_stochastic_rows():
    X, hg, model, _, _ = _instance(5)
    p1 = forward(model, X, hg).probabilities
    p2 = forward(model, X, hg).probabilities
    assert np.array_equal(p1, p2)
    assert np.max(np.abs(p1.sum(axis=1) - 1)) <= 1e-9
    assert np.all(p1 >= 0)


def test_forward_one_layer_closed_form():
    # 2 vertices, one hyperedge, identity theta: the operator averages the rows
    hg = Hypergraph(np.ones((2, 1)), np.ones(1), [("class", 0)])
    x = np.array([[1.0, 0.0], [0.0, 3.0]])
    model = WhcnModel([np.eye(2)], [np.zeros(4)])
    p = forward(model, x, hg).probabilities
    logits = np.array([0.5, 1.5])
    want = np.exp(logits) / np.exp(logits).sum()
    assert np.max(np.abs(p - want)) <= 1e-9


def test_attention_off_matches_all_ones():
    X, hg, model, _, _ = _instance(6)
    zero_attn = model.with_parameters(model.thetas + [np.zeros_like(a) for a in model.attention])
    off = replace(zero_attn, use_attention=False)
    assert np.max(np.abs(forward(zero_attn, X, hg).probabilities - forward(off, X, hg).probabilities)) <= 1e-12


def test_loss_examples():
    P = np.eye(3)[[0, 1, 2, 0]]
    assert loss(P, [0, 1, 2], [0, 1, 2]) <= 3e-9
    U = np.full((4, 5), 0.2)
    assert abs(loss(U, [0, 2], [1, 4]) - 2 * math.log(5)) <= 1e-9
    with pytest.raises(NoLabeledVertices):
        loss(U, [], [])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    P = softmax(rng.normal(size=(10, 4)))
    v = rng.choice(10, 5, replace=False)
    c = rng.integers(0, 4, 5)
    want = 0.0
    for i, j in zip(v, c):
        want -= math.log(max(P[i, j], 1e-12))
    assert abs(loss(VertexLabeling(P), v, c) - want) <= 1e-12


def _grad_check(model, X, hg, sp, cat):
    _, grads = loss_and_grads(model, X, hg, sp, cat)
    worst = 0.0
    params = model.parameters()
    for i, p in enumerate(params):
        def f(z, i=i):
            ps = [q.copy() for q in params]
            ps[i] = z
            return loss(forward(model.with_parameters(ps), X, hg), sp, cat)

        worst = max(worst, relative_error(grads[i], finite_diff_grad(f, p)))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    X, hg, model, sp, cat = _instance(seed)
    assert _grad_check(model, X, hg, sp, cat) <= 1e-4


def test_gradients_without_attention():
    X, hg, model, sp, cat = _instance(11)
    off = replace(model, use_attention=False)
    assert _grad_check(off, X, hg, sp, cat) <= 1e-4


def test_gradients_shared_attention():
    X, hg, model, sp, cat = _instance(12)
    shared = replace(model, attention_mode="shared")
    assert _grad_check(shared, X, hg, sp, cat) <= 1e-4


def test_two_cluster_toy():
    X, y, labeled, hg = _two_clusters()
    # separability oracle: nearest labeled centroid
    cents = np.stack([X[labeled[y[labeled] == c]].mean(axis=0) for c in (0, 1)])
    nc = np.argmin(((X[:, None, :] - cents[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(nc == y) >= 0.95
    model = init_model(4, 2, hidden_dim=16, rng_seed=0)
    trained, trace = train(model, X, hg, labeled, y[labeled], epochs=200)
    pred = forward(trained, X, hg).labels
    assert np.all(pred[labeled] == y[labeled])
    assert np.mean(pred == y) >= 0.95
    assert trace[-1] < 0.5 * trace[0]
    assert abs(trace[0] - len(labeled) * math.log(2)) < 0.5 * len(labeled) * math.log(2)


def test_training_reproducible():
    X, y, labeled, hg = _two_clusters(1)
    m = init_model(4, 2, hidden_dim=8, rng_seed=3)
    a = train(m, X, hg, labeled, y[labeled], epochs=20)
    b = train(m, X, hg, labeled, y[labeled], epochs=20)
    assert a[1] == b[1]
    assert all(np.array_equal(p, q) for p, q in zip(a[0].parameters(), b[0].parameters()))


def test_estimator_api():
    X, y, labeled, hg = _two_clusters(2)
    target = np.full(len(y), -1)
    target[labeled] = y[labeled]
    clf = WHCN(hidden_dim=16, epochs=200).fit(X, target, hypergraph=hg)
    assert clf.get_params()["hidden_dim"] == 16
    assert np.mean(clf.transduction_ == y) >= 0.95
    assert np.array_equal(clf.predict(X), clf.transduction_)
    w = clf.hyperedge_weights(X, layer=1)
    assert w.shape == (hg.n_edges,) and np.all(w > 0)
    with pytest.raises(NoLabeledVertices):
        WHCN(epochs=1).fit(X, np.full(len(y), -1), hypergraph=hg)


def test_expand_to_points():
    f = np.zeros((10, 1))
    part = partition_from_assignment(f, [0, 0, 1, 1, 1, 2, 2, 2, 2, 0])
    labels = np.array([4, 1, 4])
    pts = expand_to_points(labels, part)
    sizes = part.sizes()
    for c in (1, 4):
        assert np.sum(pts == c) == sizes[labels == c].sum()
    perm = np.array([2, 0, 1])
    permuted = SuperpointPartition(perm[part.assignment], 3, part.region_means[np.argsort(perm)])
    assert np.array_equal(expand_to_points(labels[np.argsort(perm)], permuted), pts)
    single = partition_from_assignment(f, np.zeros(10, dtype=int))
    assert set(expand_to_points(np.array([3]), single)) == {3}
    with pytest.raises(ShapeMismatch):
        expand_to_points(np.array([1, 2]), part)


def test_masked_labels():
    P = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])
    assert masked_labels(P, {1, 2}).tolist() == [1, 2]


def test_checkpoint_and_loss_roundtrip(tmp_path):
    X, hg, model, _, _ = _instance(7)
    save_model(model, tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text().startswith("WHCN-MODEL v1\n")
    back = load_model(tmp_path / "m.txt")
    assert all(np.array_equal(p, q) for p, q in zip(model.parameters(), back.parameters()))
    assert np.array_equal(forward(model, X, hg).probabilities, forward(back, X, hg).probabilities)
    trace = [3.25, 1.0 / 3.0, 0.1]
    write_loss_csv(trace, tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,loss"
    assert read_loss_csv(tmp_path / "loss.csv") == trace
    (tmp_path / "bad.txt").write_text("WHCN-MODEL v2\n")
    with pytest.raises(ParseError):
        load_model(tmp_path / "bad.txt")
