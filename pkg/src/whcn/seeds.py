"""Superpoint descriptors, scene-level classifier, class activation maps, seeds."""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import EmptyCorpus, EmptySceneLabels, IoError, ParseError, ShapeMismatch
from .numcore import AdamState, adam_step

DESCRIPTOR_DIM = 16
DESCRIPTOR_NAMES = (
    "mean_linearity", "mean_planarity", "mean_scattering", "mean_verticality",
    "std_linearity", "std_planarity", "std_scattering", "std_verticality",
    "mean_r", "mean_g", "mean_b",
    "extent_x", "extent_y", "extent_z",
    "mean_height",
    "log_size",
)


def _segment_mean(values, seg, n):
    counts = np.bincount(seg, minlength=n).astype(np.float64)
    return np.stack(
        [np.bincount(seg, weights=values[:, j], minlength=n) for j in range(values.shape[1])],
        axis=1,
    ) / counts[:, None]


def superpoint_descriptor(cloud, features, partition):
    """Fixed 16-dim summary of every superpoint.

    Columns: mean and std of the four geometric features, mean color,
    bounding-box extents, mean height above the cloud's lowest point, and
    log(size) / log(n_points). All columns are translation invariant.
    """
    feats = np.asarray(features, dtype=np.float64)
    a = np.asarray(partition.assignment)
    n = len(a)
    if len(cloud.points) != n or len(feats) != n:
        raise ShapeMismatch("cloud, features and partition disagree on point count")
    k = partition.n_superpoints
    mean_f = _segment_mean(feats, a, k)
    var_f = _segment_mean((feats - mean_f[a]) ** 2, a, k)
    mean_c = _segment_mean(cloud.colors, a, k)
    lo = np.full((k, 3), np.inf)
    hi = np.full((k, 3), -np.inf)
    np.minimum.at(lo, a, cloud.points)
    np.maximum.at(hi, a, cloud.points)
    z = cloud.points[:, 2] - cloud.points[:, 2].min()
    height = _segment_mean(z[:, None], a, k)
    sizes = np.bincount(a, minlength=k).astype(np.float64)
    log_size = np.log(sizes) / math.log(n) if n > 1 else np.zeros(k)
    return np.column_stack([mean_f, np.sqrt(var_f), mean_c, hi - lo, height, log_size])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce(p, y):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _pool(X):
    if len(X) == 0:
        raise EmptyCorpus("no scenes to train on")
    return np.stack([check_array(x, dtype=np.float64).mean(axis=0) for x in X])


def labels_to_indicator(label_sets, n_categories):
    y = np.zeros((len(label_sets), n_categories))
    for s, labels in enumerate(label_sets):
        y[s, sorted(labels)] = 1.0
    return y


class SceneClassifier(ClassifierMixin, BaseEstimator):
    """Linear multi-label scene classifier over globally pooled superpoints.

    ``X`` is a sequence of per-scene descriptor matrices (one row per
    superpoint) and ``Y`` the (n_scenes, C) label indicator matrix. Scene
    logits are ``coef_ @ mean(rows) + intercept_``; training minimizes the
    summed sigmoid cross-entropy per scene, averaged over scenes, with
    full-batch Adam from zero weights.
    """

    def __init__(self, epochs=500, learning_rate=0.003):
        self.epochs = epochs
        self.learning_rate = learning_rate

    def fit(self, X, Y):
        pooled = _pool(X)
        Y = check_array(Y, dtype=np.float64)
        if len(Y) != len(pooled):
            raise ShapeMismatch(f"{len(pooled)} scenes but {len(Y)} label rows")
        n_scenes, d = pooled.shape
        n_cat = Y.shape[1]
        W = np.zeros((n_cat, d))
        b = np.zeros(n_cat)
        sw = AdamState(W.shape, learning_rate=self.learning_rate)
        sb = AdamState(b.shape, learning_rate=self.learning_rate)
        log = []
        for _ in range(self.epochs):
            p = _sigmoid(pooled @ W.T + b)
            log.append(float(_bce(p, Y).sum(axis=1).mean()))
            dz = (p - Y) / n_scenes
            W, sw = adam_step(W, dz.T @ pooled, sw)
            b, sb = adam_step(b, dz.sum(axis=0), sb)
        self.coef_ = W
        self.intercept_ = b
        self.training_log_ = log
        self.classes_ = np.arange(n_cat)
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return _pool(X) @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return _sigmoid(self.decision_function(X))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(int)

    def score(self, X, Y):
        """Mean per-category accuracy of the thresholded predictions."""
        return float(np.mean(self.predict(X) == np.asarray(Y)))

    def loss(self, X, Y):
        return float(_bce(self.predict_proba(X), np.asarray(Y, dtype=float)).sum(axis=1).mean())

    def activation_map(self, descriptors):
        check_is_fitted(self, "coef_")
        return class_activation_map(self.coef_, descriptors)


def class_activation_map(weights, descriptors):
    """Per-superpoint, per-category activation ``w_c . f(s_k)`` (no bias)."""
    W = np.asarray(getattr(weights, "coef_", weights), dtype=np.float64)
    F = np.asarray(descriptors, dtype=np.float64)
    if F.ndim != 2 or W.ndim != 2 or F.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"descriptors {F.shape} vs weights {W.shape}")
    return F @ W.T


@dataclass
class SeedSet:
    """High-confidence (superpoint, category, score) triples for one scene."""

    scene_id: int
    superpoints: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    categories: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.superpoints)

    @property
    def entries(self):
        return list(zip(self.superpoints.tolist(), self.categories.tolist(), self.scores.tolist()))


def n_seeds(fraction, n):
    # guard against 0.1 * 30 = 3.0000000000000004 style rounding
    return min(n, math.ceil(round(fraction * n, 9)))


def select_seeds(cam, scene_labels, fraction=0.4, scene_id=0):
    """Keep the top ``ceil(fraction * N)`` superpoints by masked-argmax activation.

    The argmax runs only over categories in ``scene_labels``; ranking ties
    go to the lower superpoint index.
    """
    cam = np.asarray(cam, dtype=np.float64)
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    allowed = sorted(int(c) for c in scene_labels)
    if not allowed:
        raise EmptySceneLabels("scene has no category labels")
    if cam.ndim != 2 or max(allowed) >= cam.shape[1] or min(allowed) < 0:
        raise ShapeMismatch(f"CAM {cam.shape} cannot host labels {allowed}")
    sub = cam[:, allowed]
    best = np.argmax(sub, axis=1)
    score = sub[np.arange(len(sub)), best]
    cats = np.asarray(allowed)[best]
    order = np.lexsort((np.arange(len(score)), -score))
    keep = order[: n_seeds(fraction, len(score))]
    return SeedSet(scene_id, keep.astype(np.int64), cats[keep].astype(np.int64), score[keep])


def write_seeds(seed_sets, path):
    path = Path(path)
    lines = ["# scene_id superpoint_id category score"]
    for ss in seed_sets:
        for sp, cat, sc in ss.entries:
            lines.append(f"{ss.scene_id} {sp} {cat} {sc!r}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_seeds(path):
    """Parse a seed file into ``{scene_id: SeedSet}``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 4:
            raise ParseError(lineno, f"expected 4 fields, found {len(tok)}")
        try:
            scene, sp, cat = int(tok[0]), int(tok[1]), int(tok[2])
            score = float(tok[3])
        except ValueError:
            raise ParseError(lineno, "malformed seed entry", line) from None
        rows.setdefault(scene, []).append((sp, cat, score))
    return {
        scene: SeedSet(
            scene,
            np.array([r[0] for r in entries], dtype=np.int64),
            np.array([r[1] for r in entries], dtype=np.int64),
            np.array([r[2] for r in entries]),
        )
        for scene, entries in rows.items()
    }
