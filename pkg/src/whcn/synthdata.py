"""Synthetic indoor scenes and the WHCN-CLOUD v1 text format.

Scenes are assembled from planes (floor, walls), boxes (furniture) and
Gaussian clusters (lamps). Large planar categories dominate the point count
on purpose so the class imbalance of real indoor scans is preserved.
"""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, InvalidConfig, IoError, ParseError

CATEGORY_NAMES = ("floor", "wall", "table", "chair", "cabinet", "lamp")
CATEGORY_COLORS = np.array(
    [
        [0.55, 0.45, 0.35],
        [0.85, 0.85, 0.80],
        [0.60, 0.30, 0.10],
        [0.20, 0.30, 0.70],
        [0.30, 0.60, 0.30],
        [0.90, 0.80, 0.20],
    ]
)
COLOR_NOISE = 0.04
HEADER = "WHCN-CLOUD"
VERSION = "v1"

PRIMITIVE_KINDS = ("plane", "box", "cluster")


@dataclass(frozen=True)
class Primitive:
    """One generating shape.

    ``plane`` is an axis-aligned rectangle: exactly one of the three extents
    is zero. ``box`` samples the surface of an axis-aligned box. ``cluster``
    is a Gaussian blob whose per-axis standard deviations are ``extent``.
    """

    kind: str
    category: int
    center: tuple
    extent: tuple
    noise: float = 0.01
    weight: float = None

    def area(self):
        if self.weight is not None:
            return float(self.weight)
        ex, ey, ez = self.extent
        if self.kind == "plane":
            dims = [d for d in self.extent if d > 0]
            return dims[0] * dims[1]
        if self.kind == "box":
            return 2.0 * (ex * ey + ey * ez + ex * ez)
        r = float(np.mean(self.extent))
        return 4.0 * math.pi * r * r


@dataclass(frozen=True)
class SceneConfig:
    rng_seed: int
    points_per_scene: int
    primitives: tuple
    category_names: tuple = CATEGORY_NAMES


@dataclass
class LabeledCloud:
    points: np.ndarray
    colors: np.ndarray
    gt_labels: np.ndarray
    scene_labels: frozenset
    category_names: tuple = CATEGORY_NAMES

    @property
    def n_points(self):
        return len(self.points)

    @property
    def n_categories(self):
        return len(self.category_names)


def _validate(config):
    if config.points_per_scene <= 0:
        raise InvalidConfig("points_per_scene must be positive")
    if not config.primitives:
        raise InvalidConfig("scene needs at least one primitive")
    n_cat = len(config.category_names)
    for p in config.primitives:
        if p.kind not in PRIMITIVE_KINDS:
            raise InvalidConfig(f"unknown primitive kind {p.kind!r}")
        if not 0 <= p.category < n_cat:
            raise InvalidConfig(f"category {p.category} outside [0, {n_cat})")
        if len(p.center) != 3 or len(p.extent) != 3:
            raise InvalidConfig("center and extent must be 3-vectors")
        if p.noise < 0:
            raise InvalidConfig("noise sigma must be non-negative")
        if p.kind == "plane" and sum(1 for d in p.extent if d > 0) != 2:
            raise InvalidConfig("a plane needs exactly two positive extents")
        if p.area() <= 0:
            raise InvalidConfig("primitive has zero area")


def allocate_points(weights, total):
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = np.lexsort((np.arange(len(w)), -(raw - counts)))
    counts[order[:remainder]] += 1
    return counts


def _sample_plane(rng, prim, n):
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.asarray(prim.extent)
    return np.asarray(prim.center) + u


def _sample_box(rng, prim, n):
    ex, ey, ez = prim.extent
    # faces: +-x, +-y, +-z with their areas
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(n), axis] = sign
    return np.asarray(prim.center) + u * np.asarray(prim.extent)


def _sample_cluster(rng, prim, n):
    return np.asarray(prim.center) + rng.normal(size=(n, 3)) * np.asarray(prim.extent)


_SAMPLERS = {"plane": _sample_plane, "box": _sample_box, "cluster": _sample_cluster}


def generate_scene(config):
    """Sample a labeled cloud; a pure function of ``config``."""
    _validate(config)
    rng = np.random.default_rng(config.rng_seed)
    counts = allocate_points([p.area() for p in config.primitives], config.points_per_scene)
    pts, cols, labels = [], [], []
    for prim, n in zip(config.primitives, counts):
        if n == 0:
            continue
        xyz = _SAMPLERS[prim.kind](rng, prim, n)
        xyz = xyz + rng.normal(scale=prim.noise, size=xyz.shape)
        base = CATEGORY_COLORS[prim.category % len(CATEGORY_COLORS)]
        rgb = np.clip(base + rng.normal(scale=COLOR_NOISE, size=(n, 3)), 0.0, 1.0)
        pts.append(xyz)
        cols.append(rgb)
        labels.append(np.full(n, prim.category, dtype=np.int64))
    gt = np.concatenate(labels)
    return LabeledCloud(
        points=np.concatenate(pts),
        colors=np.concatenate(cols),
        gt_labels=gt,
        scene_labels=derive_scene_labels_from(gt),
        category_names=tuple(config.category_names),
    )


def derive_scene_labels_from(labels):
    return frozenset(int(c) for c in np.unique(labels))


def derive_scene_labels(cloud):
    """The scene-level annotation: the set of categories present."""
    return derive_scene_labels_from(cloud.gt_labels)


# -- random indoor layouts -------------------------------------------------

_OBJECT_SIZES = {
    2: ((1.0, 1.4), (0.6, 0.9), (0.70, 0.80)),
    3: ((0.45, 0.55), (0.45, 0.55), (0.80, 1.00)),
    4: ((0.50, 0.80), (0.40, 0.60), (1.40, 1.90)),
}
FLOOR_PROB = 0.9
WALL_PROB = 0.75
OBJECT_PROB = 0.5


def random_scene_config(rng_seed, points_per_scene=2000, noise=0.01):
    """Draw a room layout: optional floor and walls plus a few objects."""
    rng = np.random.default_rng([rng_seed, 17])
    width, depth, height = rng.uniform(3.5, 5.0), rng.uniform(3.5, 5.0), 2.5
    prims = []
    while not prims or len({p.category for p in prims}) < 2:
        prims = []
        if rng.random() < FLOOR_PROB:
            prims.append(Primitive("plane", 0, (0.0, 0.0, 0.0), (width, depth, 0.0), noise))
        if rng.random() < WALL_PROB:
            prims.append(
                Primitive("plane", 1, (-width / 2, 0.0, height / 2), (0.0, depth, height), noise)
            )
            if rng.random() < 0.5:
                prims.append(
                    Primitive("plane", 1, (0.0, -depth / 2, height / 2), (width, 0.0, height), noise)
                )
        occupied = []
        for cat in (2, 3, 4, 5):
            if rng.random() >= OBJECT_PROB:
                continue
            for _ in range(int(rng.integers(1, 3))):
                placed = _place_object(rng, cat, width, depth, occupied, noise)
                if placed is not None:
                    prims.append(placed)
    return SceneConfig(rng_seed=int(rng_seed), points_per_scene=points_per_scene, primitives=tuple(prims))


def _place_object(rng, cat, width, depth, occupied, noise):
    if cat == 5:
        size = (0.12, 0.12, 0.12)
        foot = 0.3
        z = rng.uniform(1.4, 1.8)
    else:
        size = tuple(rng.uniform(lo, hi) for lo, hi in _OBJECT_SIZES[cat])
        foot = max(size[0], size[1])
        z = size[2] / 2
    for _ in range(50):
        x = rng.uniform(-width / 2 + foot, width / 2 - foot)
        y = rng.uniform(-depth / 2 + foot, depth / 2 - foot)
        if all(math.hypot(x - ox, y - oy) > (foot + of) / 2 + 0.1 for ox, oy, of in occupied):
            occupied.append((x, y, foot))
            kind = "cluster" if cat == 5 else "box"
            return Primitive(kind, cat, (x, y, z), size, noise)
    return None


def generate_suite(seed, n_scenes=16, points_per_scene=2000):
    """Deterministic corpus of ``n_scenes`` random rooms."""
    return [
        generate_scene(random_scene_config(seed * 1000 + i, points_per_scene))
        for i in range(n_scenes)
    ]


# -- WHCN-CLOUD v1 ---------------------------------------------------------


def save_cloud(cloud, path):
    path = Path(path)
    if not path.parent.is_dir():
        raise IoError(f"output directory does not exist: {path.parent}")
    lines = [f"{HEADER} {VERSION} {cloud.n_points} {cloud.n_categories}"]
    lines.append("# names " + " ".join(cloud.category_names))
    for (x, y, z), (r, g, b), lab in zip(
        cloud.points.tolist(), cloud.colors.tolist(), cloud.gt_labels.tolist()
    ):
        lines.append(f"{x!r} {y!r} {z!r} {r!r} {g!r} {b!r} {lab}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_cloud(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    raw_lines = text.splitlines()
    if not raw_lines:
        raise EmptyCloud(f"{path} is empty")
    head = raw_lines[0].split()
    if len(head) != 4 or head[0] != HEADER or head[1] != VERSION:
        raise ParseError(1, f"expected '{HEADER} {VERSION} <n_points> <n_categories>'")
    try:
        n_declared, n_cat = int(head[2]), int(head[3])
    except ValueError:
        raise ParseError(1, "header counts must be integers") from None
    names = tuple(f"c{i}" for i in range(n_cat))
    pts, cols, labels = [], [], []
    for lineno, line in enumerate(raw_lines[1:], start=2):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            parts = stripped[1:].split()
            if parts and parts[0] == "names":
                names = tuple(parts[1:])
                if len(names) != n_cat:
                    raise ParseError(lineno, f"{len(names)} names for {n_cat} categories")
            continue
        tokens = stripped.split()
        if len(tokens) != 7:
            raise ParseError(lineno, f"expected 7 fields, found {len(tokens)}")
        vals = []
        for tok in tokens[:6]:
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(lineno, "not a number", tok) from None
        try:
            lab = int(tokens[6])
        except ValueError:
            raise ParseError(lineno, "label is not an integer", tokens[6]) from None
        if not 0 <= lab < n_cat:
            raise ParseError(lineno, f"label outside [0, {n_cat})", tokens[6])
        pts.append(vals[:3])
        cols.append(vals[3:])
        labels.append(lab)
    if not pts:
        raise EmptyCloud(f"{path} has no point lines")
    if len(pts) != n_declared:
        raise ParseError(1, f"header declares {n_declared} points, found {len(pts)}")
    gt = np.asarray(labels, dtype=np.int64)
    return LabeledCloud(
        points=np.asarray(pts, dtype=np.float64),
        colors=np.asarray(cols, dtype=np.float64),
        gt_labels=gt,
        scene_labels=derive_scene_labels_from(gt),
        category_names=names,
    )
