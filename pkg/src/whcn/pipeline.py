"""End-to-end orchestration: synth -> features -> partition -> seeds -> hypergraph -> train -> expand.

Scores the expanded point pseudo labels against the held-out ground truth
with mIoU. Ablation flags switch off superpoints (every subsampled point is
a vertex), the network (seed labels only) or the attention weights.
"""
import json
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from sklearn.preprocessing import StandardScaler

from .cutpursuit import default_superpoint_target, l0_cut_pursuit, partition_from_assignment
from .errors import InvalidConfig, IoError, LengthMismatch, ParseError, StageError, WhcnError
from .geomfeat import geometric_features, knn_graph
from .hypergraph import HypergraphWarning, build_hypergraph, disjoint_union, superpoint_adjacency
from .network import ATTENTION_MODES, WHCN, expand_to_points, masked_labels
from .seeds import SceneClassifier, labels_to_indicator, select_seeds, superpoint_descriptor
from .synthdata import LabeledCloud, generate_suite

REPORT_FORMAT = "WHCN-REPORT v1"
UNLABELED = -1
STAGES = ("synth", "features", "partition", "seeds", "hypergraph", "train", "evaluate")


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    rng_seed: int = 0
    n_scenes: int = 16
    points_per_scene: int = 2000
    k_point: int = 10
    rho: float = 0.03
    superpoint_target: int = 0  # 0 picks min(64, n // 16)
    seed_fraction: float = 0.4
    k_h: int = 5
    adjacency_hyperedges: bool = True
    classifier_epochs: int = 500
    classifier_lr: float = 0.003
    hidden_dim: int = 32
    epochs: int = 500
    lr: float = 0.003
    dropout: float = 0.5
    mu: float = 1.0
    leaky_slope: float = 0.01
    subsample_points: int = 256
    use_superpoints: bool = True
    use_whcn: bool = True
    use_attention: bool = True
    attention_mode: str = "per_layer"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            kind = _KIND[f.name]
            if kind is bool and not isinstance(value, (bool, np.bool_)):
                raise InvalidConfig(f"{f.name} must be true or false, got {value!r}")
            if kind is int and (isinstance(value, bool) or not isinstance(value, (int, np.integer))):
                raise InvalidConfig(f"{f.name} must be an integer, got {value!r}")
            if kind is float and (isinstance(value, bool) or not np.isfinite(value)):
                raise InvalidConfig(f"{f.name} must be a finite number, got {value!r}")
            if kind is str and not isinstance(value, str):
                raise InvalidConfig(f"{f.name} must be text, got {value!r}")
            check, rule = _RULES.get(f.name, (None, None))
            if check is not None and not check(value):
                raise InvalidConfig(f"{f.name}={value!r} violates {rule}")

    def with_overrides(self, **overrides):
        unknown = sorted(set(overrides) - set(_KIND))
        if unknown:
            raise InvalidConfig(f"unknown config key(s): {', '.join(unknown)}")
        coerced = {k: _coerce(k, v) for k, v in overrides.items()}
        return replace(self, **coerced)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self):
        lines = ["# pipeline configuration"]
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


_KIND = {f.name: f.type for f in fields(PipelineConfig)}
_RULES = {
    "n_scenes": (lambda v: v >= 1, ">= 1"),
    "points_per_scene": (lambda v: v >= 16, ">= 16"),
    "k_point": (lambda v: v >= 1, ">= 1"),
    "rho": (lambda v: v >= 0, ">= 0"),
    "superpoint_target": (lambda v: v >= 0, ">= 0 (0 = automatic)"),
    "seed_fraction": (lambda v: 0 < v <= 1, "0 < fraction <= 1"),
    "k_h": (lambda v: v >= 1, ">= 1"),
    "classifier_epochs": (lambda v: v >= 1, ">= 1"),
    "classifier_lr": (lambda v: v > 0, "> 0"),
    "hidden_dim": (lambda v: v >= 1, ">= 1"),
    "epochs": (lambda v: v >= 1, ">= 1"),
    "lr": (lambda v: v > 0, "> 0"),
    "dropout": (lambda v: 0 <= v < 1, "0 <= dropout < 1"),
    "mu": (lambda v: v > 0, "> 0"),
    "leaky_slope": (lambda v: 0 <= v < 1, "0 <= slope < 1"),
    "subsample_points": (lambda v: v >= 8, ">= 8"),
    "attention_mode": (lambda v: v in ATTENTION_MODES, "one of " + ", ".join(ATTENTION_MODES)),
}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    return repr(value)


def _coerce(key, value):
    kind = _KIND[key]
    if not isinstance(value, str):
        if kind is float and isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return float(value)
        return value
    text = value.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        return kind(text)
    except ValueError:
        raise InvalidConfig(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def parse_config(text, base=None):
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(lineno, "expected 'key = value'", line)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KIND:
            raise InvalidConfig(f"line {lineno}: unknown config key {key!r}")
        values[key] = value
    return (base or PipelineConfig()).with_overrides(**values)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse_config(text)


# -- evaluation -------------------------------------------------------------------


def confusion(pred, gt, n_categories):
    """(C, C + 1) counts; the last column collects unlabeled predictions."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predictions for {len(gt)} ground-truth labels")
    if len(gt) and (gt.min() < 0 or gt.max() >= n_categories):
        raise ValueError("ground-truth labels must lie in [0, C)")
    if len(pred) and (pred.min() < UNLABELED or pred.max() >= n_categories):
        raise ValueError("predictions must lie in [0, C) or be unlabeled (-1)")
    col = np.where(pred == UNLABELED, n_categories, pred)
    return np.bincount(gt * (n_categories + 1) + col, minlength=n_categories * (n_categories + 1)).reshape(
        n_categories, n_categories + 1
    )


def evaluate_miou(pred, gt, n_categories):
    """Per-category IoU (None where the category is absent from both) and mIoU.

    The mean runs over categories present in the ground truth; a category
    predicted but absent from the ground truth reports IoU 0 outside the mean.
    Unlabeled predictions (-1) count as wrong for their true category.
    """
    cm = confusion(pred, gt, n_categories)
    inter = np.diag(cm[:, :n_categories]).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm[:, :n_categories].sum(axis=0)
    union = gt_count + pred_count - inter
    ious = [float(inter[c] / union[c]) if union[c] > 0 else None for c in range(n_categories)]
    present = [ious[c] for c in range(n_categories) if gt_count[c] > 0]
    miou = float(np.mean(present)) if present else 0.0
    return ious, miou


# -- report ---------------------------------------------------------------------


@dataclass
class EvalReport:
    config: dict
    category_names: list
    per_category_iou: dict
    miou: float
    seed_baseline_miou: float
    seed_coverage: float
    scene_seed_coverage: list
    stages: list
    timings: dict = field(default_factory=dict, compare=False)
    format: str = REPORT_FORMAT

    def to_dict(self, include_timings=False):
        out = {"format": self.format}
        out.update((k, v) for k, v in asdict(self).items() if k not in ("format", "timings"))
        if include_timings:
            out["timings"] = self.timings
        return out


def report_text(report, include_timings=False):
    return json.dumps(report.to_dict(include_timings), indent=2) + "\n"


def emit_report(report, path, include_timings=False):
    """Write the report as JSON with a fixed key order.

    Wall-clock timings vary between runs, so they are left out unless asked
    for; the CLI writes them to a ``.timings.json`` sidecar instead.
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise IoError(f"output directory does not exist: {path.parent}")
    try:
        path.write_text(report_text(report, include_timings), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_report(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    if data.get("format") != REPORT_FORMAT:
        raise ParseError(1, f"expected format {REPORT_FORMAT!r}")
    timings = data.pop("timings", {})
    return EvalReport(timings=timings, **data)


# -- stages ---------------------------------------------------------------------


@dataclass
class Scene:
    """One scene after partitioning: the evaluated cloud and its vertices."""

    cloud: LabeledCloud
    graph: object
    features: np.ndarray
    partition: object


@dataclass
class SeedStage:
    descriptors: list
    classifier: SceneClassifier
    seeds: list


@dataclass
class TrainStage:
    estimator: WHCN
    probabilities: np.ndarray


class _Run:
    def __init__(self, cache):
        self.cache = {} if cache is None else cache
        self.stages = []
        self.timings = {}

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (WhcnError, ValueError, ArithmeticError, OSError) as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)

    def cached(self, name, key, compute):
        """Run ``compute`` once per key; returns ``(value, summary)``."""
        with self.stage(name):
            full_key = (name,) + key
            if full_key not in self.cache:
                self.cache[full_key] = compute()
            value, summary = self.cache[full_key]
        self.stages.append({"name": name, "summary": summary})
        return value


def _key(cfg, names):
    return tuple(getattr(cfg, n) for n in names)


_SYNTH_KEYS = ("rng_seed", "n_scenes", "points_per_scene")
_FEATURE_KEYS = _SYNTH_KEYS + ("k_point",)
_SCENE_KEYS = _FEATURE_KEYS + ("rho", "superpoint_target", "use_superpoints", "subsample_points")
_SEED_KEYS = _SCENE_KEYS + ("classifier_epochs", "classifier_lr", "seed_fraction")
_HG_KEYS = _SEED_KEYS + ("k_h", "adjacency_hyperedges")
_TRAIN_KEYS = _HG_KEYS + ("hidden_dim", "epochs", "lr", "dropout", "mu", "leaky_slope", "use_attention", "attention_mode")


def synthesize(cfg):
    clouds = generate_suite(cfg.rng_seed, cfg.n_scenes, cfg.points_per_scene)
    return clouds, {"n_scenes": len(clouds), "n_points": int(sum(c.n_points for c in clouds))}


def subsample_cloud(cloud, m, rng):
    """Uniform subset of ``m`` points (all of them when the cloud is smaller)."""
    if cloud.n_points <= m:
        idx = np.arange(cloud.n_points)
    else:
        idx = np.sort(rng.choice(cloud.n_points, m, replace=False))
    sub = LabeledCloud(
        cloud.points[idx], cloud.colors[idx], cloud.gt_labels[idx],
        frozenset(np.unique(cloud.gt_labels[idx]).tolist()), cloud.category_names,
    )
    return sub, idx


def compute_features(cfg, clouds):
    out = []
    for c in clouds:
        g = knn_graph(c.points, cfg.k_point)
        out.append((g, geometric_features(c.points, g)))
    summary = {"n_edges": int(sum(g.n_edges for g, _ in out))}
    return out, summary


def partition_scenes(cfg, clouds, feats):
    scenes = []
    for i, (cloud, (graph, f)) in enumerate(zip(clouds, feats)):
        if cfg.use_superpoints:
            target = cfg.superpoint_target or default_superpoint_target(cloud.n_points)
            result = l0_cut_pursuit(f, graph, cfg.rho, max_superpoints=target)
            scenes.append(Scene(cloud, graph, f, result.partition))
        else:
            rng = np.random.default_rng([cfg.rng_seed, i, 3])
            sub, idx = subsample_cloud(cloud, cfg.subsample_points, rng)
            sub_graph = knn_graph(sub.points, min(cfg.k_point, sub.n_points - 1))
            part = partition_from_assignment(f[idx], np.arange(sub.n_points))
            scenes.append(Scene(sub, sub_graph, f[idx], part))
    sizes = [s.partition.n_superpoints for s in scenes]
    summary = {
        "n_vertices": int(sum(sizes)),
        "min_vertices": int(min(sizes)),
        "max_vertices": int(max(sizes)),
        "evaluated_points": int(sum(s.cloud.n_points for s in scenes)),
    }
    return scenes, summary


def make_seeds(cfg, scenes):
    raw = [superpoint_descriptor(s.cloud, s.features, s.partition) for s in scenes]
    scaler = StandardScaler().fit(np.vstack(raw))
    desc = [scaler.transform(d) for d in raw]
    n_cat = scenes[0].cloud.n_categories
    Y = labels_to_indicator([s.cloud.scene_labels for s in scenes], n_cat)
    clf = SceneClassifier(cfg.classifier_epochs, cfg.classifier_lr).fit(desc, Y)
    seeds = [
        select_seeds(clf.activation_map(d), s.cloud.scene_labels, cfg.seed_fraction, i)
        for i, (d, s) in enumerate(zip(desc, scenes))
    ]
    summary = {
        "n_seeds": int(sum(len(s) for s in seeds)),
        "classifier_final_loss": clf.training_log_[-1],
        "classifier_accuracy": clf.score(desc, Y),
    }
    return SeedStage(desc, clf, seeds), summary


def make_hypergraphs(cfg, scenes, seed_stage):
    hgs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", HypergraphWarning)
        for s, d, ss in zip(scenes, seed_stage.descriptors, seed_stage.seeds):
            adj = superpoint_adjacency(s.partition.assignment, s.graph.edges) if cfg.adjacency_hyperedges else None
            hgs.append(build_hypergraph(ss, d, cfg.k_h, adjacency=adj))
    union, offsets = disjoint_union(hgs)
    kinds = [k for k, _ in union.edge_kind]
    summary = {
        "n_vertices": union.n_vertices,
        "n_hyperedges": union.n_edges,
        "class_hyperedges": kinds.count("class"),
        "knn_hyperedges": kinds.count("knn"),
        "adjacency_hyperedges": kinds.count("adj"),
        "dropped_class_hyperedges": len(union.notes),
    }
    return (union, offsets), summary


def train_network(cfg, X, union, n_categories):
    est = WHCN(
        n_classes=n_categories, hidden_dim=cfg.hidden_dim, epochs=cfg.epochs,
        learning_rate=cfg.lr, dropout=cfg.dropout, mu=cfg.mu, leaky_slope=cfg.leaky_slope,
        use_attention=cfg.use_attention, attention_mode=cfg.attention_mode,
        random_state=cfg.rng_seed,
    ).fit(X, hypergraph=union)
    summary = {
        "epochs": cfg.epochs,
        "initial_loss": est.loss_trace_[0],
        "final_loss": est.loss_trace_[-1],
    }
    return TrainStage(est, est.label_distributions_), summary


def seed_point_labels(scene, seed_set):
    labels = np.full(scene.partition.n_superpoints, UNLABELED, dtype=np.int64)
    labels[seed_set.superpoints] = seed_set.categories
    return expand_to_points(labels, scene.partition)


@dataclass
class PipelineResult:
    """Every intermediate of a run; fields past the ``until`` stage stay None."""

    config: PipelineConfig
    clouds: list = None
    features: list = None
    scenes: list = None
    seed_stage: SeedStage = None
    hypergraph: object = None
    offsets: np.ndarray = None
    train_stage: TrainStage = None
    point_labels: list = None
    report: EvalReport = None
    stages: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def execute(cfg, cache=None, until="evaluate"):
    """Run the stages in order up to and including ``until``.

    ``cache`` maps stage keys to earlier outputs, so runs that share a
    prefix of settings (ablation variants, CLI steps) skip repeated work.
    """
    if until not in STAGES:
        raise InvalidConfig(f"unknown stage {until!r}; expected one of {', '.join(STAGES)}")
    last = STAGES.index(until)
    run = _Run(cache)
    res = PipelineResult(cfg, stages=run.stages, timings=run.timings)
    res.clouds = run.cached("synth", _key(cfg, _SYNTH_KEYS), lambda: synthesize(cfg))
    if last < 1:
        return res
    res.features = run.cached("features", _key(cfg, _FEATURE_KEYS), lambda: compute_features(cfg, res.clouds))
    if last < 2:
        return res
    res.scenes = run.cached(
        "partition", _key(cfg, _SCENE_KEYS), lambda: partition_scenes(cfg, res.clouds, res.features)
    )
    if last < 3:
        return res
    res.seed_stage = run.cached("seeds", _key(cfg, _SEED_KEYS), lambda: make_seeds(cfg, res.scenes))
    if last < 4:
        return res
    res.hypergraph, res.offsets = run.cached(
        "hypergraph", _key(cfg, _HG_KEYS), lambda: make_hypergraphs(cfg, res.scenes, res.seed_stage)
    )
    if last < 5:
        return res
    scenes, seed_stage = res.scenes, res.seed_stage
    n_cat = scenes[0].cloud.n_categories
    seed_pts = [seed_point_labels(s, ss) for s, ss in zip(scenes, seed_stage.seeds)]
    if cfg.use_whcn:
        X = np.vstack(seed_stage.descriptors)
        res.train_stage = run.cached(
            "train", _key(cfg, _TRAIN_KEYS), lambda: train_network(cfg, X, res.hypergraph, n_cat)
        )
        res.point_labels = []
        for i, s in enumerate(scenes):
            probs = res.train_stage.probabilities[res.offsets[i]:res.offsets[i + 1]]
            vertex = masked_labels(probs, s.cloud.scene_labels)
            res.point_labels.append(expand_to_points(vertex, s.partition))
    else:
        res.point_labels = seed_pts
    if last < 6:
        return res
    with run.stage("evaluate"):
        gt = np.concatenate([s.cloud.gt_labels for s in scenes])
        ious, miou = evaluate_miou(np.concatenate(res.point_labels), gt, n_cat)
        _, seed_miou = evaluate_miou(np.concatenate(seed_pts), gt, n_cat)
        coverage = [len(ss) / s.partition.n_superpoints for s, ss in zip(scenes, seed_stage.seeds)]
        total_seeds = sum(len(ss) for ss in seed_stage.seeds)
        total_vertices = sum(s.partition.n_superpoints for s in scenes)
    run.stages.append({"name": "evaluate", "summary": {"miou": miou, "seed_baseline_miou": seed_miou}})
    names = list(scenes[0].cloud.category_names)
    res.report = EvalReport(
        config=cfg.to_dict(),
        category_names=names,
        per_category_iou=dict(zip(names, ious)),
        miou=miou,
        seed_baseline_miou=seed_miou,
        seed_coverage=total_seeds / total_vertices,
        scene_seed_coverage=coverage,
        stages=run.stages,
        timings=run.timings,
    )
    return res


def run_pipeline(cfg, cache=None):
    return execute(cfg, cache).report


# -- ablation -------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("seeds_only", {"use_whcn": False}),
    ("no_superpoints", {"use_superpoints": False}),
    ("no_attention", {"use_attention": False}),
    ("full", {}),
)


def run_ablation(cfg, suite_seeds, variants=ABLATION_VARIANTS):
    """mIoU of each variant on each suite seed, plus per-variant means.

    Variants of one suite seed share every stage their settings agree on.
    """
    per_variant = {name: [] for name, _ in variants}
    for seed in suite_seeds:
        cache = {}
        for name, flags in variants:
            vcfg = cfg.with_overrides(rng_seed=int(seed), **flags)
            per_variant[name].append(run_pipeline(vcfg, cache).miou)
    return {
        "format": "WHCN-ABLATION v1",
        "config": cfg.to_dict(),
        "suite_seeds": [int(s) for s in suite_seeds],
        "variants": [
            {"name": name, "flags": flags, "miou": per_variant[name], "mean_miou": float(np.mean(per_variant[name]))}
            for name, flags in variants
        ],
    }
