"""Command-line entry point.

Every subcommand runs the pipeline up to its stage and writes that stage's
artifacts into ``--workdir``. Stage outputs are also pickled under
``<workdir>/cache`` keyed by the settings they depend on, so running the
subcommands one after another does each stage once.
"""
import argparse
import hashlib
import json
import pickle
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, IoError, StageError, WhcnError
from .hypergraph import dump_hypergraph
from .network import save_model, write_loss_csv
from .pipeline import (
    STAGES,
    PipelineConfig,
    emit_report,
    execute,
    load_config,
    run_ablation,
)
from .seeds import write_seeds
from .synthdata import save_cloud


class DiskCache:
    """Dict-like stage cache backed by one pickle file per key."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key):
        digest = hashlib.sha256(repr(key).encode()).hexdigest()[:20]
        return self.root / f"{key[0]}-{digest}.pkl"

    def __contains__(self, key):
        return self._path(key).is_file()

    def __getitem__(self, key):
        try:
            with open(self._path(key), "rb") as fh:
                return pickle.load(fh)
        except (OSError, pickle.UnpicklingError, EOFError) as exc:
            raise KeyError(key) from exc

    def __setitem__(self, key, value):
        tmp = self._path(key).with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(value, fh, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(self._path(key))


def _mkdir(path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return path


def _write_json(data, path):
    try:
        path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_synth(res, workdir):
    out = _mkdir(workdir / "clouds")
    for i, cloud in enumerate(res.clouds):
        save_cloud(cloud, out / f"scene_{i:03d}.txt")


def write_features(res, workdir):
    out = _mkdir(workdir / "features")
    for i, (graph, feats) in enumerate(res.features):
        np.savez(out / f"scene_{i:03d}.npz", edges=graph.edges, k=graph.k, features=feats)


def write_partition(res, workdir):
    out = _mkdir(workdir / "partition")
    for i, s in enumerate(res.scenes):
        np.savez(
            out / f"scene_{i:03d}.npz",
            assignment=s.partition.assignment,
            region_means=s.partition.region_means,
            gt_labels=s.cloud.gt_labels,
        )


def write_seed_stage(res, workdir):
    write_seeds(res.seed_stage.seeds, workdir / "seeds.txt")
    np.save(workdir / "descriptors.npy", np.vstack(res.seed_stage.descriptors))


def write_hypergraph(res, workdir):
    dump_hypergraph(res.hypergraph, workdir / "hypergraph.txt")
    np.save(workdir / "offsets.npy", res.offsets)


def write_train(res, workdir):
    if res.train_stage is None:
        return
    est = res.train_stage.estimator
    save_model(est.model_, workdir / "model.txt")
    write_loss_csv(est.loss_trace_, workdir / "loss.csv")
    np.save(workdir / "vertex_probabilities.npy", res.train_stage.probabilities)


def write_evaluate(res, workdir):
    report_path = workdir / "report.json"
    emit_report(res.report, report_path)
    _write_json(res.report.timings, workdir / "report.timings.json")
    labels = _mkdir(workdir / "pseudo_labels")
    for i, lab in enumerate(res.point_labels):
        np.save(labels / f"scene_{i:03d}.npy", lab)


WRITERS = {
    "synth": write_synth,
    "features": write_features,
    "partition": write_partition,
    "seeds": write_seed_stage,
    "hypergraph": write_hypergraph,
    "train": write_train,
    "evaluate": write_evaluate,
}


def _config_flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="whcn_work", help="artifact directory (default: %(default)s)")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides rng_seed")
    common.add_argument("--no-cache", action="store_true", help="recompute every stage")
    group = common.add_argument_group("config overrides")
    for f in fields(PipelineConfig):
        group.add_argument(_config_flag(f.name), dest=f"cfg_{f.name}", metavar=f.type.__name__.upper())

    parser = argparse.ArgumentParser(prog="whcn", description="Weakly supervised hypergraph pseudo labeling.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the pipeline through the {stage} stage")
    sub.add_parser("run-all", parents=[common], help="run every stage and write all artifacts")
    ablate = sub.add_parser("ablate", parents=[common], help="mIoU of each ablation variant over several suites")
    ablate.add_argument("--suites", type=int, default=10, help="number of suite seeds, from --seed on")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(PipelineConfig)
        if getattr(args, f"cfg_{f.name}") is not None
    }
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    return cfg.with_overrides(**overrides)


def _run(args):
    try:
        cfg = resolve_config(args)
    except WhcnError as exc:
        raise StageError("config", exc) from exc
    workdir = Path(args.workdir)
    try:
        _mkdir(workdir)
    except IoError as exc:
        raise StageError("config", exc) from exc
    cache = None if args.no_cache else DiskCache(workdir / "cache")

    if args.command == "ablate":
        if args.suites < 1:
            raise StageError("config", InvalidConfig("--suites must be >= 1"))
        seeds = range(cfg.rng_seed, cfg.rng_seed + args.suites)
        result = run_ablation(cfg, seeds)
        try:
            _write_json(result, workdir / "ablation.json")
        except IoError as exc:
            raise StageError("evaluate", exc) from exc
        for v in result["variants"]:
            print(f"{v['name']:<16} mean mIoU {v['mean_miou']:.4f}")
        return

    until = "evaluate" if args.command == "run-all" else args.command
    (workdir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    res = execute(cfg, cache, until=until)
    stages = STAGES[: STAGES.index(until) + 1] if args.command == "run-all" else (until,)
    for stage in stages:
        try:
            WRITERS[stage](res, workdir)
        except (WhcnError, OSError) as exc:
            raise StageError(stage, exc) from exc
    for entry in res.stages:
        print(f"{entry['name']:<11} {json.dumps(entry['summary'])}")
    if res.report is not None:
        print(f"mIoU {res.report.miou:.4f} (seeds only {res.report.seed_baseline_miou:.4f})")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except StageError as exc:
        print(f"whcn: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
