"""Command line driver.

Subcommands ``synth``, ``superpoints``, ``train``, ``segment`` and
``eval`` each read and write files; ``pipeline`` chains them through the
same files, so a pipeline run equals running the stages by hand.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric failure, 4 validation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .errors import SupersegError, ValidationError
from .evaluation import confusion, metrics_report
from .featurefield import FeatureField, Supervision, train
from .geometry import IGNORE, PointCloud
from .io_formats import (
    class_colors,
    label_colors,
    read_embeddings,
    read_field,
    read_labelbank,
    read_partition,
    read_ply,
    write_embeddings,
    write_field,
    write_json,
    write_labelbank,
    write_loss_csv,
    write_partition,
    write_ply,
    write_scores_csv,
)
from .merging import assign_classes
from .superpoints import build_superpoints
from .synth import (
    EmbeddingModel,
    SceneSpec,
    default_scene,
    generate_scene,
    grid_for_cloud,
    make_label_bank,
    make_prototypes,
    target_embeddings,
)

log = logging.getLogger("superseg")

ABLATIONS = {
    "none": (True, True),  # (consistency loss, affinity refinement)
    "affinity": (True, False),
    "consistency": (False, True),
    "both": (False, False),
}


class UsageError(Exception):
    pass


class StageError(Exception):
    """Wraps a library error with the name of the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"time": round(record.created, 3), "level": record.levelname.lower(),
                 "msg": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def _setup_logging(as_json: bool, verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if as_json else logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _info(msg, **fields):
    log.info(msg, extra={"fields": fields})


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: PipelineConfig, inputs: Dict[str, Path],
                    outputs: Dict[str, Path], extra: Optional[dict] = None, started=None):
    manifest = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config": cfg.model_dump(),
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in outputs.items()},
    }
    if extra:
        manifest.update(extra)
    if started is not None:
        manifest["seconds"] = round(time.time() - started, 3)
    write_json(out_dir / f"manifest.{command}.json", manifest)
    return manifest


def _stage(name):
    """Decorator tagging library errors with the stage name."""

    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (SupersegError, OSError) as err:
                raise StageError(name, err) from err

        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner

    return wrap


# -- stage commands ---------------------------------------------------------


@_stage("synth")
def cmd_synth(out_dir, cfg: PipelineConfig, scene_path=None) -> Dict[str, Path]:
    """Generate a labelled scene, per-point target embeddings and a label bank."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scene_path is not None:
        with open(scene_path) as fh:
            data = json.load(fh)
        data.setdefault("seed", cfg.seed)
        spec = SceneSpec.from_dict(data)
    else:
        spec = default_scene(cfg.seed, cfg.synth.points_per_m2, cfg.synth.sigma_geom)
    cloud = generate_scene(spec)
    protos = make_prototypes(spec.class_count, cfg.synth.dim, spec.seed)
    model = EmbeddingModel(protos, cfg.synth.sigma_emb, spec.seed, cfg.synth.context_radius)
    paths = {"scene": out / "scene.ply", "targets": out / "targets.emb",
             "labelbank": out / "labelbank.json", "scene_spec": out / "scene.json"}
    write_ply(paths["scene"], cloud, colors=label_colors(cloud.gt_labels, spec.class_count))
    write_embeddings(paths["targets"], target_embeddings(cloud, model))
    write_labelbank(paths["labelbank"], make_label_bank(model, spec.class_names))
    write_json(paths["scene_spec"], spec.to_dict())
    _info("synth: scene generated", stage="synth", points=len(cloud),
          classes=spec.class_count, seed=spec.seed)
    inputs = {"scene_spec_in": Path(scene_path)} if scene_path else {}
    _write_manifest(out, "synth", cfg, inputs, paths, started=t0)
    return paths


@_stage("superpoints")
def cmd_superpoints(cloud_path, out_dir, cfg: PipelineConfig,
                    estimate_normals: bool = False) -> Dict[str, Path]:
    """Partition a cloud into superpoints; writes the partition and a coloured PLY."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cloud = read_ply(cloud_path)
    if estimate_normals:
        cloud = PointCloud(cloud.positions, None, cloud.gt_labels)
    partition = build_superpoints(cloud, cfg.cut_params())
    paths = {"partition": out / "superpoints.spp", "ply": out / "superpoints.ply"}
    write_partition(paths["partition"], partition)
    colors = class_colors(partition.superpoint_count)[partition.assignment]
    write_ply(paths["ply"], PointCloud(cloud.positions), labels=None,
              superpoints=partition.assignment, colors=colors)
    _info("superpoints: partition built", stage="superpoints",
          superpoints=partition.superpoint_count, points=len(cloud))
    _write_manifest(out, "superpoints", cfg, {"cloud": Path(cloud_path)}, paths,
                    {"estimate_normals": estimate_normals}, started=t0)
    return paths


@_stage("train")
def cmd_train(cloud_path, targets_path, partition_path, out_dir,
              cfg: PipelineConfig) -> Dict[str, Path]:
    """Fit a feature field to the targets; writes a checkpoint and the loss curve."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cloud = read_ply(cloud_path)
    if cloud.normals is None:
        raise ValidationError("training needs a cloud with normals (they orient the rays)")
    targets = read_embeddings(targets_path)
    targets = targets / np.linalg.norm(targets, axis=1, keepdims=True)
    partition = read_partition(partition_path)
    if len(partition) != len(cloud):
        raise ValidationError(f"partition has {len(partition)} points, cloud has {len(cloud)}")
    grid = cfg.grid_params()
    origin, voxel, dims = grid_for_cloud(cloud.positions, grid)
    field = FeatureField.create(origin, voxel, dims, grid.scale_count, targets.shape[1],
                                grid.init_density, grid.init_scale, grid.seed)
    supervision = Supervision(cloud.positions, cloud.normals, targets,
                              grid.ray_offset, grid.ray_margin)
    tc = cfg.train_config()
    _info("train: starting", stage="train", dims=list(dims), voxel=voxel,
          iterations=tc.iterations, seed=tc.seed, lambda_c=tc.lambda_c)
    trained, history = train(field, supervision, partition, tc)
    paths = {"field": out / "field.spf", "loss": out / "loss.csv"}
    write_field(paths["field"], trained)
    write_loss_csv(paths["loss"], history)
    if history:
        _info("train: done", stage="train", final_loss=history[-1].total)
    _write_manifest(out, "train", cfg, {"cloud": Path(cloud_path), "targets": Path(targets_path),
                                        "partition": Path(partition_path)}, paths, started=t0)
    return paths


@_stage("segment")
def cmd_segment(field_path, cloud_path, partition_path, labelbank_path, out_dir,
                cfg: PipelineConfig, trained_without_consistency: bool = False) -> Dict[str, Path]:
    """Assign a class to every superpoint; writes a labelled PLY and per-superpoint scores."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    field = read_field(field_path)
    cloud = read_ply(cloud_path)
    partition = read_partition(partition_path)
    bank = read_labelbank(labelbank_path)
    result = assign_classes(field, cloud.positions, partition, bank, cfg.merge_config(),
                            threads=cfg.threads)
    paths = {"labels": out / "labels.ply", "scores": out / "scores.csv"}
    write_ply(paths["labels"], PointCloud(cloud.positions, cloud.normals), labels=result.point_labels,
              superpoints=partition.assignment,
              colors=label_colors(result.point_labels, bank.class_count))
    write_scores_csv(paths["scores"], result)
    _info("segment: labels assigned", stage="segment", superpoints=partition.superpoint_count,
          ignored=int((result.superpoint_labels == IGNORE).sum()),
          affinity=cfg.merge.use_affinity)
    _write_manifest(out, "segment", cfg,
                    {"field": Path(field_path), "cloud": Path(cloud_path),
                     "partition": Path(partition_path), "labelbank": Path(labelbank_path)},
                    paths, {"trained_without_consistency": trained_without_consistency},
                    started=t0)
    return paths


@_stage("eval")
def cmd_eval(pred_path, gt_path, out_path, labelbank_path=None,
             cfg: Optional[PipelineConfig] = None) -> dict:
    """Compare predicted and ground-truth ``label`` columns; writes metrics JSON."""
    pred = read_ply(pred_path).gt_labels
    gt = read_ply(gt_path).gt_labels
    if pred is None or gt is None:
        raise ValidationError("both PLY files need a 'label' property")
    if labelbank_path is not None:
        names = list(read_labelbank(labelbank_path).names)
    else:
        top = int(max(pred.max(initial=IGNORE), gt.max(initial=IGNORE)))
        names = [str(c) for c in range(top + 1)]
    report = metrics_report(confusion(pred, gt, len(names)), names)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(out_path, report)
    _info("eval: done", stage="eval", mIoU=report["mIoU"], mAcc=report["mAcc"])
    return report


def cmd_pipeline(out_dir, cfg: PipelineConfig, ablate: str = "none", scene_path=None,
                 cloud_path=None, targets_path=None, labelbank_path=None,
                 estimate_normals: bool = False) -> dict:
    """Run every stage through files in ``out_dir``.

    Either ``scene_path`` (or nothing, for the default scene) or all of
    ``cloud_path``, ``targets_path`` and ``labelbank_path`` must be given.
    ``ablate`` drops the consistency loss, the affinity refinement, or both.
    """
    t0 = time.time()
    if ablate not in ABLATIONS:
        raise UsageError(f"unknown ablation {ablate!r}")
    use_consistency, use_affinity = ABLATIONS[ablate]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = (cloud_path, targets_path, labelbank_path)
    if any(p is not None for p in inputs):
        if any(p is None for p in inputs) or scene_path is not None:
            raise UsageError("give either a scene spec or all of --cloud, --targets, --labelbank")
        cloud, targets, bank = (Path(p) for p in inputs)
    else:
        synth = cmd_synth(out / "synth", cfg, scene_path)
        cloud, targets, bank = synth["scene"], synth["targets"], synth["labelbank"]
    if not use_consistency:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"lambda_c": 0.0})})
    if not use_affinity:
        cfg = cfg.model_copy(update={"merge": cfg.merge.model_copy(update={"use_affinity": False})})
    sp = cmd_superpoints(cloud, out / "superpoints", cfg, estimate_normals)
    tr = cmd_train(cloud, targets, sp["partition"], out / "train", cfg)
    sg = cmd_segment(tr["field"], cloud, sp["partition"], bank, out / "segment", cfg,
                     trained_without_consistency=not use_consistency)
    report = cmd_eval(sg["labels"], cloud, out / "metrics.json", bank, cfg)
    scene_spec = None
    if scene_path is not None:
        with open(scene_path) as fh:
            scene_spec = json.load(fh)
    _write_manifest(out, "pipeline", cfg, {}, {"labels": sg["labels"], "metrics": out / "metrics.json"},
                    {"ablate": ablate, "scene": scene_spec, "estimate_normals": estimate_normals,
                     "external_inputs": [str(p) for p in inputs] if inputs[0] else None,
                     "mIoU": report["mIoU"], "mAcc": report["mAcc"]}, started=t0)
    return report


# -- argument parsing -------------------------------------------------------

# (flag, section, key, type, help); section None means top level
_OPTIONS = {
    "cut": [
        ("--k-thresh", "cut", "k_thresh", float, "graph-cut scale parameter"),
        ("--min-size", "cut", "min_size", int, "smallest superpoint kept as is"),
        ("--knn-k", "cut", "knn_k", int, "neighbours per point"),
    ],
    "train": [
        ("--iterations", "train", "iterations", int, "gradient steps"),
        ("--lr", "train", "lr", float, "learning rate"),
        ("--lambda-lang", "train", "lambda_lang", float, "language loss weight"),
        ("--lambda-c", "train", "lambda_c", float, "consistency loss weight"),
        ("--lambda-d", "train", "lambda_d", float, "density loss weight"),
        ("--delta", "train", "delta", float, "Huber threshold"),
        ("--resolution", "grid", "resolution", int, "grid nodes along the longest axis"),
        ("--scales", "grid", "scale_count", int, "embedding scales"),
    ],
    "merge": [
        ("--w", "merge", "weight", float, "affinity weight"),
        ("--np", "merge", "n_points", int, "points sampled per superpoint"),
        ("--na", "merge", "n_affinity", int, "positive/negative superpoints for affinity"),
        ("--scale-mode", "merge", "scale_mode", str, "combine scales by 'mean' or 'max'"),
    ],
    "synth": [
        ("--sigma-emb", "synth", "sigma_emb", float, "target embedding noise"),
        ("--dim", "synth", "dim", int, "embedding dimension"),
        ("--points-per-m2", "synth", "points_per_m2", float, "surface sampling density"),
        ("--sigma-geom", "synth", "sigma_geom", float, "position jitter"),
        ("--context-radius", "synth", "context_radius", float,
         "average prototypes over this radius before adding noise"),
    ],
}


def _add_common(p):
    p.add_argument("--config", help="config JSON (or a run manifest)")
    p.add_argument("--seed", type=int, help="master seed (overrides config and SPF_SEED)")
    p.add_argument("--json", action="store_true", help="machine-readable log lines")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_options(p, *groups):
    for g in groups:
        for flag, section, key, typ, hlp in _OPTIONS[g]:
            p.add_argument(flag, dest=f"opt_{section}_{key}", type=typ, help=hlp)
    if "merge" in groups:
        p.add_argument("--no-affinity", action="store_true", help="skip affinity refinement")
        p.add_argument("--normalized-affinity", action="store_true",
                       help="divide affinity by the summed positive relevancy")
        p.add_argument("--threads", type=int, help="worker threads for class scoring")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="superseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene, targets and label bank")
    p.add_argument("out_dir")
    p.add_argument("--scene", help="scene spec JSON (default: built-in six-class room)")
    _add_common(p)
    _add_options(p, "synth")

    p = sub.add_parser("superpoints", help="over-segment a cloud")
    p.add_argument("cloud")
    p.add_argument("out_dir")
    p.add_argument("--estimate-normals", action="store_true",
                   help="ignore stored normals and estimate them by PCA")
    _add_common(p)
    _add_options(p, "cut")

    p = sub.add_parser("train", help="train a feature field")
    p.add_argument("cloud")
    p.add_argument("targets")
    p.add_argument("partition")
    p.add_argument("out_dir")
    _add_common(p)
    _add_options(p, "train")

    p = sub.add_parser("segment", help="label superpoints from a trained field")
    p.add_argument("field")
    p.add_argument("cloud")
    p.add_argument("partition")
    p.add_argument("labelbank")
    p.add_argument("out_dir")
    p.add_argument("--no-consistency-was-trained", action="store_true",
                   help="record that the field was trained without the consistency loss")
    _add_common(p)
    _add_options(p, "merge")

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("out", help="metrics JSON path")
    p.add_argument("--labelbank", help="take class names and count from this label bank")
    _add_common(p)

    p = sub.add_parser("pipeline", help="run all stages")
    p.add_argument("out_dir")
    p.add_argument("--scene", help="scene spec JSON")
    p.add_argument("--cloud", help="labelled cloud with normals (instead of a synthetic scene)")
    p.add_argument("--targets", help="per-point target embeddings (EMB1)")
    p.add_argument("--labelbank")
    p.add_argument("--ablate", choices=sorted(ABLATIONS), default="none")
    p.add_argument("--estimate-normals", action="store_true")
    p.add_argument("--replay", help="rerun exactly the run recorded in a pipeline manifest")
    _add_common(p)
    _add_options(p, "cut", "train", "merge", "synth")
    return parser


def _overrides(args) -> dict:
    out: dict = {}
    for name, value in vars(args).items():
        if name.startswith("opt_") and value is not None:
            _, section, key = name.split("_", 2)
            out.setdefault(section, {})[key] = value
    if getattr(args, "no_affinity", False):
        out.setdefault("merge", {})["use_affinity"] = False
    if getattr(args, "normalized_affinity", False):
        out.setdefault("merge", {})["normalized_affinity"] = True
    if getattr(args, "threads", None) is not None:
        out["threads"] = args.threads
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _dispatch(args) -> int:
    replay = getattr(args, "replay", None)
    # a replay reproduces the recorded seed; SPF_SEED does not apply
    cfg = load_config(replay or args.config, _overrides(args), env={} if replay else None)
    if args.command == "synth":
        cmd_synth(args.out_dir, cfg, args.scene)
    elif args.command == "superpoints":
        cmd_superpoints(args.cloud, args.out_dir, cfg, args.estimate_normals)
    elif args.command == "train":
        cmd_train(args.cloud, args.targets, args.partition, args.out_dir, cfg)
    elif args.command == "segment":
        cmd_segment(args.field, args.cloud, args.partition, args.labelbank, args.out_dir, cfg,
                    args.no_consistency_was_trained)
    elif args.command == "eval":
        cmd_eval(args.pred, args.gt, args.out, args.labelbank, cfg)
    elif args.command == "pipeline":
        ablate, scene, est = args.ablate, args.scene, args.estimate_normals
        if replay:
            with open(replay) as fh:
                manifest = json.load(fh)
            ablate = manifest.get("ablate", "none")
            est = manifest.get("estimate_normals", False)
            if manifest.get("scene") is not None:
                scene = Path(args.out_dir) / "replay_scene.json"
                Path(args.out_dir).mkdir(parents=True, exist_ok=True)
                write_json(scene, manifest["scene"])
        report = cmd_pipeline(args.out_dir, cfg, ablate, scene, args.cloud, args.targets,
                              args.labelbank, est)
        print(json.dumps({"mIoU": report["mIoU"], "mAcc": report["mAcc"]}))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    _setup_logging(args.json, args.verbose)
    try:
        return _dispatch(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except StageError as err:
        cause = err.cause
        code = cause.exit_code if isinstance(cause, SupersegError) else 2
        log.error(f"error {err}", extra={"fields": {"stage": err.stage, "exit_code": code}})
        return code
    except SupersegError as err:
        log.error(f"error [config] {type(err).__name__}: {err}",
                  extra={"fields": {"stage": "config", "exit_code": err.exit_code}})
        return err.exit_code
    except OSError as err:
        log.error(f"error [io] {err}", extra={"fields": {"stage": "io", "exit_code": 2}})
        return 2
