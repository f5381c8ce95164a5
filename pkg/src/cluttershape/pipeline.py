"""End-to-end orchestration: generate scenes, estimate shapes, evaluate, bench.

Each command is a pure function of (inputs on disk, config, seed): reruns
write byte-identical payload files.  Stage failures are re-raised with the
stage name attached and classified as data vs. internal errors so the CLI
can map them to exit codes.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fitting import MODES, FitConfig, FitResult, fit_baseline
from .fusion import Partition, assign_labels, merge_partitions
from .geometry import Aabb, PointCloud, aabb_of, apply_pose
from .masks import MaskSet, NoiseConfig, corrupt_masks
from .metrics import format_report, reconstruct_scene, scene_pr, segmentation_map, shape_cd
from .scene import SceneConfig, SceneDescription, generate_scene, load_scene, save_scene
from .seeds import derive_rng, derive_seed
from .templates import predict_shape
from . import ply

#: Placement clearance (m) between instance bounding boxes.  Touching objects
#: are indistinguishable from cross-view fragments of one object under the
#: mean-squared Chamfer criterion, so the simulator keeps a small gap.
DEFAULT_MIN_GAP = 0.015

#: Mergence threshold (m²) tuned for the five-camera rig: wide enough to
#: absorb side-view fragments of one instance, narrow enough to keep gapped
#: neighbors apart.
DEFAULT_H = 0.003

#: Partitions smaller than this after mergence are dropped as mask dust.
DEFAULT_MIN_POINTS = 15

#: Scenario presets: object count (None = drawn uniformly from 5..15) and
#: workspace half-extents, denser with rising object count.
PRESETS = {
    "easy": (5, (0.20, 0.20)),
    "normal": (10, (0.26, 0.26)),
    "hard": (15, (0.30, 0.30)),
    "random": (None, (0.30, 0.30)),
}

BENCH_PRESETS = ("easy", "normal", "hard")


class DataError(RuntimeError):
    """Invalid or inconsistent on-disk inputs."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and error kind."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.kind = "data" if isinstance(
            cause, (DataError, ValueError, KeyError, OSError)
        ) else "internal"


class _Stage:
    """Context manager that tags any exception with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


@dataclass(frozen=True)
class PipelineConfig:
    """Operator-level knobs shared by all commands."""

    preset: str = "easy"
    seed: int = 0
    categories: tuple[str, ...] = ("box", "can", "cup", "ball")
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    h: float = DEFAULT_H
    fit: FitConfig = field(default_factory=FitConfig)
    out: str = "out"
    scenes: int = 10
    mode: str = "full"
    min_points: int = DEFAULT_MIN_POINTS
    objects: Optional[int] = None  # overrides the preset object count

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {sorted(PRESETS)}")
        if self.objects is not None and not (1 <= self.objects <= 30):
            raise ValueError("objects override must be in [1, 30]")
        if self.h <= 0:
            raise ValueError("h threshold must be positive")
        if self.scenes < 1:
            raise ValueError("scene repetitions must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.min_points < 0:
            raise ValueError("min_points must be non-negative")


def _scene_config(config: PipelineConfig, n_objects: int) -> SceneConfig:
    _, workspace = PRESETS[config.preset]
    return SceneConfig(
        n_objects=n_objects,
        categories=config.categories,
        workspace=workspace,
        min_gap=DEFAULT_MIN_GAP,
    )


def _object_count(config: PipelineConfig, scene_seed: int) -> int:
    if config.objects is not None:
        return config.objects
    count, _ = PRESETS[config.preset]
    if count is None:
        count = int(derive_rng(scene_seed, 3).integers(5, 16))
    return count


def _generate(config: PipelineConfig, scene_seed: int) -> SceneDescription:
    scene_config = _scene_config(config, _object_count(config, scene_seed))
    return generate_scene(scene_config, scene_seed)


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_gen(config: PipelineConfig, directory=None) -> Path:
    """Generate one scene and persist it; returns the scene directory."""
    directory = Path(directory) if directory is not None else (
        Path(config.out) / f"{config.preset}_seed{config.seed}"
    )
    with _Stage("generate-scene"):
        scene = _generate(config, config.seed)
    with _Stage("save-scene"):
        save_scene(scene, directory)
    print(f"scene {directory}: {len(scene.instances)} instances "
          f"({sum(len(c) for c in scene.view_clouds)} fused points)")
    for inst in scene.instances:
        p = inst.params
        print(f"  [{inst.instance_id}] {inst.category:5s} "
              f"alpha=({p.alpha_x:.3f},{p.alpha_y:.3f},{p.alpha_z:.3f}) eps={p.epsilon:+.3f}")
    return directory


def _estimate_masks(scene: SceneDescription, config: PipelineConfig) -> MaskSet:
    masks = scene.truth_masks()
    if config.noise.is_zero():
        return masks
    return corrupt_masks(masks, config.noise, derive_seed(config.seed, 11))


def build_partitions(
    scene: SceneDescription, masks: MaskSet, h: float, min_points: int
) -> list[Partition]:
    """Project per-view masks onto the fused cloud, merge across views, and
    drop dust partitions below ``min_points``."""
    offsets = scene.view_offsets()
    assigned: list[Partition] = []
    for k, (cloud, camera) in enumerate(zip(scene.view_clouds, scene.cameras)):
        assigned.extend(
            assign_labels(cloud, masks.views[k], camera, view_index=k, index_base=offsets[k])
        )
    # Per-view mask indices collide across views; renumber globally in
    # (view, mask) order before mergence.
    assigned = [replace(p, merge_id=g) for g, p in enumerate(assigned)]
    merged = merge_partitions(assigned, h=h)
    return [p for p in merged if len(p) >= min_points]


def _majority_instance(partition: Partition) -> int:
    """Ground-truth instance owning most of the partition's points (ties to
    the smallest id); used for the known-pose lookup."""
    labels = partition.points.labels
    if labels is None:
        raise DataError(f"partition {partition.merge_id} carries no instance labels")
    return int(np.bincount(labels).argmax())


def cmd_estimate(scene_dir, config: PipelineConfig, results_dir=None) -> Path:
    """Run mask fusion and per-instance shape fitting for one scene."""
    scene_dir = Path(scene_dir)
    results_dir = Path(results_dir) if results_dir is not None else scene_dir / "results"
    with _Stage("load-scene"):
        scene = load_scene(scene_dir)
    with _Stage("prepare-masks"):
        masks = _estimate_masks(scene, config)
    with _Stage("fuse-partitions"):
        partitions = build_partitions(scene, masks, config.h, config.min_points)
    results_dir.mkdir(parents=True, exist_ok=True)
    with _Stage("write-partitions"):
        _dump_json(results_dir / "partitions.json", {
            "h": config.h,
            "partitions": [
                {
                    "merge_id": p.merge_id,
                    "category": p.category,
                    "views": sorted(p.source_views),
                    "indices": [int(i) for i in p.indices],
                }
                for p in partitions
            ],
        })

    fits: list[dict] = []
    reconstruction_inputs = []
    with _Stage("fit-shapes"):
        for partition in partitions:
            instance_id = _majority_instance(partition)
            pose = scene.instances[instance_id].pose
            template = scene.template(partition.category)
            observed = PointCloud(pose.invert(partition.points.points))
            fit_config = replace(config.fit, seed=derive_seed(config.seed, 21, partition.merge_id))
            result = fit_baseline(observed, template, config.mode, fit_config)
            fits.append({
                "merge_id": partition.merge_id,
                "category": partition.category,
                "instance": instance_id,
                "result": result.as_dict(),
            })
            reconstruction_inputs.append((partition.merge_id, template, result.params, pose))
    with _Stage("write-fits"):
        _dump_json(results_dir / "fits.json", {"mode": config.mode, "fits": fits})
    with _Stage("reconstruct"):
        if reconstruction_inputs:
            reconstructed = reconstruct_scene(
                reconstruction_inputs, config.fit.samples, derive_seed(config.seed, 22)
            )
        else:
            reconstructed = PointCloud(np.zeros((0, 3)))
            print("warning: no partitions survived fusion; wrote empty results",
                  file=sys.stderr)
        ply.write_ply(results_dir / "reconstructed.ply", reconstructed)
    return results_dir


def _ground_truth_partitions(scene: SceneDescription) -> list[Partition]:
    fused = scene.fused_cloud()
    partitions = []
    for inst in scene.instances:
        indices = np.flatnonzero(fused.labels == inst.instance_id)
        if len(indices) == 0:
            continue  # invisible in every view; unreachable by any predictor
        points = fused.select(indices)
        partitions.append(Partition(
            points=points,
            category=inst.category,
            source_views=frozenset(int(v) for v in np.unique(points.view_ids)),
            merge_id=inst.instance_id,
            indices=indices,
        ))
    return partitions


def _load_results(results_dir: Path, fused_size: int, scene: SceneDescription):
    partitions_file = results_dir / "partitions.json"
    fits_file = results_dir / "fits.json"
    if not partitions_file.exists() or not fits_file.exists():
        raise DataError(f"{results_dir} is missing partitions.json or fits.json")
    partition_payload = json.loads(partitions_file.read_text())
    fits_payload = json.loads(fits_file.read_text())
    known_ids = set()
    fused = scene.fused_cloud()
    partitions = []
    for entry in partition_payload["partitions"]:
        indices = np.asarray(entry["indices"], dtype=int)
        if len(indices) == 0 or indices.min() < 0 or indices.max() >= fused_size:
            raise DataError(f"partition {entry['merge_id']}: indices out of range")
        known_ids.add(entry["merge_id"])
        partitions.append(Partition(
            points=fused.select(indices),
            category=entry["category"],
            source_views=frozenset(entry["views"]),
            merge_id=entry["merge_id"],
            indices=indices,
        ))
    for entry in fits_payload["fits"]:
        if entry["merge_id"] not in known_ids:
            raise DataError(f"fit references unknown partition {entry['merge_id']}")
        if not (0 <= entry["instance"] < len(scene.instances)):
            raise DataError(f"fit references unknown instance {entry['instance']}")
    return partitions, fits_payload


def cmd_eval(scene_dir, results_dir) -> Path:
    """Score one scene's results: segmentation, per-instance CD, scene P/R."""
    scene_dir, results_dir = Path(scene_dir), Path(results_dir)
    with _Stage("load-scene"):
        scene = load_scene(scene_dir)
        gts = _ground_truth_partitions(scene)
        fused_size = sum(len(c) for c in scene.view_clouds)
    with _Stage("load-results"):
        preds, fits_payload = _load_results(results_dir, fused_size, scene)

    with _Stage("segmentation-report"):
        seg_report = segmentation_map(preds, gts)

    with _Stage("shape-cd"):
        cd_rows = []
        pred_boxes: list[tuple[Aabb, str]] = []
        for entry in fits_payload["fits"]:
            result = FitResult.from_dict(entry["result"])
            instance_id = entry["instance"]
            template = scene.template(entry["category"])
            pose = scene.instances[instance_id].pose
            predicted = apply_pose(
                predict_shape(template, result.params, 2048,
                              derive_seed(scene.seed, 31, entry["merge_id"])),
                pose,
            )
            gt_mesh = scene.instance_mesh(instance_id)
            cd = shape_cd(predicted, gt_mesh, 2048, derive_seed(scene.seed, 32, instance_id))
            cd_rows.append({
                "merge_id": entry["merge_id"],
                "instance": instance_id,
                "category": entry["category"],
                "cd": cd,
            })
            pred_boxes.append((aabb_of(predicted), entry["category"]))

    with _Stage("scene-report"):
        gt_boxes = []
        for inst in scene.instances:
            verts = scene.instance_mesh(inst.instance_id).vertices
            gt_boxes.append((Aabb(verts.min(axis=0), verts.max(axis=0)), inst.category))
        scene_report = scene_pr(pred_boxes, gt_boxes)

    with _Stage("write-reports"):
        _dump_json(results_dir / "seg_report.json", seg_report.as_dict())
        _dump_json(results_dir / "cd_report.json", {
            "rows": cd_rows,
            "mean_cd": float(np.mean([r["cd"] for r in cd_rows])) if cd_rows else None,
        })
        _dump_json(results_dir / "scene_report.json", scene_report.as_dict())
        tables = [
            format_report(seg_report, "Segmentation (mask IoU sweep 0.50:0.05:0.95)"),
            format_report(scene_report, "Scene completion (box IoU sweep 0.10:0.05:0.55)"),
            _format_cd_table(cd_rows),
        ]
        (results_dir / "tables.txt").write_text("\n".join(tables))
    return results_dir


def _format_cd_table(cd_rows: Sequence[dict]) -> str:
    lines = ["Shape Chamfer distance (m^2)", "-" * 28]
    lines.append(f"{'part':>5} {'inst':>5} {'category':>9} {'CD':>12}")
    for row in cd_rows:
        lines.append(f"{row['merge_id']:>5} {row['instance']:>5} "
                     f"{row['category']:>9} {row['cd']:>12.3e}")
    mean = float(np.mean([r["cd"] for r in cd_rows])) if cd_rows else float("nan")
    lines.append(f"{'mean':>21} {mean:>12.3e}")
    return "\n".join(lines) + "\n"


def _mean_std(values: Sequence[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "count": 0}
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "count": len(values)}


def _bench_scene(config: PipelineConfig, preset: str, scene_seed: int, modes) -> dict:
    """Generate + estimate + evaluate one scene fully in memory; partitions
    are shared across modes so only the fitting differs."""
    scene_config = replace(config, preset=preset)
    scene = _generate(scene_config, scene_seed)
    masks = scene.truth_masks()
    if not config.noise.is_zero():
        masks = corrupt_masks(masks, config.noise, derive_seed(scene_seed, 11))
    partitions = build_partitions(scene, masks, config.h, config.min_points)
    gts = _ground_truth_partitions(scene)
    seg_report = segmentation_map(partitions, gts)

    gt_boxes = []
    for inst in scene.instances:
        verts = scene.instance_mesh(inst.instance_id).vertices
        gt_boxes.append((Aabb(verts.min(axis=0), verts.max(axis=0)), inst.category))

    per_mode: dict[str, dict] = {}
    for mode in modes:
        cds = []
        pred_boxes = []
        for partition in partitions:
            instance_id = _majority_instance(partition)
            pose = scene.instances[instance_id].pose
            template = scene.template(partition.category)
            observed = PointCloud(pose.invert(partition.points.points))
            fit_config = replace(config.fit, seed=derive_seed(scene_seed, 21, partition.merge_id))
            result = fit_baseline(observed, template, mode, fit_config)
            predicted = apply_pose(
                predict_shape(template, result.params, 2048,
                              derive_seed(scene_seed, 31, partition.merge_id)),
                pose,
            )
            gt_mesh = scene.instance_mesh(instance_id)
            cds.append(shape_cd(predicted, gt_mesh, 2048, derive_seed(scene_seed, 32, instance_id)))
            pred_boxes.append((aabb_of(predicted), partition.category))
        scene_report = scene_pr(pred_boxes, gt_boxes)
        per_mode[mode] = {
            "mean_cd": float(np.mean(cds)) if cds else None,
            "scene_f1": scene_report.f1,
            "scene_map": scene_report.map,
            "scene_mar": scene_report.mar,
        }
    return {
        "seed": scene_seed,
        "objects": len(scene.instances),
        "partitions": len(partitions),
        "seg_map": seg_report.map,
        "seg_mar": seg_report.mar,
        "modes": per_mode,
    }


def cmd_bench(
    config: PipelineConfig,
    presets: Sequence[str] = BENCH_PRESETS,
    modes: Sequence[str] = MODES,
    directory=None,
) -> Path:
    """Benchmark ``config.scenes`` seeded scenes per preset across fit modes."""
    directory = Path(directory) if directory is not None else Path(config.out)
    directory.mkdir(parents=True, exist_ok=True)
    aggregate: dict = {"seed": config.seed, "scenes": config.scenes, "presets": {}}
    for p_idx, preset in enumerate(presets):
        rows = []
        failures = 0
        for i in range(config.scenes):
            scene_seed = derive_seed(config.seed, 5, p_idx, i)
            try:
                rows.append(_bench_scene(config, preset, scene_seed, modes))
            except Exception as exc:  # keep benching the remaining scenes
                failures += 1
                print(f"warning: {preset} scene {i} (seed {scene_seed}) failed: {exc}",
                      file=sys.stderr)
        summary = {
            "failures": failures,
            "completed": len(rows),
            "seg_map": _mean_std([r["seg_map"] for r in rows]),
            "seg_mar": _mean_std([r["seg_mar"] for r in rows]),
            "modes": {},
        }
        for mode in modes:
            summary["modes"][mode] = {
                key: _mean_std([
                    r["modes"][mode][key] for r in rows if r["modes"][mode][key] is not None
                ])
                for key in ("mean_cd", "scene_f1", "scene_map", "scene_mar")
            }
        aggregate["presets"][preset] = summary
    with _Stage("write-aggregate"):
        _dump_json(directory / "aggregate.json", aggregate)
        (directory / "aggregate.txt").write_text(_format_aggregate(aggregate, presets, modes))
    return directory


def _format_aggregate(aggregate: dict, presets, modes) -> str:
    lines = [f"benchmark seed={aggregate['seed']} scenes-per-preset={aggregate['scenes']}"]
    for preset in presets:
        block = aggregate["presets"][preset]
        lines.append("")
        lines.append(f"[{preset}] completed={block['completed']} failures={block['failures']}")
        seg = block["seg_map"]
        if seg["count"]:
            lines.append(f"  segmentation mAP {seg['mean']:.4f} ± {seg['std']:.4f}")
        lines.append(f"  {'mode':>14} {'CD mean':>12} {'CD std':>12} {'F1 mean':>9} {'F1 std':>9}")
        for mode in modes:
            cd = block["modes"][mode]["mean_cd"]
            f1 = block["modes"][mode]["scene_f1"]
            if cd["count"] == 0:
                lines.append(f"  {mode:>14} {'n/a':>12}")
                continue
            lines.append(f"  {mode:>14} {cd['mean']:>12.3e} {cd['std']:>12.3e} "
                         f"{f1['mean']:>9.4f} {f1['std']:>9.4f}")
    return "\n".join(lines) + "\n"
