"""Acceptance suite: ten go/no-go checks covering the full package.

Each test is one criterion with an explicit tolerance (and a wall-clock
budget where latency matters), so ``pytest -v tests/test_acceptance.py``
yields one pass/fail line per criterion.  Tests print their measured
values; run with ``-s`` to see them on success.
"""
import itertools
import json
import time

import numpy as np
import pytest

from cluttershape.fitting import MODES, FitConfig, fit_baseline, fit_deformation
from cluttershape.fusion import (
    Partition,
    affinity_bce,
    affinity_from_labels,
    affinity_prs,
    fuse_features,
    seg_objective,
)
from cluttershape.geometry import PointCloud, chamfer_distance, sample_mesh_surface
from cluttershape.masks import NoiseConfig, corrupt_masks
from cluttershape.metrics import (
    _greedy_matches,
    _partition_iou_matrix,
    segmentation_map,
    shape_cd,
)
from cluttershape.pipeline import (
    DEFAULT_H,
    DEFAULT_MIN_GAP,
    DEFAULT_MIN_POINTS,
    PRESETS,
    PipelineConfig,
    _ground_truth_partitions,
    build_partitions,
    cmd_bench,
)
from cluttershape.scene import SceneConfig, generate_scene
from cluttershape.seeds import derive_seed
from cluttershape.templates import DeformationParams, deform_template, predict_shape

CATEGORIES = ("box", "can", "cup", "ball")


# --- 1: Chamfer distance against an exhaustive oracle -------------------------


def brute_force_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def test_criterion_01_chamfer_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        a = rng.uniform(-1.0, 1.0, size=(int(rng.integers(1, 51)), 3))
        b = rng.uniform(-1.0, 1.0, size=(int(rng.integers(1, 51)), 3))
        fast = chamfer_distance(PointCloud(a), PointCloud(b))
        worst = max(worst, abs(fast - brute_force_chamfer(a, b)))
    elapsed = time.perf_counter() - started
    print(f"criterion 1: max |tree - brute| {worst:.2e} over 200 pairs, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 5.0


# --- 2: deformation recovery from full observations ----------------------------


def random_params(rng: np.random.Generator) -> DeformationParams:
    return DeformationParams(
        alpha_x=float(rng.uniform(0.75, 1.5)),
        alpha_y=float(rng.uniform(0.75, 1.5)),
        alpha_z=float(rng.uniform(0.75, 1.5)),
        epsilon=float(rng.uniform(-0.2, 0.8)),
    )


def test_criterion_02_recovers_deformations_within_five_percent(templates):
    config = FitConfig(samples=2048, max_evaluations=150)
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    recovered = 0
    for i in range(100):
        template = templates[CATEGORIES[i % 4]]
        true = random_params(rng)
        observed = sample_mesh_surface(deform_template(template, true), 2000,
                                       seed=1000 + i)
        found = fit_deformation(observed, template, config=config).params
        rel = max(
            abs(found.alpha_x - true.alpha_x) / true.alpha_x,
            abs(found.alpha_y - true.alpha_y) / true.alpha_y,
            abs(found.alpha_z - true.alpha_z) / true.alpha_z,
        )
        recovered += rel <= 0.05 and abs(found.epsilon - true.epsilon) <= 0.05
    elapsed = time.perf_counter() - started
    print(f"criterion 2: {recovered}/100 within 5% in {elapsed:.0f}s")
    assert recovered >= 95
    assert elapsed < 120.0


# --- 3: ablation ordering under half occlusion ---------------------------------


def test_criterion_03_full_model_beats_ablations_under_occlusion(templates):
    config = FitConfig(samples=768, max_evaluations=80, screen_samples=96)
    master = 7
    sums = {mode: 0.0 for mode in MODES}
    count = 0
    started = time.perf_counter()
    for ci, category in enumerate(CATEGORIES):
        template = templates[category]
        rng = np.random.default_rng(derive_seed(master, ci))
        for i in range(50):
            true = random_params(rng)
            mesh = deform_template(template, true)
            full = sample_mesh_surface(mesh, 2000, derive_seed(master, ci, i))
            observed = PointCloud(full.points[full.points[:, 1] >= 0.0])
            for mode in MODES:
                result = fit_baseline(observed, template, mode, config)
                predicted = predict_shape(template, result.params, 1024,
                                          derive_seed(master, ci, i, 1))
                sums[mode] += shape_cd(predicted, mesh, 1024,
                                       derive_seed(master, ci, i, 2))
            count += 1
    elapsed = time.perf_counter() - started
    means = {mode: sums[mode] / count for mode in MODES}
    print(f"criterion 3: mean CD over {count} occluded instances in {elapsed:.0f}s "
          + "  ".join(f"{mode}={means[mode]:.3e}" for mode in MODES))
    assert means["full"] < means["scale-only"] < means["none"]
    assert means["full"] < means["surface-only"] < means["none"]
    assert elapsed < 300.0


# --- 4: cross-view fusion recovers every instance ------------------------------


def test_criterion_04_fusion_recovers_all_instances_on_clean_masks():
    started = time.perf_counter()
    scenes = 0
    for p_idx, preset in enumerate(("easy", "normal", "hard")):
        count, workspace = PRESETS[preset]
        for i in range(20):
            seed = derive_seed(42, p_idx, i)
            scene = generate_scene(
                SceneConfig(n_objects=count, workspace=workspace,
                            min_gap=DEFAULT_MIN_GAP),
                seed,
            )
            partitions = build_partitions(scene, scene.truth_masks(),
                                          DEFAULT_H, DEFAULT_MIN_POINTS)
            assert len(partitions) == len(scene.instances), (preset, i)
            report = segmentation_map(partitions, _ground_truth_partitions(scene))
            assert min(report.precision) == 1.0, (preset, i)
            assert min(report.recall) == 1.0, (preset, i)
            scenes += 1
    elapsed = time.perf_counter() - started
    print(f"criterion 4: {scenes} scenes fused perfectly in {elapsed:.0f}s")
    assert scenes == 60
    assert elapsed < 60.0


# --- 5: segmentation recall degrades monotonically with mask dropout -----------


def test_criterion_05_recall_decreases_with_mask_dropout():
    levels = (0.0, 0.1, 0.3)
    recalls = {q: [] for q in levels}
    for i in range(20):
        seed = derive_seed(77, i)
        scene = generate_scene(
            SceneConfig(n_objects=10, workspace=(0.26, 0.26),
                        min_gap=DEFAULT_MIN_GAP),
            seed,
        )
        truth_masks = scene.truth_masks()
        truth_parts = _ground_truth_partitions(scene)
        for q in levels:
            masks = truth_masks if q == 0.0 else corrupt_masks(
                truth_masks, NoiseConfig(drop_prob=q), derive_seed(seed, 11))
            partitions = build_partitions(scene, masks, DEFAULT_H, DEFAULT_MIN_POINTS)
            recalls[q].append(segmentation_map(partitions, truth_parts).mar)
    means = {q: float(np.mean(recalls[q])) for q in levels}
    print("criterion 5: mean recall "
          + "  ".join(f"q={q}: {means[q]:.3f}" for q in levels))
    assert means[0.0] > means[0.1] > means[0.3]


# --- 6: segmentation objective vanishes at the true affinity -------------------


def test_criterion_06_objective_fixed_point_at_true_affinity():
    rng = np.random.default_rng(6)
    worst = 0.0
    checked = 0
    while checked < 20:
        labels = rng.integers(0, 4, size=int(rng.integers(2, 12)))
        if len(np.unique(labels)) < 2:
            continue  # the specificity term needs at least one negative pair
        truth = affinity_from_labels(labels)
        worst = max(worst, affinity_bce([truth], [truth]))
        for term in affinity_prs([truth], [truth]):
            worst = max(worst, -term)
        for lam in (0.0, 0.5, 1.0, 2.0, 3.5):
            worst = max(worst, abs(seg_objective([truth], [truth], lam)))
        checked += 1
    hand = seg_objective([np.full((2, 2), 0.5)], [np.eye(2)], 1.0)
    print(f"criterion 6: worst fixed-point objective {worst:.2e}, "
          f"hand case {hand:.6f}")
    assert worst <= 1e-5
    assert hand == pytest.approx(2.772589, abs=1e-6)


# --- 7: feature mixing identities ----------------------------------------------


def test_criterion_07_feature_mixing_identities():
    rng = np.random.default_rng(7)
    worst_intra = worst_inter = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 12))
        c = int(rng.integers(1, 6))
        features = rng.normal(size=(n, c))
        intra, _, fused = fuse_features(np.eye(n), features)
        worst_intra = max(worst_intra, float(np.abs(intra - features).max()))
        assert fused.shape == (n, 3 * c)
        _, inter, _ = fuse_features(np.ones((n, n)), features)
        worst_inter = max(worst_inter, float(np.abs(inter).max()))
    print(f"criterion 7: identity residual {worst_intra:.2e}, "
          f"all-ones inter residual {worst_inter:.2e}")
    assert worst_intra <= 1e-12
    assert worst_inter <= 1e-12


# --- 8: matcher sanity on fuzzed partition sets ---------------------------------


def indexed_partition(indices, category="box", merge_id=0) -> Partition:
    indices = np.asarray(indices, dtype=int)
    zeros = np.zeros_like(indices, dtype=float)
    return Partition(
        points=PointCloud(np.column_stack([indices.astype(float), zeros, zeros])),
        category=category,
        source_views=frozenset({0}),
        merge_id=merge_id,
        indices=indices,
    )


def random_partition_set(rng, count, universe=60):
    perm = rng.permutation(universe)
    cuts = (np.sort(rng.choice(np.arange(1, universe), size=count - 1, replace=False))
            if count > 1 else [])
    return [
        indexed_partition(chunk, ("box", "cup")[int(rng.integers(2))], merge_id=i)
        for i, chunk in enumerate(np.split(perm, cuts))
        if len(chunk)
    ]


def brute_force_best_matching(iou: np.ndarray, threshold: float) -> int:
    for k in range(min(iou.shape), 0, -1):
        for preds in itertools.permutations(range(iou.shape[0]), k):
            for gts in itertools.permutations(range(iou.shape[1]), k):
                if all(iou[p, g] >= threshold for p, g in zip(preds, gts)):
                    return k
    return 0


def test_criterion_08_matching_is_monotone_and_near_optimal():
    rng = np.random.default_rng(2718)
    equal = small = 0
    for _ in range(1000):
        preds = random_partition_set(rng, int(rng.integers(1, 7)))
        gts = random_partition_set(rng, int(rng.integers(1, 7)))
        report = segmentation_map(preds, gts)
        pairs = zip(report.precision, report.precision[1:])
        assert all(a >= b - 1e-12 for a, b in pairs)
        assert all(a >= b - 1e-12 for a, b in zip(report.recall, report.recall[1:]))
        if len(preds) <= 4 and len(gts) <= 4:
            small += 1
            iou = _partition_iou_matrix(preds, gts)
            order = sorted(range(len(preds)),
                           key=lambda i: (-len(preds[i]), preds[i].merge_id))
            got = len(_greedy_matches(iou, order, 0.25))
            best = brute_force_best_matching(iou, 0.25)
            assert got <= best
            equal += got == best
    print(f"criterion 8: 1000 sweeps monotone; greedy == optimal on "
          f"{equal}/{small} small cases")
    assert equal / small >= 0.9


# --- 9: benchmark reports are byte-deterministic --------------------------------


def test_criterion_09_bench_reports_are_byte_deterministic(tmp_path, capsys):
    config = PipelineConfig(
        seed=99, scenes=1,
        fit=FitConfig(samples=600, max_evaluations=60, screen_samples=96),
    )
    first = cmd_bench(config, presets=("easy",), modes=("none", "full"),
                      directory=tmp_path / "a")
    second = cmd_bench(config, presets=("easy",), modes=("none", "full"),
                       directory=tmp_path / "b")
    capsys.readouterr()
    for name in ("aggregate.json", "aggregate.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
    print("criterion 9: aggregate.json and aggregate.txt byte-identical")


# --- 10: full deformation beats the rigid baseline on noisy scenes --------------


def test_criterion_10_full_mode_beats_rigid_baseline_on_noisy_scenes(tmp_path, capsys):
    config = PipelineConfig(
        preset="easy", seed=13, scenes=6,
        noise=NoiseConfig(erode_px=2, flip_prob=0.05, drop_prob=0.05),
        fit=FitConfig(samples=600, max_evaluations=60, screen_samples=96),
    )
    directory = cmd_bench(config, presets=("easy",), modes=("none", "full"),
                          directory=tmp_path / "bench")
    capsys.readouterr()
    block = json.loads((directory / "aggregate.json").read_text())["presets"]["easy"]
    assert block["completed"] == 6 and block["failures"] == 0
    none_f1 = block["modes"]["none"]["scene_f1"]["mean"]
    full_f1 = block["modes"]["full"]["scene_f1"]["mean"]
    print(f"criterion 10: scene F1 full {full_f1:.3f} vs rigid {none_f1:.3f} "
          f"over 6 noisy scenes")
    assert full_f1 > none_f1
