import numpy as np
import pytest

from cluttershape.geometry import BACKGROUND, aabb_gap_squared, aabb_of, PointCloud
from cluttershape.scene import (
    CameraModel,
    PlacementError,
    SceneConfig,
    default_rig,
    generate_scene,
    load_scene,
    look_at,
    save_scene,
)

SMALL = SceneConfig(n_objects=3, surface_samples=800)


# --- cameras --------------------------------------------------------------


def test_look_at_faces_target():
    pose = look_at((1.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    forward_world = pose.rotation[:, 2]
    assert np.allclose(forward_world, [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-12)


def test_default_rig_layout():
    rig = default_rig((0.2, 0.2))
    assert len(rig) == 5  # one overhead plus four sides
    overhead = rig[0]
    assert np.allclose(overhead.pose.translation[:2], 0.0)
    side_heights = [cam.pose.translation[2] for cam in rig[1:]]
    assert np.allclose(side_heights, side_heights[0])
    assert all(h < overhead.pose.translation[2] for h in side_heights)


def test_camera_projects_origin_to_principal_point():
    cam = default_rig((0.2, 0.2))[1]
    u, v, z = cam.project(np.zeros((1, 3)))
    assert z[0] > 0
    assert u[0] == pytest.approx(cam.principal[0], abs=1e-9)
    assert v[0] == pytest.approx(cam.principal[1], abs=1e-9)


def test_camera_validation():
    pose = look_at((1.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        CameraModel(pose, width=4)
    with pytest.raises(ValueError):
        CameraModel(pose, focal=-1.0)


# --- configuration ----------------------------------------------------------


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(n_objects=0)
    with pytest.raises(ValueError):
        SceneConfig(n_objects=31)
    with pytest.raises(ValueError):
        SceneConfig(categories=("teapot",))
    with pytest.raises(ValueError):
        SceneConfig(min_gap=-0.1)
    with pytest.raises(ValueError):
        SceneConfig(alpha_range=(1.5, 0.75))


# --- generation ---------------------------------------------------------------


def test_generate_scene_is_deterministic():
    a = generate_scene(SMALL, seed=3)
    b = generate_scene(SMALL, seed=3)
    assert len(a.instances) == 3
    for inst_a, inst_b in zip(a.instances, b.instances):
        assert inst_a.category == inst_b.category
        assert inst_a.params == inst_b.params
        assert np.array_equal(inst_a.pose.rotation, inst_b.pose.rotation)
    for cloud_a, cloud_b in zip(a.view_clouds, b.view_clouds):
        assert np.array_equal(cloud_a.points, cloud_b.points)
        assert np.array_equal(cloud_a.labels, cloud_b.labels)
    c = generate_scene(SMALL, seed=4)
    assert not np.array_equal(a.view_clouds[0].points, c.view_clouds[0].points)


def test_generated_parameters_respect_ranges():
    scene = generate_scene(SMALL, seed=8)
    lo, hi = SMALL.alpha_range
    elo, ehi = SMALL.epsilon_range
    for inst in scene.instances:
        assert (lo <= inst.params.alpha).all() and (inst.params.alpha <= hi).all()
        assert elo <= inst.params.epsilon <= ehi
        assert inst.category in SMALL.categories


def test_instances_respect_min_gap():
    config = SceneConfig(n_objects=4, surface_samples=500, min_gap=0.02)
    scene = generate_scene(config, seed=1)
    boxes = []
    for inst in scene.instances:
        mesh = scene.instance_mesh(inst.instance_id)
        boxes.append(aabb_of(PointCloud(mesh.vertices)))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            assert aabb_gap_squared(boxes[i], boxes[j]) >= 0.02**2 - 1e-12


def test_placement_failure_raises():
    config = SceneConfig(
        n_objects=30, workspace=(0.02, 0.02), max_attempts=20, surface_samples=500
    )
    with pytest.raises(PlacementError):
        generate_scene(config, seed=0)


def test_view_clouds_match_label_images():
    scene = generate_scene(SMALL, seed=5)
    assert len(scene.view_clouds) == len(scene.cameras) == 5
    for cloud, image in zip(scene.view_clouds, scene.label_images):
        assert len(cloud) == int((image != BACKGROUND).sum())
        assert set(np.unique(cloud.labels)) <= set(range(len(scene.instances)))


def test_fused_cloud_offsets():
    scene = generate_scene(SMALL, seed=5)
    fused = scene.fused_cloud()
    offsets = scene.view_offsets()
    assert len(fused) == sum(len(c) for c in scene.view_clouds)
    for k, (offset, cloud) in enumerate(zip(offsets, scene.view_clouds)):
        assert np.array_equal(fused.points[offset : offset + len(cloud)], cloud.points)
        assert (fused.view_ids[offset : offset + len(cloud)] == k).all()


def test_truth_masks_cover_label_images():
    scene = generate_scene(SMALL, seed=6)
    masks = scene.truth_masks()
    for view_masks, image in zip(masks.views, scene.label_images):
        union = np.zeros(image.shape, dtype=bool)
        for mask in view_masks:
            union |= mask.pixels
        assert np.array_equal(union, image != BACKGROUND)


def test_instance_mesh_world_toggle():
    scene = generate_scene(SMALL, seed=7)
    inst = scene.instances[0]
    canonical = scene.instance_mesh(0, world=False)
    world = scene.instance_mesh(0)
    assert np.allclose(world.vertices, inst.pose.apply(canonical.vertices))


# --- persistence ----------------------------------------------------------------


def test_scene_save_load_round_trip(tmp_path):
    scene = generate_scene(SMALL, seed=9)
    directory = save_scene(scene, tmp_path / "scene")
    back = load_scene(directory)
    assert back.seed == scene.seed
    assert back.config == scene.config
    assert len(back.instances) == len(scene.instances)
    for a, b in zip(scene.instances, back.instances):
        assert a.category == b.category
        assert a.params == b.params
        assert np.allclose(a.pose.rotation, b.pose.rotation)
        assert np.allclose(a.pose.translation, b.pose.translation)
    for cloud_a, cloud_b in zip(scene.view_clouds, back.view_clouds):
        assert np.array_equal(cloud_a.points, cloud_b.points)
        assert np.array_equal(cloud_a.labels, cloud_b.labels)
        assert np.array_equal(cloud_a.view_ids, cloud_b.view_ids)
    for img_a, img_b in zip(scene.label_images, back.label_images):
        assert np.array_equal(img_a, img_b)


def test_save_scene_byte_identical(tmp_path):
    scene = generate_scene(SMALL, seed=10)
    d1 = save_scene(scene, tmp_path / "one")
    d2 = save_scene(scene, tmp_path / "two")
    for name in ("scene.json", "view_0.ply", "view_0_labels.u16", "masks.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_load_scene_missing_json(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path / "nothing")
