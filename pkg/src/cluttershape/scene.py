"""Synthetic cluttered-scene generator.

Deformed template instances are placed kinematically on the z=0 plane (random
yaw and xy, axis-aligned-box rejection against interpenetration) and observed
by one overhead plus four side cameras.  A per-camera z-buffer over surface
samples keeps the nearest point per pixel, which yields partial per-view
clouds, ground-truth label images, and masks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ply
from .geometry import (
    Aabb,
    PointCloud,
    RigidPose,
    TriangleMesh,
    aabb_gap_squared,
    aabb_intersection_volume,
    concat_clouds,
    rotation_about_z,
    sample_mesh_surface,
)
from .masks import MaskSet, masks_from_labels, read_label_raster, save_masks, write_label_raster
from .seeds import derive_rng, derive_seed
from .templates import (
    DEFAULT_MANIFEST,
    CategoryTemplate,
    DeformationParams,
    build_template,
    deform_template,
)


class PlacementError(RuntimeError):
    """Rejection sampling could not place an instance."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``pose`` maps camera frame to world frame."""

    pose: RigidPose
    width: int = 160
    height: int = 120
    focal: float = 150.0
    principal: tuple[float, float] = (80.0, 60.0)

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16 pixels")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")

    def camera_frame(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.pose.translation) @ self.pose.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous image coordinates (u, v) and camera-frame depth z."""
        cam = self.camera_frame(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * cam[:, 0] / z + self.principal[0]
            v = self.focal * cam[:, 1] / z + self.principal[1]
        return u, v, z

    def pixels(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer pixel (column, row) per point plus a validity mask."""
        u, v, z = self.project(points)
        valid = z > 1e-9
        col = np.full(len(z), -1, dtype=int)
        row = np.full(len(z), -1, dtype=int)
        col[valid] = np.floor(u[valid]).astype(int)
        row[valid] = np.floor(v[valid]).astype(int)
        valid &= (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        return col, row, valid


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-world pose with +z looking from eye toward target."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=float)
    right = np.cross(up, forward)
    if np.linalg.norm(right) < 1e-8:  # looking straight along up
        right = np.cross((0.0, 1.0, 0.0), forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidPose(np.column_stack([right, down, forward]), eye)


def default_rig(
    workspace: tuple[float, float],
    *,
    resolution: tuple[int, int] = (160, 120),
    elevation_deg: float = 15.0,
    distance_scale: float = 1.2,
    focal: Optional[float] = None,
) -> list[CameraModel]:
    """One overhead camera plus four side cameras spaced 90° apart.

    Side cameras sit at the given elevation above the horizon, at
    ``distance_scale`` times the workspace diagonal from the origin; the
    default focal length frames the whole workspace with a small margin.
    """
    width, height = resolution
    wx, wy = workspace
    diagonal = float(np.hypot(2.0 * wx, 2.0 * wy))
    distance = distance_scale * diagonal
    if focal is None:
        focal = min(width, height) * distance / (1.15 * diagonal)
    principal = (width / 2.0, height / 2.0)
    cameras = [
        CameraModel(
            look_at((0.0, 0.0, distance), (0.0, 0.0, 0.0)),
            width,
            height,
            focal,
            principal,
        )
    ]
    elevation = np.deg2rad(elevation_deg)
    for azimuth_deg in (0.0, 90.0, 180.0, 270.0):
        azimuth = np.deg2rad(azimuth_deg)
        eye = (
            distance * np.cos(elevation) * np.cos(azimuth),
            distance * np.cos(elevation) * np.sin(azimuth),
            distance * np.sin(elevation),
        )
        cameras.append(CameraModel(look_at(eye, (0.0, 0.0, 0.0)), width, height, focal, principal))
    return cameras


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 5
    categories: tuple[str, ...] = ("box", "can", "cup", "ball")
    alpha_range: tuple[float, float] = (0.75, 1.5)
    epsilon_range: tuple[float, float] = (-0.2, 0.8)
    workspace: tuple[float, float] = (0.2, 0.2)
    resolution: tuple[int, int] = (160, 120)
    surface_samples: int = 6000
    elevation_deg: float = 15.0
    distance_scale: float = 1.2
    focal: Optional[float] = None
    overlap_ratio: float = 0.15
    min_gap: float = 0.0
    max_attempts: int = 10000
    templates: dict = field(default_factory=lambda: dict(DEFAULT_MANIFEST))

    def __post_init__(self):
        if not (1 <= self.n_objects <= 30):
            raise ValueError("n_objects must lie in [1, 30]")
        if not self.categories:
            raise ValueError("need at least one category")
        for name in self.categories:
            if name not in self.templates:
                raise ValueError(f"category {name!r} missing from template manifest")
        lo, hi = self.alpha_range
        DeformationParams(lo, lo, lo, 0.0)
        DeformationParams(hi, hi, hi, 0.0)
        DeformationParams(1, 1, 1, self.epsilon_range[0])
        DeformationParams(1, 1, 1, self.epsilon_range[1])
        if lo > hi or self.epsilon_range[0] > self.epsilon_range[1]:
            raise ValueError("parameter ranges must be ordered (low, high)")
        if self.min_gap < 0:
            raise ValueError("min_gap must be non-negative")
        if not (0.0 <= self.overlap_ratio <= 1.0):
            raise ValueError("overlap_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class SceneInstance:
    instance_id: int
    category: str
    params: DeformationParams
    pose: RigidPose


@dataclass(frozen=True)
class SceneDescription:
    """Ground truth for one generated scene plus everything the cameras saw."""

    seed: int
    config: SceneConfig
    instances: tuple[SceneInstance, ...]
    cameras: tuple[CameraModel, ...]
    view_clouds: tuple[PointCloud, ...]
    label_images: tuple[np.ndarray, ...]

    def fused_cloud(self) -> PointCloud:
        return concat_clouds(self.view_clouds)

    def view_offsets(self) -> list[int]:
        """Index of each view's first point within the fused cloud."""
        offsets, total = [], 0
        for cloud in self.view_clouds:
            offsets.append(total)
            total += len(cloud)
        return offsets

    def template(self, category: str) -> CategoryTemplate:
        return build_template(category, self.config.templates)

    def instance_mesh(self, instance_id: int, *, world: bool = True) -> TriangleMesh:
        inst = self.instances[instance_id]
        mesh = deform_template(self.template(inst.category), inst.params)
        if not world:
            return mesh
        return TriangleMesh(inst.pose.apply(mesh.vertices), mesh.triangles)

    def truth_masks(self) -> MaskSet:
        categories = [inst.category for inst in self.instances]
        return MaskSet(tuple(masks_from_labels(img, categories) for img in self.label_images))


def render_views(
    meshes: Sequence[TriangleMesh],
    cameras: Sequence[CameraModel],
    *,
    samples_per_instance: int = 6000,
    seed: int = 0,
) -> tuple[tuple[PointCloud, ...], tuple[np.ndarray, ...]]:
    """Z-buffer the sampled instance surfaces into per-view clouds.

    Each mesh is sampled once (quantized to float32 so the clouds survive a
    PLY round trip bit-exactly); per camera, the nearest point per pixel
    wins.  Returns one labeled cloud and one label image per camera.
    """
    points_parts, owner_parts = [], []
    for i, mesh in enumerate(meshes):
        sample = sample_mesh_surface(mesh, samples_per_instance, derive_seed(seed, 7, i))
        points_parts.append(sample.points.astype(np.float32).astype(np.float64))
        owner_parts.append(np.full(samples_per_instance, i, dtype=int))
    if points_parts:
        points = np.concatenate(points_parts)
        owners = np.concatenate(owner_parts)
    else:
        points = np.empty((0, 3))
        owners = np.empty(0, dtype=int)

    clouds, images = [], []
    for k, camera in enumerate(cameras):
        u, v, z = camera.project(points)
        cand = np.flatnonzero(z > 1e-9)
        col = np.floor(u[cand]).astype(int)
        row = np.floor(v[cand]).astype(int)
        inside = (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
        cand = cand[inside]
        pix = row[inside] * camera.width + col[inside]
        # nearest depth wins; owner then sample index break exact-depth ties
        order = np.lexsort((cand, owners[cand], z[cand], pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        winners = cand[order][first]
        label_image = np.full((camera.height, camera.width), -1, dtype=int)
        label_image.reshape(-1)[pix_sorted[first]] = owners[winners]
        clouds.append(
            PointCloud(
                points[winners],
                labels=owners[winners],
                view_ids=np.full(len(winners), k, dtype=int),
            )
        )
        images.append(label_image)
    return tuple(clouds), tuple(images)


def _draw_instances(config: SceneConfig, rng: np.random.Generator) -> list[tuple[str, DeformationParams]]:
    drawn = []
    for _ in range(config.n_objects):
        category = config.categories[int(rng.integers(len(config.categories)))]
        alpha = rng.uniform(*config.alpha_range, size=3)
        epsilon = float(rng.uniform(*config.epsilon_range))
        drawn.append((category, DeformationParams(*alpha, epsilon)))
    return drawn


def generate_scene(config: SceneConfig, seed: int) -> SceneDescription:
    """Place, deform, and render one scene; identical (config, seed) pairs
    produce bit-identical descriptions."""
    params_rng = derive_rng(seed, 0)
    place_rng = derive_rng(seed, 1)
    drawn = _draw_instances(config, params_rng)

    wx, wy = config.workspace
    instances: list[SceneInstance] = []
    world_meshes: list[TriangleMesh] = []
    placed_boxes: list[Aabb] = []
    for i, (category, params) in enumerate(drawn):
        template = build_template(category, config.templates)
        mesh = deform_template(template, params)
        placed = False
        for _ in range(config.max_attempts):
            yaw = float(place_rng.uniform(0.0, 2.0 * np.pi))
            rotation = rotation_about_z(yaw)
            verts = mesh.vertices @ rotation.T
            lo, hi = verts.min(axis=0), verts.max(axis=0)
            tz = -lo[2]
            x_lo, x_hi = -wx - lo[0], wx - hi[0]
            y_lo, y_hi = -wy - lo[1], wy - hi[1]
            if x_lo > x_hi or y_lo > y_hi:
                continue  # footprint larger than the workspace at this yaw
            tx = float(place_rng.uniform(x_lo, x_hi))
            ty = float(place_rng.uniform(y_lo, y_hi))
            box = Aabb(lo + (tx, ty, tz), hi + (tx, ty, tz))
            ok = True
            for other in placed_boxes:
                smaller = min(box.volume(), other.volume())
                if aabb_intersection_volume(box, other) >= config.overlap_ratio * smaller:
                    ok = False
                    break
                if config.min_gap > 0 and aabb_gap_squared(box, other) < config.min_gap**2:
                    ok = False
                    break
            if not ok:
                continue
            pose = RigidPose(rotation, (tx, ty, tz))
            instances.append(SceneInstance(i, category, params, pose))
            world_meshes.append(TriangleMesh(pose.apply(mesh.vertices), mesh.triangles))
            placed_boxes.append(box)
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place instance {i} ({category}) after "
                f"{config.max_attempts} attempts"
            )

    cameras = default_rig(
        config.workspace,
        resolution=config.resolution,
        elevation_deg=config.elevation_deg,
        distance_scale=config.distance_scale,
        focal=config.focal,
    )
    clouds, images = render_views(
        world_meshes,
        cameras,
        samples_per_instance=config.surface_samples,
        seed=derive_seed(seed, 2),
    )
    return SceneDescription(
        seed=seed,
        config=config,
        instances=tuple(instances),
        cameras=tuple(cameras),
        view_clouds=clouds,
        label_images=images,
    )


# --- scene directory layout -------------------------------------------------


def _pose_to_json(pose: RigidPose) -> dict:
    return {
        "rotation": [float(v) for v in pose.rotation.reshape(-1)],
        "translation": [float(v) for v in pose.translation],
    }


def _pose_from_json(data: dict) -> RigidPose:
    return RigidPose(np.array(data["rotation"]).reshape(3, 3), np.array(data["translation"]))


def _config_to_json(config: SceneConfig) -> dict:
    return {
        "n_objects": config.n_objects,
        "categories": list(config.categories),
        "alpha_range": list(config.alpha_range),
        "epsilon_range": list(config.epsilon_range),
        "workspace": list(config.workspace),
        "resolution": list(config.resolution),
        "surface_samples": config.surface_samples,
        "elevation_deg": config.elevation_deg,
        "distance_scale": config.distance_scale,
        "focal": config.focal,
        "overlap_ratio": config.overlap_ratio,
        "min_gap": config.min_gap,
        "max_attempts": config.max_attempts,
        "templates": config.templates,
    }


def _config_from_json(data: dict) -> SceneConfig:
    return SceneConfig(
        n_objects=data["n_objects"],
        categories=tuple(data["categories"]),
        alpha_range=tuple(data["alpha_range"]),
        epsilon_range=tuple(data["epsilon_range"]),
        workspace=tuple(data["workspace"]),
        resolution=tuple(data["resolution"]),
        surface_samples=data["surface_samples"],
        elevation_deg=data["elevation_deg"],
        distance_scale=data["distance_scale"],
        focal=data["focal"],
        overlap_ratio=data["overlap_ratio"],
        min_gap=data["min_gap"],
        max_attempts=data["max_attempts"],
        templates=data["templates"],
    )


def save_scene(scene: SceneDescription, directory) -> Path:
    """Persist a scene as scene.json + per-view PLY clouds, label rasters,
    and the ground-truth masks.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "seed": scene.seed,
        "config": _config_to_json(scene.config),
        "cameras": [
            {
                "pose": _pose_to_json(cam.pose),
                "width": cam.width,
                "height": cam.height,
                "focal": cam.focal,
                "principal": list(cam.principal),
            }
            for cam in scene.cameras
        ],
        "instances": [
            {
                "id": inst.instance_id,
                "category": inst.category,
                "params": inst.params.as_dict(),
                "pose": _pose_to_json(inst.pose),
            }
            for inst in scene.instances
        ],
    }
    (directory / "scene.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    for k, cloud in enumerate(scene.view_clouds):
        ply.write_ply(directory / f"view_{k}.ply", cloud)
        write_label_raster(directory / f"view_{k}_labels.u16", scene.label_images[k])
    save_masks(scene.truth_masks(), directory / "masks.json")
    return directory


def load_scene(directory) -> SceneDescription:
    directory = Path(directory)
    scene_file = directory / "scene.json"
    if not scene_file.exists():
        raise FileNotFoundError(f"{directory} has no scene.json")
    payload = json.loads(scene_file.read_text())
    config = _config_from_json(payload["config"])
    cameras = tuple(
        CameraModel(
            _pose_from_json(cam["pose"]),
            cam["width"],
            cam["height"],
            cam["focal"],
            tuple(cam["principal"]),
        )
        for cam in payload["cameras"]
    )
    instances = tuple(
        SceneInstance(
            inst["id"],
            inst["category"],
            DeformationParams.from_dict(inst["params"]),
            _pose_from_json(inst["pose"]),
        )
        for inst in payload["instances"]
    )
    clouds, images = [], []
    for k in range(len(cameras)):
        cloud = ply.read_ply_cloud(directory / f"view_{k}.ply")
        clouds.append(
            PointCloud(cloud.points, cloud.labels, np.full(len(cloud), k, dtype=int))
        )
        images.append(read_label_raster(directory / f"view_{k}_labels.u16"))
    return SceneDescription(
        seed=payload["seed"],
        config=config,
        instances=instances,
        cameras=cameras,
        view_clouds=tuple(clouds),
        label_images=tuple(images),
    )
