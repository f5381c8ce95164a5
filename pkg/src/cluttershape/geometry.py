"""Core point-cloud and mesh geometry.

All coordinates are meters; squared distances, and the Chamfer values built
from them, are m².  Everything here is a pure function over immutable inputs,
so the types are safe to share between threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

# Instance label carried by points that belong to no object.
BACKGROUND = -1


class EmptyCloudError(ValueError):
    """An operation that needs at least one point received an empty cloud."""


class DegenerateMeshError(ValueError):
    """A mesh has (near-)zero surface area or invalid topology."""


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with optional per-point metadata.

    ``labels`` holds instance ids (BACKGROUND where none applies) and
    ``view_ids`` the index of the camera that observed each point.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    view_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        for name in ("labels", "view_ids"):
            values = getattr(self, name)
            if values is not None:
                arr = np.asarray(values, dtype=int)
                if arr.shape != (len(pts),):
                    raise ValueError(f"{name} must have one entry per point")
                object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, idx) -> "PointCloud":
        """Sub-cloud at the given positions; labels and view ids follow along."""
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.labels is None else self.labels[idx],
            None if self.view_ids is None else self.view_ids[idx],
        )


def concat_clouds(clouds: Sequence[PointCloud]) -> PointCloud:
    """Concatenate clouds in order; metadata is kept only if every part has it."""
    clouds = list(clouds)
    if not clouds:
        return PointCloud(np.empty((0, 3)))
    points = np.concatenate([c.points for c in clouds])
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    view_ids = None
    if all(c.view_ids is not None for c in clouds):
        view_ids = np.concatenate([c.view_ids for c in clouds])
    return PointCloud(points, labels, view_ids)


@dataclass(frozen=True)
class TriangleMesh:
    """Triangles over a shared vertex list."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        verts = _as_points(self.vertices)
        if not np.isfinite(verts).all():
            raise ValueError("vertex coordinates must be finite")
        tris = np.asarray(self.triangles, dtype=int)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise DegenerateMeshError("triangles must be an (m, 3) index array")
        if len(tris) == 0:
            raise DegenerateMeshError("mesh has no triangles")
        if tris.min() < 0 or tris.max() >= len(verts):
            raise DegenerateMeshError("triangle index out of vertex range")
        if (
            (tris[:, 0] == tris[:, 1])
            | (tris[:, 1] == tris[:, 2])
            | (tris[:, 0] == tris[:, 2])
        ).any():
            raise DegenerateMeshError("triangle repeats a vertex index")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        if (self.triangle_areas() <= 1e-12).any():
            raise DegenerateMeshError("mesh contains a (near-)zero-area triangle")

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by componentwise min/max corners."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("box corners must be finite")
        if (lo > hi).any():
            raise ValueError("box min exceeds max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def volume(self) -> float:
        return float(np.prod(self.max - self.min))

    def translated(self, offset) -> "Aabb":
        offset = np.asarray(offset, dtype=float)
        return Aabb(self.min + offset, self.max + offset)


def aabb_intersection_volume(a: Aabb, b: Aabb) -> float:
    extents = np.minimum(a.max, b.max) - np.maximum(a.min, b.min)
    if (extents <= 0).any():
        return 0.0
    return float(np.prod(extents))


def aabb_gap_squared(a: Aabb, b: Aabb) -> float:
    """Squared Euclidean distance between two boxes (0 when they touch)."""
    gaps = np.maximum(0.0, np.maximum(a.min - b.max, b.min - a.max))
    return float(np.dot(gaps, gaps))


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform: p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValueError("pose entries must be finite")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def invert(self, points: np.ndarray) -> np.ndarray:
        """Map world-frame points back into the pose's local frame."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _directed_mean_sq(points: np.ndarray, tree: cKDTree) -> float:
    """Mean squared distance from each point to its nearest neighbor in ``tree``."""
    d = tree.query(points)[0]
    return float(np.mean(d * d))


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Chamfer distance in m².

    Sum of the two directed means of squared nearest-neighbor distances, so
    the value does not depend on point count.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloudError("chamfer_distance needs two non-empty clouds")
    return _directed_mean_sq(a.points, cKDTree(b.points)) + _directed_mean_sq(
        b.points, cKDTree(a.points)
    )


def nearest_neighbor(query, cloud: PointCloud) -> tuple[int, float]:
    """Index and squared distance of the nearest point; ties go to the smallest index."""
    if len(cloud) == 0:
        raise EmptyCloudError("nearest_neighbor needs a non-empty cloud")
    q = np.asarray(query, dtype=float).reshape(3)
    d2 = np.sum((cloud.points - q) ** 2, axis=1)
    idx = int(np.argmin(d2))  # argmin returns the first minimum -> smallest index
    return idx, float(d2[idx])


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Draw ``n`` points uniformly from the mesh surface.

    Triangles are chosen by an area-weighted categorical draw, the point
    within each triangle by the square-root barycentric trick, so the density
    is uniform per unit area.  Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("sample count must be at least 1")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 1e-12:
        raise DegenerateMeshError("mesh surface area is below tolerance")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    tri = np.searchsorted(cdf, rng.random(n), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    u = np.sqrt(rng.random(n))[:, None]
    v = rng.random(n)[:, None]
    points = (1.0 - u) * a + u * (1.0 - v) * b + u * v * c
    return PointCloud(points)


def aabb_of(cloud: PointCloud) -> Aabb:
    if len(cloud) == 0:
        raise EmptyCloudError("aabb_of needs a non-empty cloud")
    return Aabb(cloud.points.min(axis=0), cloud.points.max(axis=0))


def aabb_iou(a: Aabb, b: Aabb) -> float:
    """Intersection volume over union volume; 0 for zero-volume unions."""
    inter = aabb_intersection_volume(a, b)
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def apply_pose(cloud: PointCloud, pose: RigidPose) -> PointCloud:
    return PointCloud(pose.apply(cloud.points), cloud.labels, cloud.view_ids)
