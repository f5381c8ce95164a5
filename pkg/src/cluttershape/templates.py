"""Category templates and the box-cage deformation.

A deformation is the composition of an anisotropic scale (applied first) and
a vertical taper whose top-layer lateral multiplier is 1+epsilon, bottom
layer 1.  Templates are parametric primitives in canonical pose: z up,
centroid at the origin.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import PointCloud, TriangleMesh, sample_mesh_surface

ALPHA_MIN, ALPHA_MAX = 0.2, 5.0
EPSILON_MIN, EPSILON_MAX = -0.9, 2.0  # lower bound exclusive


class FlatTemplateWarning(UserWarning):
    """Surface taper requested on vertices with no vertical extent."""


def _check_alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=float).reshape(3)
    if (a <= 0).any():
        raise ValueError("scale factors must be positive")
    if (a < ALPHA_MIN).any() or (a > ALPHA_MAX).any():
        raise ValueError(f"scale factors must lie in [{ALPHA_MIN}, {ALPHA_MAX}]")
    return a


def _check_epsilon(epsilon: float) -> float:
    eps = float(epsilon)
    if not (EPSILON_MIN < eps <= EPSILON_MAX):
        raise ValueError(f"surface factor must lie in ({EPSILON_MIN}, {EPSILON_MAX}]")
    return eps


@dataclass(frozen=True)
class DeformationParams:
    """Three axis scales and one surface taper factor."""

    alpha_x: float = 1.0
    alpha_y: float = 1.0
    alpha_z: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        _check_alpha((self.alpha_x, self.alpha_y, self.alpha_z))
        _check_epsilon(self.epsilon)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([self.alpha_x, self.alpha_y, self.alpha_z])

    @classmethod
    def identity(cls) -> "DeformationParams":
        return cls()

    @classmethod
    def clipped(cls, values) -> "DeformationParams":
        """Build params from a raw 4-vector, clipping into the legal box."""
        v = np.asarray(values, dtype=float).reshape(4)
        ax, ay, az = np.clip(v[:3], ALPHA_MIN, ALPHA_MAX)
        eps = float(np.clip(v[3], EPSILON_MIN + 1e-9, EPSILON_MAX))
        return cls(float(ax), float(ay), float(az), eps)

    def as_dict(self) -> dict:
        return {
            "alpha_x": self.alpha_x,
            "alpha_y": self.alpha_y,
            "alpha_z": self.alpha_z,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeformationParams":
        return cls(data["alpha_x"], data["alpha_y"], data["alpha_z"], data["epsilon"])


@dataclass(frozen=True)
class CategoryTemplate:
    """A category's canonical mesh (z up, centroid at the origin)."""

    category: str
    mesh: TriangleMesh

    def __post_init__(self):
        z = self.mesh.vertices[:, 2]
        if z.max() - z.min() <= 1e-9:
            raise ValueError(f"template {self.category!r} has no vertical extent")


def apply_scale(vertices, alpha) -> np.ndarray:
    """Multiply each vertex componentwise by (alpha_x, alpha_y, alpha_z)."""
    a = _check_alpha(alpha)
    return np.asarray(vertices, dtype=float) * a


def apply_surface(vertices, epsilon: float) -> np.ndarray:
    """Taper x/y linearly in height; the bottom layer is left untouched.

    A vertex at relative height t (0 bottom, 1 top) has its lateral
    coordinates multiplied by 1 + epsilon*t; z never changes.  Flat inputs
    come back unchanged with a FlatTemplateWarning.
    """
    eps = _check_epsilon(epsilon)
    verts = np.asarray(vertices, dtype=float).copy()
    z = verts[:, 2]
    extent = z.max() - z.min()
    if extent <= 1e-9:
        warnings.warn(
            "vertices have no vertical extent; surface transform is the identity",
            FlatTemplateWarning,
        )
        return verts
    t = (z - z.min()) / extent
    factor = 1.0 + eps * t
    verts[:, 0] *= factor
    verts[:, 1] *= factor
    return verts


def deform_template(template: CategoryTemplate, params: DeformationParams) -> TriangleMesh:
    """Scale first, taper second; triangles are carried over unchanged."""
    verts = apply_surface(apply_scale(template.mesh.vertices, params.alpha), params.epsilon)
    return TriangleMesh(verts, template.mesh.triangles)


def predict_shape(
    template: CategoryTemplate, params: DeformationParams, n: int, seed: int
) -> PointCloud:
    """Uniform surface samples of the deformed template."""
    return sample_mesh_surface(deform_template(template, params), n, seed)


def mean_template(meshes: Sequence[TriangleMesh], category: str = "mean") -> CategoryTemplate:
    """Vertexwise arithmetic mean of same-topology meshes."""
    meshes = list(meshes)
    if not meshes:
        raise ValueError("mean_template needs at least one mesh")
    first = meshes[0]
    for mesh in meshes[1:]:
        if len(mesh.vertices) != len(first.vertices) or not np.array_equal(
            mesh.triangles, first.triangles
        ):
            raise ValueError("meshes must share vertex count and triangle list")
    verts = np.mean([m.vertices for m in meshes], axis=0)
    return CategoryTemplate(category, TriangleMesh(verts, first.triangles))


# --- primitive generators -------------------------------------------------


def box_mesh(width: float = 0.05, depth: float = 0.05, height: float = 0.05) -> TriangleMesh:
    """Axis-aligned cuboid centered at the origin."""
    hw, hd, hh = width / 2.0, depth / 2.0, height / 2.0
    verts = np.array(
        [
            [-hw, -hd, -hh],
            [hw, -hd, -hh],
            [hw, hd, -hh],
            [-hw, hd, -hh],
            [-hw, -hd, hh],
            [hw, -hd, hh],
            [hw, hd, hh],
            [-hw, hd, hh],
        ]
    )
    quads = [
        (0, 3, 2, 1),  # bottom
        (4, 5, 6, 7),  # top
        (0, 1, 5, 4),
        (1, 2, 6, 5),
        (2, 3, 7, 6),
        (3, 0, 4, 7),
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return TriangleMesh(verts, np.array(tris))


def _ring(radius: float, z: float, segments: int, phase: float = 0.0) -> np.ndarray:
    angles = phase + 2.0 * np.pi * np.arange(segments) / segments
    return np.column_stack([radius * np.cos(angles), radius * np.sin(angles), np.full(segments, z)])


def tapered_cylinder_mesh(
    bottom_radius: float = 0.02,
    top_radius: float = 0.02,
    height: float = 0.05,
    segments: int = 24,
) -> TriangleMesh:
    """Closed frustum around the z axis, centered at the origin."""
    if segments < 3:
        raise ValueError("need at least 3 segments")
    if bottom_radius <= 0 or top_radius <= 0:
        raise ValueError("radii must be positive")
    hh = height / 2.0
    bottom = _ring(bottom_radius, -hh, segments)
    top = _ring(top_radius, hh, segments)
    verts = np.vstack([bottom, top, [[0.0, 0.0, -hh]], [[0.0, 0.0, hh]]])
    nb = segments
    bc, tc = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append((i, j, nb + i))  # side lower
        tris.append((j, nb + j, nb + i))  # side upper
        tris.append((j, i, bc))  # bottom cap
        tris.append((nb + i, nb + j, tc))  # top cap
    return TriangleMesh(verts, np.array(tris))


def cylinder_mesh(radius: float = 0.02, height: float = 0.05, segments: int = 24) -> TriangleMesh:
    return tapered_cylinder_mesh(radius, radius, height, segments)


def ellipsoid_mesh(
    rx: float = 0.02,
    ry: float = 0.02,
    rz: float = 0.02,
    segments: int = 24,
    rings: int = 12,
) -> TriangleMesh:
    """UV-tessellated ellipsoid centered at the origin."""
    if segments < 3 or rings < 3:
        raise ValueError("need at least 3 segments and 3 rings")
    verts = [[0.0, 0.0, -rz]]
    for r in range(1, rings):
        polar = np.pi * r / rings
        ring = _ring(np.sin(polar), -np.cos(polar), segments)
        ring[:, 0] *= rx
        ring[:, 1] *= ry
        ring[:, 2] *= rz
        verts.extend(ring.tolist())
    verts.append([0.0, 0.0, rz])
    south, north = 0, 1 + (rings - 1) * segments
    base = lambda r: 1 + (r - 1) * segments  # noqa: E731 - tiny index helper
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append((south, base(1) + j, base(1) + i))
        tris.append((north, base(rings - 1) + i, base(rings - 1) + j))
    for r in range(1, rings - 1):
        for i in range(segments):
            j = (i + 1) % segments
            a, b = base(r) + i, base(r) + j
            c, d = base(r + 1) + i, base(r + 1) + j
            tris.append((a, b, d))
            tris.append((a, d, c))
    return TriangleMesh(np.array(verts), np.array(tris))


_GENERATORS = {
    "box": box_mesh,
    "cylinder": cylinder_mesh,
    "tapered_cylinder": tapered_cylinder_mesh,
    "ellipsoid": ellipsoid_mesh,
}

# Default library: one primitive per category, sized like small tabletop items.
DEFAULT_MANIFEST = {
    "box": {"generator": "box", "params": {"width": 0.048, "depth": 0.04, "height": 0.038}},
    "can": {"generator": "cylinder", "params": {"radius": 0.019, "height": 0.044, "segments": 24}},
    "cup": {
        "generator": "tapered_cylinder",
        "params": {"bottom_radius": 0.015, "top_radius": 0.024, "height": 0.04, "segments": 24},
    },
    "ball": {
        "generator": "ellipsoid",
        "params": {"rx": 0.021, "ry": 0.021, "rz": 0.017, "segments": 24, "rings": 12},
    },
}


def build_template(category: str, manifest: Optional[dict] = None) -> CategoryTemplate:
    """Instantiate one category's template from a manifest entry."""
    manifest = DEFAULT_MANIFEST if manifest is None else manifest
    if category not in manifest:
        raise KeyError(f"no template registered for category {category!r}")
    entry = manifest[category]
    generator = _GENERATORS.get(entry["generator"])
    if generator is None:
        raise ValueError(f"unknown template generator {entry['generator']!r}")
    return CategoryTemplate(category, generator(**entry.get("params", {})))


def template_library(manifest: Optional[dict] = None) -> dict[str, CategoryTemplate]:
    manifest = DEFAULT_MANIFEST if manifest is None else manifest
    return {name: build_template(name, manifest) for name in sorted(manifest)}


def save_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
