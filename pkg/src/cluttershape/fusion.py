"""Cross-view segmentation fusion.

Per-view masks label the partial clouds into partitions; partitions of the
same category whose Chamfer distance falls below a threshold h are then
iteratively merged to a fixed point, each surviving partition standing for
one object instance.  The affinity-matrix algebra (intra/inter-class feature
fusion and the BCE / precision / recall / specificity objective terms) lives
here too, as plain deterministic array math.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Aabb, PointCloud, _directed_mean_sq, aabb_gap_squared, concat_clouds
from .masks import InstanceMask
from .scene import CameraModel

_CLAMP = 1e-7


@dataclass(frozen=True)
class Partition:
    """A chunk of the fused cloud believed to belong to one instance."""

    points: PointCloud
    category: str
    source_views: frozenset[int]
    merge_id: int
    indices: np.ndarray  # positions within the fused cloud

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("a partition cannot be empty")
        idx = np.asarray(self.indices, dtype=int)
        if idx.shape != (len(self.points),):
            raise ValueError("indices must match the point count")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "source_views", frozenset(self.source_views))

    def __len__(self) -> int:
        return len(self.points)


def assign_labels(
    cloud: PointCloud,
    masks: Sequence[InstanceMask],
    camera: CameraModel,
    *,
    view_index: int = 0,
    index_base: int = 0,
) -> list[Partition]:
    """Project a view's points through its camera into that view's masks.

    Points falling inside a mask join that mask's partition (category
    included); points outside every mask are discarded.  ``index_base``
    offsets the partition indices so they address the fused cloud.
    """
    masks = list(masks)
    if not masks or len(cloud) == 0:
        return []
    mask_id = np.full(masks[0].pixels.shape, -1, dtype=int)
    for j, mask in enumerate(masks):
        mask_id[mask.pixels] = j  # masks are disjoint within a view
    col, row, valid = camera.pixels(cloud.points)
    assigned = np.full(len(cloud), -1, dtype=int)
    assigned[valid] = mask_id[row[valid], col[valid]]
    partitions = []
    for j, mask in enumerate(masks):
        positions = np.flatnonzero(assigned == j)
        if len(positions) == 0:
            continue
        partitions.append(
            Partition(
                points=cloud.select(positions),
                category=mask.category,
                source_views=frozenset({view_index}),
                merge_id=j,
                indices=index_base + positions,
            )
        )
    return partitions


class _MergeState:
    """Mutable bookkeeping for one partition during mergence."""

    __slots__ = ("points", "members", "category", "views", "merge_id", "tree", "box")

    def __init__(self, partition: Partition):
        self.points = partition.points.points
        self.members = [partition]
        self.category = partition.category
        self.views = set(partition.source_views)
        self.merge_id = partition.merge_id
        self.tree: Optional[cKDTree] = None
        self.box: Optional[Aabb] = None

    def kdtree(self) -> cKDTree:
        if self.tree is None:
            self.tree = cKDTree(self.points)
        return self.tree

    def aabb(self) -> Aabb:
        if self.box is None:
            self.box = Aabb(self.points.min(axis=0), self.points.max(axis=0))
        return self.box

    def absorb(self, other: "_MergeState") -> None:
        self.points = np.concatenate([self.points, other.points])
        self.members.extend(other.members)
        self.views |= other.views
        self.tree = None
        self.box = None


def _chamfer_below(a: _MergeState, b: _MergeState, h: float) -> bool:
    # Cheap lower bound first: every NN distance is at least the box gap.
    if 2.0 * aabb_gap_squared(a.aabb(), b.aabb()) >= h:
        return False
    d = _directed_mean_sq(a.points, b.kdtree()) + _directed_mean_sq(b.points, a.kdtree())
    return d < h


DEFAULT_MERGE_THRESHOLD = 0.0005
"""Conservative mergence threshold (m^2) suited to near-complete fragments."""


def merge_partitions(
    partitions: Sequence[Partition], h: float = DEFAULT_MERGE_THRESHOLD
) -> list[Partition]:
    """Iteratively absorb same-category partitions with Chamfer distance < h.

    Absorbers are processed in ascending merge id; each pass absorbs every
    partition eligible against the absorber as it stood at the start of that
    absorber's pass, and passes repeat until nothing is enlarged.  Points are
    conserved; each output partition keeps its absorber's category and id.
    """
    if h <= 0:
        raise ValueError("merge threshold h must be positive")
    states = sorted((_MergeState(p) for p in partitions), key=lambda s: s.merge_id)
    alive = list(states)
    changed = True
    while changed:
        changed = False
        for absorber in alive:
            if not absorber.members:
                continue
            # The full eligible set is computed before anything is absorbed,
            # so eligibility is judged against the pre-pass absorber.
            eligible = [
                other
                for other in alive
                if other is not absorber
                and other.members
                and other.category == absorber.category
                and _chamfer_below(other, absorber, h)
            ]
            for other in eligible:
                absorber.absorb(other)
                other.members = []
                changed = True
    merged = []
    for state in alive:
        if not state.members:
            continue
        member_order = sorted(state.members, key=lambda p: p.merge_id)
        indices = np.concatenate([p.indices for p in member_order])
        merged.append(
            Partition(
                points=concat_clouds([p.points for p in member_order]),
                category=state.category,
                source_views=frozenset(state.views),
                merge_id=state.merge_id,
                indices=indices,
            )
        )
    return merged


# --- affinity algebra -------------------------------------------------------


def _check_affinity(a, *, binary: bool = False, name: str = "affinity") -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if (arr < 0).any() or (arr > 1).any():
        raise ValueError(f"{name} entries must lie in [0, 1]")
    if binary:
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError(f"{name} must be binary")
        if not np.array_equal(arr, arr.T) or not (np.diag(arr) == 1).all():
            raise ValueError(f"{name} must be symmetric with a unit diagonal")
    return arr


def fuse_features(affinity, features) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intra/inter-class feature mixing.

    Returns (Y_intra, Y_inter, fused) with Y_intra = A·F, Y_inter = (1−A)·F,
    and fused the columnwise concatenation [F | Y_intra | Y_inter].
    """
    a = _check_affinity(affinity)
    f = np.asarray(features, dtype=float)
    if f.ndim != 2 or f.shape[0] != a.shape[0]:
        raise ValueError(
            f"features must be (N, C) with N={a.shape[0]}, got shape {f.shape}"
        )
    intra = a @ f
    inter = (1.0 - a) @ f
    return intra, inter, np.hstack([f, intra, inter])


def _paired_views(predicted, truth) -> list[tuple[np.ndarray, np.ndarray]]:
    predicted, truth = list(predicted), list(truth)
    if len(predicted) != len(truth) or not predicted:
        raise ValueError("predicted and truth must be equally long, non-empty sequences")
    pairs = []
    for k, (a, c) in enumerate(zip(predicted, truth)):
        a = _check_affinity(a, name=f"view {k} prediction")
        c = _check_affinity(c, binary=True, name=f"view {k} truth")
        if a.shape != c.shape:
            raise ValueError(f"view {k}: prediction and truth shapes differ")
        pairs.append((np.clip(a, _CLAMP, 1.0 - _CLAMP), c))
    return pairs


def affinity_bce(predicted, truth) -> float:
    """Mean binary cross-entropy between predicted and true affinities."""
    total = 0.0
    pairs = _paired_views(predicted, truth)
    for a, c in pairs:
        total += float(np.mean(c * np.log(a) + (1.0 - c) * np.log(1.0 - a)))
    return -total / len(pairs)

def affinity_prs(predicted, truth) -> tuple[float, float, float]:
    """Log precision, recall, and specificity terms, averaged over views.

    Each term is ≤ 0, reaching 0 exactly at a perfect prediction.
    """
    pairs = _paired_views(predicted, truth)
    l_p = l_r = l_s = 0.0
    for k, (a, c) in enumerate(pairs):
        sum_ca = float((c * a).sum())
        sum_a = float(a.sum())
        sum_c = float(c.sum())
        sum_inv = float((1.0 - c).sum())
        if sum_a <= 0.0:
            raise ValueError(f"view {k}: predicted affinity sums to zero (precision term)")
        if sum_c <= 0.0:
            raise ValueError(f"view {k}: truth has no positive pairs (recall term)")
        if sum_inv <= 0.0:
            raise ValueError(f"view {k}: truth has no negative pairs (specificity term)")
        l_p += np.log(sum_ca / sum_a)
        l_r += np.log(sum_ca / sum_c)
        l_s += np.log(float(((1.0 - c) * (1.0 - a)).sum()) / sum_inv)
    k = len(pairs)
    return l_p / k, l_r / k, l_s / k


def seg_objective(predicted, truth, lam: float) -> float:
    """Combined segmentation objective: L_ce − λ(L_p + L_r + L_s)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l_p, l_r, l_s = affinity_prs(predicted, truth)
    return affinity_bce(predicted, truth) - lam * (l_p + l_r + l_s)


def affinity_from_labels(labels) -> np.ndarray:
    """Binary same-instance matrix: entry (i, j) is 1 iff labels match."""
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    return (arr[:, None] == arr[None, :]).astype(float)


# --- raw matrix files ---------------------------------------------------------


def save_matrix(path, matrix) -> None:
    """Raw little-endian float32 with a (rows u32, cols u32) header."""
    arr = np.asarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("only 2-D matrices are supported")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated matrix header")
    rows, cols = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(rows, cols).astype(float)
