"""Category-level shape estimation for cluttered tabletop scenes.

The package covers the full loop: synthetic clutter generation with
ground-truth masks, cross-view partition mergence, template-deformation
fitting by Chamfer minimization, and the matching evaluation suite.
"""

from .geometry import (
    BACKGROUND,
    Aabb,
    DegenerateMeshError,
    EmptyCloudError,
    PointCloud,
    RigidPose,
    TriangleMesh,
    aabb_iou,
    aabb_of,
    apply_pose,
    chamfer_distance,
    concat_clouds,
    nearest_neighbor,
    sample_mesh_surface,
)
from .templates import (
    CategoryTemplate,
    DeformationParams,
    FlatTemplateWarning,
    apply_scale,
    apply_surface,
    build_template,
    deform_template,
    mean_template,
    predict_shape,
    template_library,
)
from .masks import InstanceMask, MaskSet, NoiseConfig, corrupt_masks
from .scene import (
    CameraModel,
    PlacementError,
    SceneConfig,
    SceneDescription,
    SceneInstance,
    default_rig,
    generate_scene,
    load_scene,
    render_views,
    save_scene,
)
from .fusion import (
    DEFAULT_MERGE_THRESHOLD,
    Partition,
    affinity_bce,
    affinity_from_labels,
    affinity_prs,
    assign_labels,
    fuse_features,
    merge_partitions,
    seg_objective,
)
from .fitting import FitConfig, FitResult, fit_baseline, fit_deformation
from .metrics import (
    MatchReport,
    point_mask_iou,
    reconstruct_scene,
    scene_pr,
    segmentation_map,
    shape_cd,
)

__version__ = "0.1.0"
