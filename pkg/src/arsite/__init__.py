"""Marker-based AR tracking and site registry toolkit."""

from .errors import (
    ConflictError,
    FormatError,
    GeometryError,
    LockContentionError,
    ProjectionError,
    RegistryError,
    SceneError,
    ValidationError,
)
from .imaging import binarize, detect_quads, load_pgm, otsu_threshold, save_pgm, trace_contours
from .marker import (
    Detection,
    DetectParams,
    MarkerDictionary,
    MarkerTemplate,
    default_dictionary,
    detect_markers,
    generate_marker_image,
    homography_from_corners,
    load_markers,
    match_pattern,
    refine_corners_gray,
    refine_corners_template,
    sample_pattern,
    save_markers,
)
from .pose import (
    CameraIntrinsics,
    LocalTransform,
    Mesh,
    Pose,
    decompose_planar_homography,
    estimate_pose,
    load_camera,
    load_obj,
    model_view_matrix,
    project_model,
    project_point,
    project_points,
    refine_pose,
    reprojection_error,
    save_camera,
)
from .registry import (
    BuildingRecord,
    Comment,
    Manager,
    SiteStore,
    add_manager,
    list_comments,
    load_site,
    lookup_by_marker,
    post_comment,
    save_site,
    site_lock,
    upsert_building,
)
from .synth import (
    DEFAULT_INTRINSICS,
    SynthScene,
    pose_from_euler,
    random_pose,
    render_marker,
    validate_scene,
)

__version__ = "0.1.0"
