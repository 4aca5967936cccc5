"""Ground-truth frame renderer for exercising the detection pipeline.

Rendering maps every output pixel backwards through the pose homography
onto the marker plane, so silhouettes are exact and there are no holes.
Noise is the last stage; the clean structure stays analytically known.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProjectionError, SceneError
from .marker import GRID, MarkerTemplate
from .pose import CameraIntrinsics, Pose, marker_corners_3d, project_points

DEFAULT_INTRINSICS = CameraIntrinsics(fx=700.0, fy=700.0, cx=320.0, cy=240.0, width=640, height=480)
MIN_SIDE_PX = 16.0

# Supersample offsets: 2x2 within each pixel.
_SUB = ((-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25))


@dataclass
class SynthScene:
    template: MarkerTemplate
    pose: Pose
    intrinsics: CameraIntrinsics = field(default_factory=lambda: DEFAULT_INTRINSICS)
    background: int = 255
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.background <= 255:
            raise SceneError(f"background {self.background} outside [0, 255]")
        if self.noise_sigma < 0:
            raise SceneError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def projected_corners(scene: SynthScene) -> np.ndarray:
    """Ground-truth image positions of the four marker corners."""
    return project_points(scene.pose, scene.intrinsics, marker_corners_3d(scene.template.side_m))


def validate_scene(scene: SynthScene) -> None:
    """Check the frustum invariants.

    Raises:
        SceneError: naming the corner outside the frame or the projected
            side length below the floor.
    """
    cam = scene.intrinsics
    try:
        uv = projected_corners(scene)
    except ProjectionError as e:
        raise SceneError(f"marker behind camera: {e}") from None
    for i, (u, v) in enumerate(uv):
        if not (0.0 <= u <= cam.width - 1.0 and 0.0 <= v <= cam.height - 1.0):
            raise SceneError(f"corner {i} outside frame at ({u:.1f}, {v:.1f})")
    sides = np.hypot(*(uv - np.roll(uv, -1, axis=0)).T)
    if sides.min() < MIN_SIDE_PX:
        raise SceneError(f"projected side {sides.min():.1f} px below {MIN_SIDE_PX} px")


def render_marker(scene: SynthScene) -> np.ndarray:
    """Render the scene to a grayscale frame.

    Each pixel is sampled 2x2 through the inverse pose homography; cells
    are 0 (black) or 255 (white), everything off the mark takes the
    background level. Gaussian noise (sigma = noise_sigma, generator
    seeded with scene.seed) is added last and the result clamped.

    Raises:
        SceneError: scene invariants do not hold.
    """
    validate_scene(scene)
    cam = scene.intrinsics
    tpl = scene.template
    s = tpl.side_m
    cell = s / GRID
    grid = tpl.grid8()
    shade = np.where(grid == 1, 0.0, 255.0)

    # Plane-to-image homography and its camera-depth row.
    A = np.column_stack([scene.pose.R[:, 0], scene.pose.R[:, 1], scene.pose.t])
    H = cam.K @ A
    Hinv = np.linalg.inv(H)

    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    acc = np.zeros((cam.height, cam.width), dtype=np.float64)
    for dx, dy in _SUB:
        px = xs + dx
        py = ys + dy
        denom = Hinv[2, 0] * px + Hinv[2, 1] * py + Hinv[2, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            X = (Hinv[0, 0] * px + Hinv[0, 1] * py + Hinv[0, 2]) / denom
            Y = (Hinv[1, 0] * px + Hinv[1, 1] * py + Hinv[1, 2]) / denom
        depth = A[2, 0] * X + A[2, 1] * Y + A[2, 2]
        inside = (
            np.isfinite(X)
            & np.isfinite(Y)
            & (np.abs(X) <= s / 2)
            & (np.abs(Y) <= s / 2)
            & (depth > 0)
        )
        i = np.clip(((Y + s / 2) / cell).astype(int), 0, GRID - 1)
        j = np.clip(((X + s / 2) / cell).astype(int), 0, GRID - 1)
        acc += np.where(inside, shade[i, j], float(scene.background))
    out = acc / len(_SUB)

    if scene.noise_sigma > 0:
        rng = np.random.default_rng(scene.seed)
        out = out + rng.normal(0.0, scene.noise_sigma, out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _euler(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    """Rz(roll) Rx(pitch) Ry(yaw); positive roll turns clockwise on screen."""
    a, b, g = np.radians([yaw_deg, pitch_deg, roll_deg])
    cy, sy = np.cos(a), np.sin(a)
    cp, sp = np.cos(b), np.sin(b)
    cr, sr = np.cos(g), np.sin(g)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rz @ Rx @ Ry


def pose_from_euler(yaw_deg: float, pitch_deg: float, roll_deg: float, t) -> Pose:
    """Pose from yaw/pitch/roll in degrees and a translation in meters."""
    return Pose(_euler(yaw_deg, pitch_deg, roll_deg), np.asarray(t, dtype=np.float64)).validate()


def random_pose(
    seed: int,
    yaw_range=(-60.0, 60.0),
    pitch_range=(-60.0, 60.0),
    roll_range=(-60.0, 60.0),
    distance_range=(2.0, 10.0),
    *,
    side_m: float = 0.2,
    intrinsics: CameraIntrinsics | None = None,
    lateral_frac: float = 0.0,
    min_side_px: float = MIN_SIDE_PX,
    max_attempts: int = 100,
) -> Pose:
    """Seeded pose with uniform angles (degrees) and distance (marker sides).

    The marker is centered on the optical axis unless lateral_frac > 0,
    in which case a lateral offset up to that fraction of the remaining
    in-frame slack is sampled too. Draws are retried up to max_attempts
    times until the projected marker lies fully inside the frame with
    every side at least min_side_px.

    Raises:
        SceneError: no attempt satisfied the frustum constraint.
    """
    if distance_range[0] <= 0:
        raise ValueError(f"distance must be positive, got {distance_range}")
    cam = intrinsics or DEFAULT_INTRINSICS
    rng = np.random.default_rng(seed)
    corners = marker_corners_3d(side_m)
    for _ in range(max_attempts):
        yaw = rng.uniform(*yaw_range)
        pitch = rng.uniform(*pitch_range)
        roll = rng.uniform(*roll_range)
        dist = rng.uniform(*distance_range)
        R = _euler(yaw, pitch, roll)
        t = np.array([0.0, 0.0, dist * side_m])
        if lateral_frac > 0:
            pose0 = Pose(R, t)
            try:
                uv = project_points(pose0, cam, corners)
            except ProjectionError:
                continue
            slack_left = uv[:, 0].min()
            slack_right = cam.width - 1 - uv[:, 0].max()
            slack_up = uv[:, 1].min()
            slack_down = cam.height - 1 - uv[:, 1].max()
            if min(slack_left, slack_right, slack_up, slack_down) < 0:
                continue
            tx_px = rng.uniform(-lateral_frac * slack_left, lateral_frac * slack_right)
            ty_px = rng.uniform(-lateral_frac * slack_up, lateral_frac * slack_down)
            t = t + np.array([tx_px * t[2] / cam.fx, ty_px * t[2] / cam.fy, 0.0])
        pose = Pose(R, t)
        try:
            uv = project_points(pose, cam, corners)
        except ProjectionError:
            continue
        in_frame = (
            (uv[:, 0] >= 0).all()
            and (uv[:, 0] <= cam.width - 1).all()
            and (uv[:, 1] >= 0).all()
            and (uv[:, 1] <= cam.height - 1).all()
        )
        sides = np.hypot(*(uv - np.roll(uv, -1, axis=0)).T)
        if in_frame and sides.min() >= min_side_px:
            return pose.validate()
    raise SceneError(f"no in-frustum pose found in {max_attempts} attempts (seed {seed})")
