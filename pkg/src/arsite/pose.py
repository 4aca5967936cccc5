"""Camera model and planar pose recovery.

Frames: the camera looks down +z with x right and y down, matching image
coordinates. The marker frame is image-aligned at identity pose (x right,
y down, z away from the viewer), origin at the mark center, so a mark
facing the camera upright has R = I. Canonical marker corners, in meters:

    0: (-s/2, -s/2, 0)   top left
    1: (+s/2, -s/2, 0)   top right
    2: (+s/2, +s/2, 0)   bottom right
    3: (-s/2, +s/2, 0)   bottom left

Pose (R, t) maps marker coordinates into camera coordinates. 4x4 matrices
are row major, translations in meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GeometryError, ProjectionError
from .marker import homography_from_corners
from .imaging import polygon_area

MIN_DEPTH = 1e-9
ROT_TOL = 1e-9


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the frame")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def load_camera(path) -> CameraIntrinsics:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    try:
        return CameraIntrinsics(
            fx=float(raw["fx"]),
            fy=float(raw["fy"]),
            cx=float(raw["cx"]),
            cy=float(raw["cy"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad camera record: {e}") from None


def save_camera(cam: CameraIntrinsics, path) -> None:
    rec = {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
    }
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2)
        fh.write("\n")


@dataclass
class Pose:
    R: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self, tol: float = ROT_TOL) -> "Pose":
        if self.R.shape != (3, 3):
            raise GeometryError(f"R must be 3x3, got {self.R.shape}")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > tol:
            raise GeometryError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise GeometryError("det(R) != 1")
        if not self.t[2] > 0:
            raise GeometryError(f"marker must be in front of the camera, t.z = {self.t[2]}")
        return self

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (angle = |w| radians)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def marker_corners_3d(side_m: float) -> np.ndarray:
    h = side_m / 2.0
    return np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])


def project_points(pose: Pose, cam: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Pinhole projection of (n, 3) marker-frame points to pixels.

    Raises:
        ProjectionError: any point at or behind the camera plane.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    cam_pts = pts @ pose.R.T + pose.t
    z = cam_pts[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise ProjectionError(f"point at depth {z.min():.3g} cannot be projected")
    u = cam.fx * cam_pts[:, 0] / z + cam.cx
    v = cam.fy * cam_pts[:, 1] / z + cam.cy
    return np.column_stack([u, v])


def project_point(pt, pose: Pose, cam: CameraIntrinsics) -> tuple[float, float]:
    """Project one marker-frame point to pixel coordinates."""
    uv = project_points(pose, cam, np.asarray(pt, dtype=np.float64).reshape(1, 3))
    return float(uv[0, 0]), float(uv[0, 1])


def decompose_planar_homography(H: np.ndarray, cam: CameraIntrinsics) -> Pose:
    """Recover pose from a plane-to-image homography.

    H maps metric marker plane coordinates (z = 0) to pixels. The first
    two columns of K^-1 H estimate r1, r2 up to a shared scale taken as
    the mean of their norms; t is the third column at the same scale,
    negated if it lands behind the camera. The rotation is the nearest
    orthonormal matrix to [r1 r2 r1xr2] by SVD.

    Raises:
        GeometryError: near-zero leading columns, or an invalid result.
    """
    M = np.linalg.solve(cam.K, np.asarray(H, dtype=np.float64))
    n1 = np.linalg.norm(M[:, 0])
    n2 = np.linalg.norm(M[:, 1])
    if n1 < 1e-12 or n2 < 1e-12:
        raise GeometryError("degenerate homography: vanishing rotation column")
    lam = 2.0 / (n1 + n2)
    r1 = lam * M[:, 0]
    r2 = lam * M[:, 1]
    t = lam * M[:, 2]
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    approx = np.column_stack([r1, r2, np.cross(r1, r2)])
    u, _, vt = np.linalg.svd(approx)
    R = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    return Pose(R, t).validate()


def _corner_array(detection) -> np.ndarray:
    # accepts a Detection or a bare (4, 2) corner array
    return np.asarray(getattr(detection, "corners", detection), dtype=np.float64)


def estimate_pose(detection, side_m: float, cam: CameraIntrinsics) -> Pose:
    """Pose from one detected mark (a Detection or its (4, 2) corners).

    Corners must be in the canonical order produced by detection:
    clockwise on screen starting at the image of the marker's top left
    corner.

    Raises:
        GeometryError: counterclockwise winding or degenerate geometry.
    """
    corners = _corner_array(detection)
    if corners.shape != (4, 2):
        raise ValueError(f"expected (4, 2) corners, got {corners.shape}")
    if polygon_area(corners) <= 0:
        raise GeometryError("corner winding is not clockwise")
    obj = marker_corners_3d(side_m)[:, :2]
    H = homography_from_corners(obj, corners)
    return decompose_planar_homography(H, cam)


def reprojection_error(pose: Pose, detection, side_m: float, cam: CameraIntrinsics) -> float:
    """RMS distance in pixels between projected and observed corners."""
    proj = project_points(pose, cam, marker_corners_3d(side_m))
    d = proj - _corner_array(detection)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _apply_step(pose: Pose, delta: np.ndarray) -> Pose:
    return Pose(pose.R @ rodrigues(delta[:3]), pose.t + delta[3:])


def _residual(pose: Pose, corners: np.ndarray, side_m: float, cam: CameraIntrinsics) -> np.ndarray:
    proj = project_points(pose, cam, marker_corners_3d(side_m))
    return (proj - corners).ravel()


def pose_jacobian(
    pose: Pose, corners: np.ndarray, side_m: float, cam: CameraIntrinsics, step: float = 1e-6
) -> np.ndarray:
    """Central-difference Jacobian of the 8 corner residuals.

    Columns are the axis-angle increment (marker frame) then translation.
    """
    corners = _corner_array(corners)
    J = np.empty((8, 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = step
        rp = _residual(_apply_step(pose, d), corners, side_m, cam)
        rm = _residual(_apply_step(pose, -d), corners, side_m, cam)
        J[:, i] = (rp - rm) / (2.0 * step)
    return J


def refine_pose(
    pose: Pose,
    detection,
    side_m: float,
    cam: CameraIntrinsics,
    *,
    max_iter: int = 20,
    jac_step: float = 1e-6,
    step_tol: float = 1e-10,
    max_halvings: int = 8,
) -> tuple[Pose, bool]:
    """Gauss-Newton polish of a pose against a detected mark's corners.

    Iterates at most max_iter times, halving a step up to max_halvings
    times whenever it would increase the RMS reprojection error, and
    stopping when the applied step norm drops below step_tol. The error
    of the returned pose never exceeds the error of the input pose.

    Returns:
        (refined pose, degraded flag). The flag is set when the normal
        equations are singular, in which case the input pose is returned
        unchanged.
    """
    corners = _corner_array(detection)
    current = Pose(pose.R.copy(), pose.t.copy())
    current_err = reprojection_error(current, corners, side_m, cam)
    for _ in range(max_iter):
        r = _residual(current, corners, side_m, cam)
        J = pose_jacobian(current, corners, side_m, cam, step=jac_step)
        JtJ = J.T @ J
        g = J.T @ r
        try:
            delta = np.linalg.solve(JtJ, -g)
        except np.linalg.LinAlgError:
            return pose, True
        if not np.all(np.isfinite(delta)):
            return pose, True

        accepted = False
        for _half in range(max_halvings + 1):
            try:
                cand = _apply_step(current, delta)
                cand_err = reprojection_error(cand, corners, side_m, cam)
            except (GeometryError, ProjectionError):
                cand_err = np.inf
            if cand_err <= current_err:
                accepted = True
                break
            delta = delta / 2.0
        if not accepted:
            break
        current, current_err = cand, cand_err
        if np.linalg.norm(delta) < step_tol:
            break
    try:
        current.validate()
    except GeometryError:
        return pose, True
    return current, False


# ---------------------------------------------------------------------------
# Model placement

@dataclass
class LocalTransform:
    """Mesh placement relative to the mark: translate, rotate, scale."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # axis-angle
    scale: float = 1.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def model_view_matrix(pose: Pose, local: LocalTransform | None = None) -> np.ndarray:
    """4x4 mapping model coordinates to camera coordinates.

    MV = [R|t] . T(translation) . Rot(axis-angle) . S(scale), row major.
    """
    local = local or LocalTransform()
    T = np.eye(4)
    T[:3, 3] = local.translation
    Rl = np.eye(4)
    Rl[:3, :3] = rodrigues(local.rotation)
    S = np.diag([local.scale, local.scale, local.scale, 1.0])
    return pose.matrix4() @ T @ Rl @ S


@dataclass
class Mesh:
    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (m, 3) int32, zero based

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.triangles) < 1:
            raise FormatError("mesh has no faces")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise FormatError("face index out of range")


def load_obj(path) -> Mesh:
    """Minimal Wavefront OBJ reader: v and f records only.

    Faces may use v, v/vt, v//vn or v/vt/vn syntax; only the vertex index
    is kept. Faces with more than three vertices are fan-triangulated.
    Every other record type is ignored.

    Raises:
        FormatError: malformed v/f lines (with line number), indices out
            of range, or no faces at all.
    """
    vertices = []
    faces = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: face needs at least 3 indices")
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise FormatError(f"{path}:{lineno}: bad face index {token!r}") from None
                    if i < 1:
                        raise FormatError(f"{path}:{lineno}: face indices are 1-based, got {i}")
                    idx.append(i - 1)
                for a, b in zip(idx[1:], idx[2:]):
                    faces.append([idx[0], a, b])
    if not vertices:
        raise FormatError(f"{path}: no vertices")
    return Mesh(np.asarray(vertices), np.asarray(faces, dtype=np.int32).reshape(-1, 3))


def mesh_edges(mesh: Mesh) -> list[tuple[int, int]]:
    """Undirected edges in first-appearance order over the triangle list."""
    seen = set()
    edges = []
    for tri in mesh.triangles:
        a, b, c = (int(v) for v in tri)
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            if key not in seen:
                seen.add(key)
                edges.append(e)
    return edges


def project_model(
    mesh: Mesh,
    mv,
    cam: CameraIntrinsics,
) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Project mesh wireframe edges through a model-view matrix.

    mv is a 4x4 model-view matrix; a Pose is also accepted and used with
    an identity local transform. Edges with either endpoint at or behind
    the camera plane are dropped rather than clipped.
    """
    if isinstance(mv, Pose):
        mv = mv.matrix4()
    mv = np.asarray(mv, dtype=np.float64)
    vh = np.column_stack([mesh.vertices, np.ones(len(mesh.vertices))])
    cam_pts = vh @ mv.T
    z = cam_pts[:, 2]
    u = np.where(z > MIN_DEPTH, cam.fx * cam_pts[:, 0] / np.where(z > MIN_DEPTH, z, 1.0) + cam.cx, 0.0)
    v = np.where(z > MIN_DEPTH, cam.fy * cam_pts[:, 1] / np.where(z > MIN_DEPTH, z, 1.0) + cam.cy, 0.0)
    segments = []
    for a, b in mesh_edges(mesh):
        if z[a] > MIN_DEPTH and z[b] > MIN_DEPTH:
            segments.append(((float(u[a]), float(v[a])), (float(u[b]), float(v[b]))))
    return segments
