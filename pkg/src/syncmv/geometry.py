"""Ring cameras, projection, frustum sampling, and epipolar checks.

Conventions: right-handed world with +z up, object centered at the origin
inside the unit cube [-0.5, 0.5]^3. Cameras look at the origin with world +z
as the up hint (degenerate only at elevation +-90 deg, outside the supported
range). Camera frame is x-right, y-down, z-forward; depth is the z component
in camera coordinates. Pixel (i, j) has its center at (u, v) = (j+0.5, i+0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# camera distance and frustum bounds around the unit cube (half-diagonal
# sqrt(3)/2 ~= 0.866, padded to 0.87)
RADIUS = 1.5
NEAR_MARGIN = 0.87
DEFAULT_FILL = 0.8  # projected extent of the cube's bounding sphere / image width


@dataclass(frozen=True)
class SphericalPose:
    azimuth: float  # radians
    elevation: float  # radians
    radius: float = RADIUS

    def __post_init__(self):
        if self.radius <= math.sqrt(3.0) / 2.0:
            raise ValueError(
                f"camera radius {self.radius} is inside the unit cube's bounding sphere"
            )

    def position(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)]
        )


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Rescale to a different pixel resolution of the same field of view."""
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


def default_intrinsics(width: int, height: int, fill: float = DEFAULT_FILL,
                       radius: float = RADIUS) -> Intrinsics:
    """Focal length such that the unit cube's bounding sphere spans `fill` of the image.

    From distance r the sphere of radius sqrt(3)/2 subtends a half-angle
    asin(sqrt(3)/(2r)); its silhouette radius on the image is f*tan of that.
    """
    half_angle = math.asin(math.sqrt(3.0) / (2.0 * radius))
    f = (fill / 2.0) * width / math.tan(half_angle)
    return Intrinsics(f, f, width / 2.0, height / 2.0, width, height)


class Camera:
    """Pinhole camera on a sphere around the origin, optical axis through it."""

    def __init__(self, pose: SphericalPose, intrinsics: Intrinsics, ring_index: int = -1):
        self.pose = pose
        self.intrinsics = intrinsics
        self.ring_index = ring_index
        eye = pose.position()
        z_cam = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 0.0, 1.0])
        x_cam = np.cross(z_cam, up)
        nx = np.linalg.norm(x_cam)
        if nx < 1e-9:
            raise ValueError("camera elevation of +-90 deg is unsupported (up vector degenerate)")
        x_cam /= nx
        y_cam = np.cross(z_cam, x_cam)
        self.rotation = np.stack([x_cam, y_cam, z_cam])  # world -> camera
        self.translation = -self.rotation @ eye
        self.center = eye

    @property
    def extrinsics(self) -> np.ndarray:
        """3x4 world-to-camera matrix."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Project (M, 3) world points: returns (uv (M, 2), depth (M,), behind (M,)).

        Behind-camera points are flagged, not an error; their uv is the
        projective image (signed-depth division), which keeps epipolar
        identities valid. Callers mask on the flag where it matters.
        """
        pts = np.atleast_2d(points)
        pc = self.world_to_cam(pts)
        depth = pc[:, 2]
        behind = depth <= 0.0
        z = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
        k = self.intrinsics
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        return np.stack([u, v], axis=1), depth, behind

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Invert project for (M, 2) pixel coords at (M,) depths."""
        k = self.intrinsics
        uv = np.atleast_2d(uv)
        d = np.asarray(depth, dtype=np.float64)
        pc = np.stack(
            [(uv[:, 0] - k.cx) / k.fx * d, (uv[:, 1] - k.cy) / k.fy * d, d], axis=1
        )
        return (pc - self.translation) @ self.rotation


@dataclass(frozen=True)
class ViewDelta:
    """Viewpoint difference fed to the denoiser as conditioning."""

    d_elevation: float
    sin_d_azimuth: float
    cos_d_azimuth: float

    def vector(self) -> np.ndarray:
        return np.array([self.d_elevation, self.sin_d_azimuth, self.cos_d_azimuth])


def viewpoint_difference(input_pose: SphericalPose, target_pose: SphericalPose) -> ViewDelta:
    da = target_pose.azimuth - input_pose.azimuth
    return ViewDelta(target_pose.elevation - input_pose.elevation, math.sin(da), math.cos(da))


class ViewRing:
    """The N fixed target cameras plus the canonical input camera (azimuth 0)."""

    def __init__(self, n_views: int, elevation: float, radius: float, intrinsics: Intrinsics):
        if n_views < 1:
            raise ValueError(f"a view ring needs at least 1 view, got {n_views}")
        self.n_views = n_views
        self.elevation = elevation
        self.radius = radius
        self.intrinsics = intrinsics
        self.target_cameras = [
            Camera(SphericalPose(n * 2.0 * math.pi / n_views, elevation, radius), intrinsics, n)
            for n in range(n_views)
        ]
        self.input_camera = self.input_camera_at(elevation)

    def input_camera_at(self, elevation: float) -> Camera:
        """Input views share azimuth 0 with the first target view."""
        return Camera(SphericalPose(0.0, elevation, self.radius), self.intrinsics)

    def deltas_from(self, input_pose: SphericalPose) -> list[ViewDelta]:
        return [viewpoint_difference(input_pose, cam.pose) for cam in self.target_cameras]


def make_view_ring(n_views: int, elevation: float, radius: float = RADIUS,
                   intrinsics: Intrinsics | None = None, image_size: int = 32) -> ViewRing:
    if n_views < 2:
        raise ValueError(f"a view ring needs at least 2 views, got {n_views}")
    if intrinsics is None:
        intrinsics = default_intrinsics(image_size, image_size, radius=radius)
    return ViewRing(n_views, elevation, radius, intrinsics)


def frustum_points(camera: Camera, height: int, width: int, depth_planes: int,
                   near: float | None = None, far: float | None = None) -> np.ndarray:
    """World points along each pixel ray, evenly spaced in depth.

    Returns (height*width*depth_planes, 3) flattened with depth fastest, then
    columns, then rows, so row-major reshape to (H, W, D) is direct.
    """
    if near is None:
        near = camera.pose.radius - NEAR_MARGIN
    if far is None:
        far = camera.pose.radius + NEAR_MARGIN
    if not (near < far):
        raise ValueError(f"invalid depth bounds near={near} far={far}")
    if depth_planes < 2:
        raise ValueError("need at least 2 depth planes")
    k = camera.intrinsics.scaled(width, height)
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    u = (jj + 0.5).reshape(-1)
    v = (ii + 0.5).reshape(-1)
    # direction with unit z in camera coords: the ray parameter is depth itself
    dirs_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=1)
    dirs_world = dirs_cam @ camera.rotation
    depths = np.linspace(near, far, depth_planes)
    pts = camera.center[None, None, :] + dirs_world[:, None, :] * depths[None, :, None]
    return pts.reshape(-1, 3)


def fundamental_matrix(cam_i: Camera, cam_j: Camera) -> np.ndarray:
    """Fundamental matrix with x_j^T F x_i = 0, scaled to unit Frobenius norm."""
    if np.linalg.norm(cam_i.center - cam_j.center) < 1e-12:
        raise ValueError("fundamental matrix undefined for identical camera centers")
    r_rel = cam_j.rotation @ cam_i.rotation.T
    t_rel = cam_j.translation - r_rel @ cam_i.translation
    tx = np.array(
        [
            [0.0, -t_rel[2], t_rel[1]],
            [t_rel[2], 0.0, -t_rel[0]],
            [-t_rel[1], t_rel[0], 0.0],
        ]
    )
    ki, kj = cam_i.intrinsics, cam_j.intrinsics
    k_i = np.array([[ki.fx, 0, ki.cx], [0, ki.fy, ki.cy], [0, 0, 1.0]])
    k_j = np.array([[kj.fx, 0, kj.cx], [0, kj.fy, kj.cy], [0, 0, 1.0]])
    f = np.linalg.inv(k_j).T @ (tx @ r_rel) @ np.linalg.inv(k_i)
    return f / np.linalg.norm(f)


def epipolar_residual(f: np.ndarray, uv_i: np.ndarray, uv_j: np.ndarray) -> np.ndarray:
    """|x_j^T F x_i| for matched pixel coordinates (M, 2) in each view."""
    xi = np.concatenate([uv_i, np.ones((len(uv_i), 1))], axis=1)
    xj = np.concatenate([uv_j, np.ones((len(uv_j), 1))], axis=1)
    return np.abs(np.einsum("mi,ij,mj->m", xj, f, xi))


def cube_vertices(v: int) -> np.ndarray:
    """Regular (v^3, 3) grid spanning [-0.5, 0.5]^3 inclusive, x fastest last axis order."""
    if v < 2:
        raise ValueError("volume needs at least 2 vertices per axis")
    axis = np.linspace(-0.5, 0.5, v)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def world_to_volume_coords(points: np.ndarray, v: int) -> np.ndarray:
    """Continuous index coords into the (v, v, v) vertex grid for grid_sample."""
    return (np.asarray(points) + 0.5) * (v - 1)
