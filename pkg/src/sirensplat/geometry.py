"""Cameras, rays, and flat Gaussian surfel geometry.

Conventions, fixed across the whole package:

* Cameras follow the OpenGL/NeRF convention: camera x points right, y up,
  and the camera looks down its local -z axis. The stored rotation is the
  camera-to-world rotation as a unit quaternion (w, x, y, z).
* A splat is a flat ellipse: center mu, tangent axes s_u and s_v obtained by
  rotating (1,0,0) and (0,1,0) by the splat quaternion and scaling them.
  Local coordinates (u, v) measure position on the splat in units of its
  standard deviations.
* The kernel is exp(-(u^2+v^2)/2), truncated at KERNEL_CUTOFF sigma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScaleError, NoIntersectionError, ShapeMismatchError

Vec3 = np.ndarray  # shape (3,), float64
Quat = np.ndarray  # shape (4,), float64, (w, x, y, z)

KERNEL_CUTOFF = 3.0     # sigma beyond which the kernel is exactly zero
NEAR_CLIP = 0.01        # intersections closer than this along the ray are discarded
PARALLEL_EPS = 1e-9     # |dir . normal| below this counts as parallel
MIN_SCALE = 1e-12       # axis lengths at or below this are degenerate


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateScaleError("cannot normalize a zero vector")
    return v / n


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors. Same arithmetic as np.cross but
    without its axis machinery; this sits on the per-primitive hot path."""
    a0, a1, a2 = float(a[0]), float(a[1]), float(a[2])
    b0, b1, b2 = float(b[0]), float(b[1]), float(b[2])
    return np.array([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])


def normalize_quaternion(q: Quat) -> Quat:
    return normalize(np.asarray(q, dtype=np.float64))


def quaternion_to_matrix(q: Quat) -> np.ndarray:
    """Rotation matrix of a quaternion. The input is normalized first."""
    w, x, y, z = normalize_quaternion(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(m: np.ndarray) -> Quat:
    """Unit quaternion (w, x, y, z) of a rotation matrix. Branches on the
    largest diagonal term for numerical safety."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ShapeMismatchError(f"expected a 3x3 matrix, got {m.shape}")
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    q = normalize_quaternion(q)
    if q[0] < 0.0:
        q = -q
    return q


@dataclass
class Camera:
    """Pinhole camera. Pixel (px, py) has its center at px + 0.5, py + 0.5
    in continuous image coordinates; callers pass continuous coordinates."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    position: Vec3
    rotation: Quat  # camera-to-world, (w, x, y, z)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = normalize_quaternion(self.rotation)
        if self.position.shape != (3,):
            raise ShapeMismatchError(f"camera position must be (3,), got {self.position.shape}")
        if self.width <= 0 or self.height <= 0:
            raise ShapeMismatchError("camera resolution must be positive")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ShapeMismatchError("focal lengths must be positive")

    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation)

    def forward(self) -> Vec3:
        """World-space viewing direction (-z column of the rotation)."""
        return -self.rotation_matrix()[:, 2]

    def camera_to_world(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.position
        return m


@dataclass
class Ray:
    origin: Vec3
    dir: Vec3  # unit length


def make_ray(camera: Camera, px: float, py: float) -> Ray:
    """World-space ray through continuous pixel coordinates (px, py)."""
    d_cam = np.array(
        [(px - camera.cx) / camera.fx, -(py - camera.cy) / camera.fy, -1.0]
    )
    d_world = camera.rotation_matrix() @ d_cam
    return Ray(origin=camera.position.copy(), dir=normalize(d_world))


def ray_grid(camera: Camera) -> np.ndarray:
    """(H, W, 3) array of unit ray directions through every pixel center."""
    px = np.arange(camera.width, dtype=np.float64) + 0.5
    py = np.arange(camera.height, dtype=np.float64) + 0.5
    xs = (px[None, :] - camera.cx) / camera.fx
    ys = -(py[:, None] - camera.cy) / camera.fy
    d = np.empty((camera.height, camera.width, 3))
    d[..., 0] = xs
    d[..., 1] = ys
    d[..., 2] = -1.0
    d = d @ camera.rotation_matrix().T
    norms = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2)
    return d / norms[..., None]


def project_point(camera: Camera, point: Vec3) -> tuple[float, float, float]:
    """Project a world point; returns (px, py, depth). Depth is distance
    along the camera forward axis and is negative behind the camera."""
    p_cam = camera.rotation_matrix().T @ (np.asarray(point, dtype=np.float64) - camera.position)
    depth = -p_cam[2]
    if depth <= 0.0:
        return np.nan, np.nan, depth
    px = camera.cx + camera.fx * p_cam[0] / depth
    py = camera.cy - camera.fy * p_cam[1] / depth
    return px, py, depth


@dataclass
class SplatFrame:
    """World-space frame of one splat: center plus scaled tangent axes."""

    mu: Vec3
    s_u: Vec3
    s_v: Vec3
    normal: Vec3  # unit normal, s_u x s_v normalized


def splat_frame(mu: Vec3, rot: Quat, scale: np.ndarray) -> SplatFrame:
    """Build the tangent frame from center, orientation and axis lengths.

    `scale` holds the two linear axis lengths (already exponentiated if the
    caller stores them in log space).
    """
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (2,):
        raise ShapeMismatchError(f"scale must be (2,), got {scale.shape}")
    if np.any(scale <= MIN_SCALE):
        raise DegenerateScaleError(f"splat axis length underflow: {scale}")
    r = quaternion_to_matrix(rot)
    s_u = scale[0] * r[:, 0]
    s_v = scale[1] * r[:, 1]
    return SplatFrame(
        mu=np.asarray(mu, dtype=np.float64),
        s_u=s_u,
        s_v=s_v,
        normal=r[:, 2].copy(),
    )


def intersect(ray: Ray, frame: SplatFrame) -> tuple[float, float, float]:
    """Ray/splat-plane intersection in splat units.

    Solves  o + t d = mu + u s_u + v s_v  by Cramer's rule and returns
    (u, v, t). Raises NoIntersectionError when the ray is parallel to the
    splat plane or the hit lies at or behind the near clip.
    """
    e = ray.origin - frame.mu
    c = np.cross(frame.s_u, frame.s_v)
    dn = float(np.dot(ray.dir, c))
    # Parallel test on the unit normal so it does not depend on splat area.
    if abs(np.dot(ray.dir, frame.normal)) < PARALLEL_EPS:
        raise NoIntersectionError("ray parallel to splat plane")
    t = -float(np.dot(c, e)) / dn
    if t <= NEAR_CLIP:
        raise NoIntersectionError(f"intersection at t={t} behind near clip")
    u = float(np.dot(ray.dir, np.cross(e, frame.s_v))) / dn
    v = float(np.dot(ray.dir, np.cross(frame.s_u, e))) / dn
    return u, v, t


def gaussian_weight(u: float, v: float) -> float:
    """Unnormalized Gaussian kernel value at splat coordinates (u, v),
    truncated to exactly zero beyond KERNEL_CUTOFF sigma."""
    r2 = u * u + v * v
    if r2 > KERNEL_CUTOFF * KERNEL_CUTOFF:
        return 0.0
    return float(np.exp(-0.5 * r2))


def depth_key(mu: np.ndarray, camera: Camera) -> np.ndarray:
    """Sort key for front-to-back ordering: distance of each center along
    the camera forward axis. mu is (N, 3)."""
    f = camera.forward()
    return (np.asarray(mu, dtype=np.float64) - camera.position) @ f
