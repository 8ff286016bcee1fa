"""Rigid transforms and the equidistant fisheye camera model.

Frame conventions used throughout the package:

  * world / vehicle frames: x forward, y left, z up. The vehicle origin sits
    at the rear-axle center on the ground plane z = 0.
  * camera frame: z along the optical axis, x toward image right, y toward
    image down.
  * Pose2 / Pose3 map child coordinates into the parent frame:
    p_parent = R * p_child + t. compose2(a, b) applies b inside a's frame.

The fisheye model is the equidistant projection r = focal * theta, where
theta is the angle between a ray and the optical axis and r is the radial
pixel distance from the principal point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeomError(ValueError):
    """Raised for degenerate projections and impossible unprojections."""


TAU = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to the interval (-pi, pi]."""
    w = (a + math.pi) % TAU - math.pi
    return math.pi if w == -math.pi else w


# ---------------------------------------------------------------------------
# planar poses


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


def compose2(a: Pose2, b: Pose2) -> Pose2:
    """Pose of b expressed through a: first place a, then b inside a's frame."""
    c, s = math.cos(a.heading), math.sin(a.heading)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.heading + b.heading,
    )


def inverse2(p: Pose2) -> Pose2:
    c, s = math.cos(p.heading), math.sin(p.heading)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.heading)


def transform2(pose: Pose2, points) -> np.ndarray:
    """Map points (..., 2) from the pose's child frame into its parent frame."""
    pts = np.asarray(points, dtype=float)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    out = np.empty_like(pts)
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + pose.x
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + pose.y
    return out


def rot2(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------------------
# quaternions and spatial poses


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(np.dot(q, q)))
    if n < 1e-12:
        raise GeomError("cannot normalize zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    ax = np.asarray(axis, dtype=float)
    ax = ax / math.sqrt(float(np.dot(ax, ax)))
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * ax])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose3:
    """Rigid transform child -> parent, rotation stored as a unit quaternion."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).copy())

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)


def compose3(a: Pose3, b: Pose3) -> Pose3:
    return Pose3(quat_mul(a.q, b.q), a.t + quat_to_matrix(a.q) @ b.t)


def inverse3(p: Pose3) -> Pose3:
    qi = quat_conj(p.q)
    return Pose3(qi, -(quat_to_matrix(qi) @ p.t))


def transform3(pose: Pose3, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts @ pose.matrix().T + pose.t


def pose2_to_pose3(p: Pose2, z: float = 0.0) -> Pose3:
    return Pose3(quat_from_axis_angle([0, 0, 1], p.heading), np.array([p.x, p.y, z]))


# Base camera orientation: optical axis along parent +x, image right along
# parent -y, image down along parent -z.
_R_CAM_BASE = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def camera_extrinsic(x: float, y: float, z: float, yaw: float, pitch: float) -> Pose3:
    """Pose of a camera in the vehicle frame.

    yaw rotates the view direction in the ground plane; negative pitch tilts
    the optical axis below the horizon (pitch=-25deg looks down 25 degrees).
    """
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    qy = quat_from_axis_angle([0, 1, 0], -pitch)
    # rotation matrix -> quaternion for the base frame swap
    qb = _quat_from_matrix(_R_CAM_BASE)
    return Pose3(quat_mul(qz, quat_mul(qy, qb)), np.array([x, y, z]))


def _quat_from_matrix(m: np.ndarray) -> np.ndarray:
    w = math.sqrt(max(0.0, 1.0 + m[0, 0] + m[1, 1] + m[2, 2])) / 2.0
    if w > 1e-6:
        return quat_normalize(
            np.array(
                [
                    w,
                    (m[2, 1] - m[1, 2]) / (4 * w),
                    (m[0, 2] - m[2, 0]) / (4 * w),
                    (m[1, 0] - m[0, 1]) / (4 * w),
                ]
            )
        )
    # fall back for 180-degree rotations
    d = np.diag(m)
    k = int(np.argmax(d))
    i, j = (k + 1) % 3, (k + 2) % 3
    s = math.sqrt(max(1e-12, 1.0 + d[k] - d[i] - d[j])) * 2.0
    q = np.zeros(4)
    q[1 + k] = s / 4.0
    q[0] = (m[j, i] - m[i, j]) / s
    q[1 + i] = (m[i, k] + m[k, i]) / s
    q[1 + j] = (m[j, k] + m[k, j]) / s
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# fisheye camera


def focal_for_fov(fov: float, width_px: int) -> float:
    """Equidistant focal (px/rad) that maps fov/2 onto the half image width."""
    return (width_px / 2.0) / (fov / 2.0)


@dataclass(frozen=True)
class FisheyeCamera:
    """Equidistant fisheye camera rigidly mounted on a vehicle.

    Arguments:
        cam_id: rig position name ("front", "rear", "left", "right").
        resolution: (width, height) in pixels.
        fov: full field of view in radians (190 deg rigs use ~3.32).
        focal: pixels per radian of off-axis angle.
        pp: principal point (u, v).
        extrinsic: camera pose in the vehicle frame.
    """

    cam_id: str
    resolution: tuple[int, int]
    fov: float
    focal: float
    pp: tuple[float, float]
    extrinsic: Pose3

    def scaled(self, factor: float) -> "FisheyeCamera":
        """Same camera resampled to factor * resolution (same fov)."""
        w, h = self.resolution
        return FisheyeCamera(
            cam_id=self.cam_id,
            resolution=(max(1, round(w * factor)), max(1, round(h * factor))),
            fov=self.fov,
            focal=self.focal * factor,
            pp=(self.pp[0] * factor, self.pp[1] * factor),
            extrinsic=self.extrinsic,
        )


def make_camera(cam_id: str, resolution, fov: float, mount: Pose3, focal: float | None = None) -> FisheyeCamera:
    w, h = resolution
    return FisheyeCamera(
        cam_id=cam_id,
        resolution=(int(w), int(h)),
        fov=float(fov),
        focal=float(focal) if focal is not None else focal_for_fov(fov, int(w)),
        pp=(w / 2.0, h / 2.0),
        extrinsic=mount,
    )


def project_cam(cam: FisheyeCamera, pts_cam) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (N, 3) to pixels.

    Returns:
        (uv (N, 2), valid (N,)): valid is False for points at the origin or
        outside the field of view.
    """
    p = np.atleast_2d(np.asarray(pts_cam, dtype=float))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    rho = np.hypot(x, y)
    norm = np.sqrt(rho * rho + z * z)
    theta = np.arctan2(rho, z)
    valid = (norm > 1e-9) & (theta <= cam.fov / 2.0 + 1e-12)
    # theta/rho -> 1/z as rho -> 0 (point on the optical axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(rho > 1e-12, cam.focal * theta / np.where(rho > 1e-12, rho, 1.0), cam.focal / np.where(np.abs(z) > 1e-12, z, 1.0))
    u = cam.pp[0] + g * x
    v = cam.pp[1] + g * y
    uv = np.stack([u, v], axis=-1)
    return uv, valid


def project(cam: FisheyeCamera, point_vehicle) -> np.ndarray:
    """Project a single vehicle-frame point; raises GeomError when degenerate."""
    p_cam = transform3(inverse3(cam.extrinsic), np.asarray(point_vehicle, dtype=float))
    uv, valid = project_cam(cam, p_cam[None, :])
    if not valid[0]:
        if float(np.linalg.norm(p_cam)) <= 1e-9:
            raise GeomError("point at camera origin has no projection")
        raise GeomError("point outside field of view")
    return uv[0]


def pixel_rays(cam: FisheyeCamera, pixels) -> np.ndarray:
    """Unit ray directions in the camera frame for pixels (N, 2)."""
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    d = px - np.asarray(cam.pp)
    r = np.hypot(d[:, 0], d[:, 1])
    theta = r / cam.focal
    st = np.sin(theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r > 1e-12, st / np.where(r > 1e-12, r, 1.0), 0.0)
    out = np.stack([d[:, 0] * scale, d[:, 1] * scale, np.cos(theta)], axis=-1)
    return out


def unproject_to_ground(cam: FisheyeCamera, pixel) -> np.ndarray:
    """Intersect a pixel ray with the ground plane z=0 of the vehicle frame.

    Returns the ground point (x, y). Raises GeomError when the ray points at
    or above the horizon.
    """
    d_cam = pixel_rays(cam, np.asarray(pixel, dtype=float)[None, :])[0]
    R = cam.extrinsic.matrix()
    d = R @ d_cam
    o = cam.extrinsic.t
    if d[2] >= -1e-12:
        raise GeomError("pixel ray does not intersect the ground")
    t = -o[2] / d[2]
    hit = o + t * d
    return hit[:2]


# ---------------------------------------------------------------------------
# pad silhouette extent


def box_surface_points(length: float, width: float, height: float, samples_per_edge: int = 7) -> np.ndarray:
    """Sample points along the 12 edges of the box [-L/2,L/2]x[-W/2,W/2]x[0,H].

    Dense edge sampling keeps fisheye silhouette bounds honest: straight 3D
    edges project to curves, so corners alone can under-estimate the extent.
    """
    hl, hw = length / 2.0, width / 2.0
    ts = np.linspace(0.0, 1.0, samples_per_edge)
    pts = []
    xs = (-hl, hl)
    ys = (-hw, hw)
    zs = (0.0, height)
    for z in zs:
        for y in ys:
            pts.append(np.stack([-hl + ts * length, np.full_like(ts, y), np.full_like(ts, z)], axis=-1))
        for x in xs:
            pts.append(np.stack([np.full_like(ts, x), -hw + ts * width, np.full_like(ts, z)], axis=-1))
    for x in xs:
        for y in ys:
            pts.append(np.stack([np.full_like(ts, x), np.full_like(ts, y), ts * height], axis=-1))
    return np.concatenate(pts, axis=0)


def project_box(cam: FisheyeCamera, pose_vehicle: Pose2, dims: tuple[float, float, float], samples_per_edge: int = 7):
    """Project a ground-standing box into the camera.

    Arguments:
        pose_vehicle: box pose in the vehicle frame (center of footprint).
        dims: (length, width, height).

    Returns:
        (uv (N, 2), valid (N,)) silhouette samples in pixels.
    """
    local = box_surface_points(*dims, samples_per_edge=samples_per_edge)
    world = np.empty_like(local)
    world[:, :2] = transform2(pose_vehicle, local[:, :2])
    world[:, 2] = local[:, 2]
    p_cam = transform3(inverse3(cam.extrinsic), world)
    return project_cam(cam, p_cam)


def pad_pixel_extent(cam: FisheyeCamera, pad, distance: float) -> tuple[float, float]:
    """Projected silhouette extent of a pad placed `distance` meters ahead.

    The pad sits on the ground along the camera's forward azimuth with its
    length axis pointing away from the camera, its near edge at horizontal
    distance `distance` (the quantity a tape measure from the bumper reports).
    `pad` only needs length/width/height attributes. Returns
    (width_px, height_px) of the unclipped silhouette bounding box.
    """
    if distance <= 0:
        raise GeomError("distance must be positive")
    axis = cam.extrinsic.matrix() @ np.array([0.0, 0.0, 1.0])
    az = math.atan2(axis[1], axis[0])
    foot = cam.extrinsic.t[:2]
    d_center = distance + pad.length / 2.0
    center = Pose2(foot[0] + d_center * math.cos(az), foot[1] + d_center * math.sin(az), az)
    uv, valid = project_box(cam, center, (pad.length, pad.width, pad.height))
    if not np.any(valid):
        raise GeomError("pad outside field of view")
    uv = uv[valid]
    return (
        float(uv[:, 0].max() - uv[:, 0].min()),
        float(uv[:, 1].max() - uv[:, 1].min()),
    )
