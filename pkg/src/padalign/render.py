"""Synthetic surround-view rendering.

Each frame ray-casts the world through one fisheye camera and produces a
segmentation raster, a depth raster (ray length in meters, inf for sky), an
appearance raster, and the analytic ground-truth pad box. Boxes are computed
from the projected pad silhouette (sub-pixel, clipped to the image), so they
stay smooth where rasters quantize; occlusion affects rasters only.

For closed-loop studies that never look at pixels, `rasters=False` skips the
ray casting and fills only the analytic fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import FisheyeCamera, Pose2, Pose3, compose2, compose3, inverse2, pose2_to_pose3, project_box, rot2
from .vehicle import VehicleGeometry
from .world import SEG_GROUND, SEG_OBSTACLE, SEG_PAD, SEG_SKY, World, ground_color, pad_texture_at


@dataclass(frozen=True)
class SensorNoise:
    seg_flip_rate: float = 0.0
    depth_sigma_rel: float = 0.0
    dropout_rate: float = 0.0


@dataclass(frozen=True)
class GtBox:
    box: tuple[float, float, float, float]  # (x0, y0, x1, y1) in pixels
    object_id: str = "pad"

    @property
    def width(self) -> float:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> float:
        return self.box[3] - self.box[1]


@dataclass
class Frame:
    t: float
    camera_id: str
    resolution: tuple[int, int]
    seg: np.ndarray | None
    depth: np.ndarray | None
    appearance: np.ndarray | None
    gt_boxes: list[GtBox] = field(default_factory=list)
    pad_appearance_id: str | None = None


_RAY_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _camera_rays(cam: FisheyeCamera) -> tuple[np.ndarray, np.ndarray]:
    """Unit rays through all pixel centers (camera frame) and the in-fov mask."""
    key = (cam.resolution, cam.focal, cam.pp, cam.fov)
    hit = _RAY_CACHE.get(key)
    if hit is not None:
        return hit
    w, h = cam.resolution
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    du = us - cam.pp[0]
    dv = vs - cam.pp[1]
    r = np.hypot(du, dv)
    theta = r / cam.focal
    in_fov = theta <= cam.fov / 2.0
    st = np.sin(theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r > 1e-12, st / np.where(r > 1e-12, r, 1.0), 0.0)
    dirs = np.stack([du * scale, dv * scale, np.cos(theta)], axis=-1)
    out = (dirs.reshape(-1, 3), in_fov.reshape(-1))
    _RAY_CACHE[key] = out
    return out


def _ray_box_vec(o: np.ndarray, dirs: np.ndarray, pose: Pose2, size) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized slab test against a ground-standing oriented box.

    Returns (t_hit with inf for misses, top_face mask).
    """
    l, w, h = size
    R = rot2(-pose.heading)
    o_loc = np.array([*(R @ (o[:2] - np.array([pose.x, pose.y]))), o[2]])
    d_loc = np.empty_like(dirs)
    d_loc[:, :2] = dirs[:, :2] @ R.T
    d_loc[:, 2] = dirs[:, 2]
    lo = np.array([-l / 2.0, -w / 2.0, 0.0])
    hi = np.array([l / 2.0, w / 2.0, h])
    d_safe = np.where(np.abs(d_loc) < 1e-12, np.where(d_loc < 0, -1e-12, 1e-12), d_loc)
    t1 = (lo - o_loc) / d_safe
    t2 = (hi - o_loc) / d_safe
    t_min = np.minimum(t1, t2)
    t_max = np.maximum(t1, t2)
    axis_near = np.argmax(t_min, axis=1)
    t_near = t_min[np.arange(len(dirs)), axis_near]
    t_far = t_max.min(axis=1)
    ok = (t_near <= t_far) & (t_far > 1e-9) & (t_near > 1e-9)
    t_hit = np.where(ok, t_near, np.inf)
    top = ok & (axis_near == 2) & (d_loc[:, 2] < 0)
    return t_hit, top


def camera_world_pose(vehicle_pose: Pose2, cam: FisheyeCamera) -> Pose3:
    """Camera pose in the world frame."""
    return compose3(pose2_to_pose3(vehicle_pose), cam.extrinsic)


def project_pad_box(
    cam: FisheyeCamera, pad_vehicle: Pose2, dims: tuple[float, float, float]
) -> tuple[float, float, float, float] | None:
    """Image box of a pad at a hypothesized vehicle-frame pose.

    Returns None when the pad is outside the field of view or projects
    smaller than half a pixel.
    """
    uv, valid = project_box(cam, pad_vehicle, dims, samples_per_edge=9)
    if not np.any(valid):
        return None
    uv = uv[valid]
    w, h = cam.resolution
    x0 = max(0.0, float(uv[:, 0].min()))
    y0 = max(0.0, float(uv[:, 1].min()))
    x1 = min(float(w), float(uv[:, 0].max()))
    y1 = min(float(h), float(uv[:, 1].max()))
    if x1 - x0 < 0.5 or y1 - y0 < 0.5:
        return None
    return (x0, y0, x1, y1)


def _analytic_pad_box(world: World, vehicle_pose: Pose2, cam: FisheyeCamera) -> GtBox | None:
    pad_vehicle = compose2(inverse2(vehicle_pose), world.pad.pose)
    box = project_pad_box(cam, pad_vehicle, world.pad.dims)
    return None if box is None else GtBox(box=box)


def render_frame(
    world: World,
    vehicle_pose: Pose2,
    cam: FisheyeCamera,
    noise: SensorNoise | None = None,
    rng: np.random.Generator | None = None,
    t: float = 0.0,
    rasters: bool = True,
) -> Frame:
    gt = _analytic_pad_box(world, vehicle_pose, cam)
    frame = Frame(
        t=t,
        camera_id=cam.cam_id,
        resolution=cam.resolution,
        seg=None,
        depth=None,
        appearance=None,
        gt_boxes=[gt] if gt is not None else [],
        pad_appearance_id=world.pad.appearance_id,
    )
    if not rasters:
        return frame

    w, h = cam.resolution
    dirs_cam, in_fov = _camera_rays(cam)
    cam_world = camera_world_pose(vehicle_pose, cam)
    R = cam_world.matrix()
    o = cam_world.t
    dirs = dirs_cam @ R.T

    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    seg = np.full(n, SEG_SKY, dtype=np.uint8)
    part_top = np.zeros(n, dtype=bool)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz < -1e-12, -o[2] / np.where(dz < -1e-12, dz, -1.0), np.inf)
    better = t_ground < t_best
    t_best = np.where(better, t_ground, t_best)
    seg[better] = SEG_GROUND

    t_pad, top = _ray_box_vec(o, dirs, world.pad.pose, world.pad.dims)
    better = t_pad < t_best
    t_best = np.where(better, t_pad, t_best)
    seg[better] = SEG_PAD
    part_top = np.where(better, top, False)

    for obs in world.obstacles:
        t_obs, _ = _ray_box_vec(o, dirs, obs.pose, obs.size)
        better = t_obs < t_best
        t_best = np.where(better, t_obs, t_best)
        seg[better] = SEG_PAD if obs.pad_like else SEG_OBSTACLE
        part_top = np.where(better, False, part_top)

    seg[~in_fov] = SEG_SKY
    t_best = np.where(in_fov & (seg != SEG_SKY), t_best, np.inf)

    hits = o[None, :] + dirs * np.where(np.isfinite(t_best), t_best, 0.0)[:, None]
    colors = np.empty((n, 3))
    colors[:] = (0.05, 0.06, 0.08)
    m = seg == SEG_GROUND
    if np.any(m):
        colors[m] = ground_color(world.surface, hits[m, 0], hits[m, 1])
    m = seg == SEG_PAD
    if np.any(m):
        top_m = m & part_top
        side_m = m & ~part_top
        if np.any(top_m):
            R2 = rot2(-world.pad.pose.heading)
            local = (hits[top_m, :2] - np.array([world.pad.pose.x, world.pad.pose.y])) @ R2.T
            u = local[:, 0] / world.pad.length + 0.5
            v = local[:, 1] / world.pad.width + 0.5
            colors[top_m] = pad_texture_at(world.pad.appearance_kind, world.pad.appearance_id, u, v)
        colors[side_m] = (0.15, 0.15, 0.15)
    m = seg == SEG_OBSTACLE
    if np.any(m):
        colors[m] = (0.28, 0.26, 0.24)

    seg = seg.reshape(h, w)
    depth = t_best.reshape(h, w).astype(np.float32)
    appearance = colors.reshape(h, w, 3).astype(np.float32)

    if noise is not None and rng is not None:
        if noise.seg_flip_rate > 0:
            flips = rng.random(seg.shape) < noise.seg_flip_rate
            offs = rng.integers(1, 4, size=seg.shape).astype(np.uint8)
            seg = np.where(flips, (seg + offs) % 4, seg).astype(np.uint8)
        if noise.depth_sigma_rel > 0:
            fin = np.isfinite(depth)
            depth = depth.copy()
            depth[fin] = depth[fin] * (1.0 + rng.normal(0.0, noise.depth_sigma_rel, size=int(fin.sum())).astype(np.float32))
        if noise.dropout_rate > 0 and rng.random() < noise.dropout_rate:
            if rng.random() < 0.5:
                seg = None
            else:
                depth = None

    frame.seg = seg
    frame.depth = depth
    frame.appearance = appearance
    return frame


def pad_visible(world: World, vehicle_pose: Pose2, cameras, geometry: VehicleGeometry) -> dict[str, tuple[bool, str | None]]:
    """Per-camera pad visibility with a reason when hidden.

    under_body: pad center lies within the vehicle footprint (no camera can
    see it); outside_fov: the pad silhouette misses that camera's image.
    """
    pad_vehicle = compose2(inverse2(vehicle_pose), world.pad.pose)
    out: dict[str, tuple[bool, str | None]] = {}
    if geometry.footprint_contains((pad_vehicle.x, pad_vehicle.y)):
        for cam in cameras:
            out[cam.cam_id] = (False, "under_body")
        return out
    for cam in cameras:
        uv, valid = project_box(cam, pad_vehicle, world.pad.dims, samples_per_edge=5)
        w, h = cam.resolution
        inside = valid & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
        out[cam.cam_id] = (True, None) if bool(np.any(inside)) else (False, "outside_fov")
    return out
