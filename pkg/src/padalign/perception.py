"""Pad detection and image-space measurement.

The fisheye detector scores the analytic pad box by its pixel extent measured
at a reference image width, ramping quality from min_extent_px (barely
resolvable) to good_extent_px (comfortably resolvable). A per-appearance
learned gain, produced by the online trainer, lowers both knees and nudges the
base quality, which is what extends the usable range after self-training.

The top-view path rasterizes the ground plane around one camera's foot at a
fixed metric scale, so pad extent is distance-invariant there and range is set
by canvas coverage instead of pixel falloff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import FisheyeCamera, GeomError, Pose2, compose2, inverse2, rot2, unproject_to_ground
from .world import World


@dataclass(frozen=True)
class DetectorModel:
    min_extent_px: float = 12.0
    good_extent_px: float = 16.0
    base_quality: float = 0.9
    quality_threshold: float = 0.25
    ref_width: int = 1600
    learned: tuple[tuple[str, float], ...] = ()

    def gain_for(self, appearance_id: str | None) -> float:
        for aid, gain in self.learned:
            if aid == appearance_id:
                return gain
        return 0.0


@dataclass(frozen=True)
class Detection:
    camera_id: str
    box: tuple[float, float, float, float]
    quality: float
    object_id: str = "pad"

    @property
    def extent(self) -> float:
        return min(self.box[2] - self.box[0], self.box[3] - self.box[1])


def iou(box_a, box_b) -> float:
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    ix0 = max(ax0, bx0)
    iy0 = max(ay0, by0)
    ix1 = min(ax1, bx1)
    iy1 = min(ay1, by1)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def quality_for_extent(model: DetectorModel, extent_ref_px: float, appearance_id: str | None = None) -> float:
    gain = model.gain_for(appearance_id)
    min_eff = model.min_extent_px - 2.0 * gain
    good_eff = model.good_extent_px - 2.0 * gain
    base_eff = min(0.98, model.base_quality + 0.08 * gain)
    span = max(good_eff - min_eff, 1e-9)
    ramp = min(1.0, max(0.0, (extent_ref_px - min_eff) / span))
    return base_eff * ramp


def detect(
    model: DetectorModel,
    frame,
    rng: np.random.Generator | None = None,
    box_noise_px: float = 0.0,
) -> list[Detection]:
    """Score the frame's pad box; emit a detection when quality clears threshold.

    Extent is measured at the reference image width so a downscaled render
    sees the same quality curve as the full-resolution rig. box_noise_px is
    also expressed at reference scale and converted to this frame's pixels.
    """
    out: list[Detection] = []
    scale = model.ref_width / float(frame.resolution[0])
    for gt in frame.gt_boxes:
        extent = min(gt.width, gt.height) * scale
        q = quality_for_extent(model, extent, frame.pad_appearance_id)
        if q < model.quality_threshold:
            continue
        box = gt.box
        if box_noise_px > 0.0 and rng is not None:
            jit = rng.normal(0.0, box_noise_px / scale, size=4)
            x0, y0, x1, y1 = (box[0] + jit[0], box[1] + jit[1], box[2] + jit[2], box[3] + jit[3])
            w, h = frame.resolution
            x0, x1 = sorted((min(max(x0, 0.0), w), min(max(x1, 0.0), w)))
            y0, y1 = sorted((min(max(y0, 0.0), h), min(max(y1, 0.0), h)))
            box = (x0, y0, x1, y1)
        out.append(Detection(camera_id=frame.camera_id, box=box, quality=q))
    return out


def ground_point_from_box(cam: FisheyeCamera, box) -> np.ndarray | None:
    """Vehicle-frame ground point under the box's bottom-center pixel."""
    u = 0.5 * (box[0] + box[2])
    v = box[3]
    try:
        return unproject_to_ground(cam, (u, v))
    except GeomError:
        return None


def pad_center_estimate(cam: FisheyeCamera, box, pad_length: float) -> np.ndarray | None:
    """Estimated pad center (vehicle frame, xy).

    The footpoint sits on the pad's near edge, so push half a pad length
    farther out along the camera-to-footpoint bearing.
    """
    foot = ground_point_from_box(cam, box)
    if foot is None:
        return None
    cam_xy = cam.extrinsic.t[:2]
    d = foot[:2] - cam_xy
    dist = float(np.hypot(d[0], d[1]))
    if dist < 1e-6:
        return None
    return foot[:2] + d / dist * (pad_length / 2.0)


@dataclass(frozen=True)
class TopViewConfig:
    span_m: float = 14.0
    px_per_m: float = 100.0
    min_extent_px: float = 12.0
    quality: float = 0.9

    @property
    def half_span(self) -> float:
        return self.span_m / 2.0


def detect_topview(cfg: TopViewConfig, world: World, vehicle_pose: Pose2, cam: FisheyeCamera) -> Detection | None:
    """Detect the pad on a metric ground raster anchored at the camera foot.

    The canvas spans span_m x span_m centered on the camera's ground
    projection, axes following the camera mount yaw. Detection requires the
    pad footprint to intersect the canvas and its fixed metric extent to
    resolve at px_per_m.
    """
    mount_yaw = math.atan2(cam.extrinsic.matrix()[1, 2], cam.extrinsic.matrix()[0, 2])
    cam_vehicle = Pose2(cam.extrinsic.t[0], cam.extrinsic.t[1], mount_yaw)
    cam_world = compose2(vehicle_pose, cam_vehicle)
    pad_local = compose2(inverse2(cam_world), world.pad.pose)

    extent_px = min(world.pad.length, world.pad.width) * cfg.px_per_m
    if extent_px < cfg.min_extent_px:
        return None

    corners = np.array(
        [
            [world.pad.length / 2, world.pad.width / 2],
            [world.pad.length / 2, -world.pad.width / 2],
            [-world.pad.length / 2, -world.pad.width / 2],
            [-world.pad.length / 2, world.pad.width / 2],
        ]
    )
    pts = corners @ rot2(pad_local.heading).T + np.array([pad_local.x, pad_local.y])
    hs = cfg.half_span
    x0 = max(float(pts[:, 0].min()), -hs)
    y0 = max(float(pts[:, 1].min()), -hs)
    x1 = min(float(pts[:, 0].max()), hs)
    y1 = min(float(pts[:, 1].max()), hs)
    if x1 <= x0 or y1 <= y0:
        return None
    to_px = lambda x, y: ((x + hs) * cfg.px_per_m, (y + hs) * cfg.px_per_m)
    px0, py0 = to_px(x0, y0)
    px1, py1 = to_px(x1, y1)
    return Detection(camera_id=cam.cam_id + "_topview", box=(px0, py0, px1, py1), quality=cfg.quality)
