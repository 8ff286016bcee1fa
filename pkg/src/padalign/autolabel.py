"""Self-supervised auto-annotation of recorded parking maneuvers.

At park completion the pad is assumed to sit exactly under the coil, so its
pose in the final vehicle frame is known up to the driver's manual alignment
error. Backtracking composes inverted odometry deltas to express that pose in
every earlier frame and projects it to raw annotation boxes. Segmentation
snapping, a depth height gate, a robust static-pad fit, and SLAM-optimized
poses then progressively clean the labels; the stage labels here mirror that
refinement order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geom import FisheyeCamera, Pose2, compose2, inverse2, pixel_rays
from .perception import iou, pad_center_estimate
from .render import Frame, project_pad_box
from .vehicle import OdometrySample, chain_poses
from .vslam import SlamConfig, SlamError, TaughtMap, teach
from .world import SEG_GROUND, SEG_PAD, SEG_SKY


class AutolabelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# recording


@dataclass(frozen=True)
class ManualAlignmentModel:
    """How far off a human driver parks; sigmas are meters / radians.

    When magnitude ranges are set, offsets are resampled until they land
    inside the range (sign stays free), matching reported human parking
    error bands rather than a zero-centered pile-up.
    """

    long_sigma: float = 0.05
    lat_sigma: float = 0.05
    heading_sigma: float = 0.02
    long_range: tuple[float, float] | None = None
    lat_range: tuple[float, float] | None = None

    def __post_init__(self):
        if min(self.long_sigma, self.lat_sigma, self.heading_sigma) < 0:
            raise AutolabelError("alignment-model sigmas must be >= 0")

    def _draw(self, rng: np.random.Generator, sigma: float, rng_band) -> float:
        x = rng.normal(0.0, sigma)
        if rng_band is None:
            return float(x)
        lo, hi = rng_band
        for _ in range(200):
            if lo <= abs(x) <= hi:
                return float(x)
            x = rng.normal(0.0, sigma)
        return float(math.copysign(min(max(abs(x), lo), hi), x))

    def sample(self, rng: np.random.Generator) -> Pose2:
        dx = self._draw(rng, self.long_sigma, self.long_range)
        dy = self._draw(rng, self.lat_sigma, self.lat_range)
        return Pose2(dx, dy, float(rng.normal(0.0, self.heading_sigma)))


CAREFUL_DRIVER = ManualAlignmentModel()
# parks that miss by more than a bumper length get redone by the operator,
# so recordings never carry offsets much beyond ~0.8 m
UNASSISTED_DRIVER = ManualAlignmentModel(
    long_sigma=0.5,
    lat_sigma=0.25,
    heading_sigma=0.08,
    long_range=(0.2, 0.85),
    lat_range=(0.2, 0.6),
)


@dataclass(frozen=True)
class Recording:
    """Everything a manual maneuver leaves behind for offline training.

    frames are ordered by time (all cameras of a tick adjacent); odometry
    sample k measures the motion from tick k-1 to tick k; feature_obs holds
    one (t, observations) pair per tick for the mapping camera.
    """

    frames: tuple[Frame, ...]
    odometry: tuple[OdometrySample, ...]
    feature_obs: tuple = ()
    cameras: tuple[FisheyeCamera, ...] = ()
    final_pad_pose_vehicle: Pose2 | None = None
    pad_dims: tuple[float, float, float] = (0.76, 0.62, 0.06)
    meta: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.meta.get("dt", 0.1))

    def tick_of(self, t: float) -> int:
        return int(round(t / self.dt))

    def camera(self, cam_id: str) -> FisheyeCamera:
        for c in self.cameras:
            if c.cam_id == cam_id:
                return c
        raise AutolabelError(f"recording has no camera {cam_id!r}")


@dataclass(frozen=True)
class AnnotationEntry:
    t: float
    camera_id: str
    box: tuple[float, float, float, float]
    stage: str
    keep: bool = True
    snapped: bool = True  # False: pose-projected fill with no image evidence


@dataclass
class AnnotationSet:
    entries: list[AnnotationEntry]
    stage_iou: dict = field(default_factory=dict)

    def kept(self) -> list[AnnotationEntry]:
        return [e for e in self.entries if e.keep]


def odometry_chain(rec: Recording) -> list[Pose2]:
    """Dead-reckoned vehicle pose per tick (tick 0 is the odometry origin)."""
    return chain_poses(Pose2(), rec.odometry)


# ---------------------------------------------------------------------------
# stage 1 material: odometry backtracking


def _assumed_pad_in_map(rec: Recording, poses) -> Pose2:
    if rec.final_pad_pose_vehicle is None:
        raise AutolabelError("missing-final-pose: recording was not parked")
    return compose2(poses[-1], rec.final_pad_pose_vehicle)


def _annotate_from_poses(rec: Recording, poses, pad_map: Pose2, stage: str) -> AnnotationSet:
    entries = []
    for fr in rec.frames:
        k = rec.tick_of(fr.t)
        rel = compose2(inverse2(poses[k]), pad_map)
        box = project_pad_box(rec.camera(fr.camera_id), rel, rec.pad_dims)
        if box is not None:
            entries.append(AnnotationEntry(fr.t, fr.camera_id, box, stage))
    return AnnotationSet(entries)


def backtrack(rec: Recording) -> AnnotationSet:
    """Raw annotations: the assumed final pad pose pushed back through odometry."""
    poses = odometry_chain(rec)
    pad_map = _assumed_pad_in_map(rec, poses)
    return _annotate_from_poses(rec, poses, pad_map, stage="backtrack")


# ---------------------------------------------------------------------------
# segmentation snapping


def _window(box, resolution, dilate: float = 0.5):
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    gx, gy = 0.5 * dilate * w, 0.5 * dilate * h
    W, H = resolution
    c0 = int(max(0, math.floor(x0 - gx)))
    r0 = int(max(0, math.floor(y0 - gy)))
    c1 = int(min(W, math.ceil(x1 + gx)))
    r1 = int(min(H, math.ceil(y1 + gy)))
    return c0, r0, c1, r1


def _components_in_window(frame: Frame, win, min_px: int = 1):
    """Connected pad-class proposals. The segmenter over-proposes: painted
    markings, reflective panels and noise clusters share the class with the
    real pad, and later stages must sort them out."""
    c0, r0, c1, r1 = win
    sub = frame.seg[r0:r1, c0:c1]
    fg = sub == SEG_PAD
    labels, n = ndimage.label(fg)
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    slices = ndimage.find_objects(labels)
    comps = []
    for i, sl in enumerate(slices, start=1):
        if sl is None or sizes[i] < min_px:
            continue
        rr, cc = np.nonzero(labels[sl] == i)
        rows = rr + sl[0].start + r0
        cols = cc + sl[1].start + c0
        # pixel centers classify the cell: true edges sit half a pixel out
        box = (
            float(cols.min()),
            float(rows.min()),
            float(cols.max() + 1),
            float(rows.max() + 1),
        )
        comps.append((box, rows, cols))
    return comps


def seg_filter(box, frame: Frame, min_area_frac: float = 0.25):
    """Snap a raw box to the largest pad-class blob in its dilated window.

    Returns the snapped box, or None when no blob survives the minimum-area
    check (25% of the expected pad area at the backtracked range, i.e. the
    raw box's own area).
    """
    if frame.seg is None:
        raise AutolabelError("modality-missing: seg")
    win = _window(box, frame.resolution)
    if win[2] <= win[0] or win[3] <= win[1]:
        return None
    expected = min((box[2] - box[0]) * (box[3] - box[1]), 1000.0)
    comps = [c for c in _components_in_window(frame, win)
             if len(c[1]) >= min_area_frac * expected]
    if not comps:
        return None
    return max(comps, key=lambda c: _prior_pick_key(c, box))[0]


# ---------------------------------------------------------------------------
# depth height gate


def _height_raster(frame: Frame, cam: FisheyeCamera):
    """World-frame height of every depth pixel; NaN where depth is invalid."""
    W, H = frame.resolution
    rows, cols = np.mgrid[0:H, 0:W]
    px = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    dirs_cam = pixel_rays(cam, px)
    R = cam.extrinsic.matrix()
    dirs = dirs_cam @ R.T
    z = cam.extrinsic.t[2] + frame.depth.ravel() * dirs[:, 2]
    return z.reshape(H, W)


def depth_filter(box, frame: Frame, cam: FisheyeCamera, h_max: float = 0.2) -> bool:
    """True when the candidate's median height stays near the ground plane.

    Rejects annotations that landed on raised structures; the pad itself is
    60 mm tall and passes comfortably.
    """
    if frame.depth is None:
        raise AutolabelError("modality-missing: depth")
    c0, r0, c1, r1 = _window(box, frame.resolution, dilate=0.0)
    if c1 <= c0 or r1 <= r0:
        return False
    rows, cols = np.mgrid[r0:r1, c0:c1]
    rows, cols = rows.ravel(), cols.ravel()
    if frame.seg is not None:
        fg = (frame.seg[rows, cols] != SEG_GROUND) & (frame.seg[rows, cols] != SEG_SKY)
        if np.any(fg):
            rows, cols = rows[fg], cols[fg]
    heights = _height_raster(frame, cam)
    return _blob_passes_depth(heights, rows, cols, h_max)


def _blob_passes_depth(heights, rows, cols, h_max: float) -> bool:
    if heights is None:
        return True
    z = heights[rows, cols]
    z = z[np.isfinite(z)]
    return z.size > 0 and float(np.median(z)) <= h_max


# ---------------------------------------------------------------------------
# temporal outlier rejection


def _geometric_median(pts: np.ndarray, weights: np.ndarray | None = None, iters: int = 100) -> np.ndarray:
    w0 = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
    x = (pts * w0[:, None]).sum(axis=0) / w0.sum()
    for _ in range(iters):
        d = np.hypot(*(pts - x).T)
        w = w0 / np.maximum(d, 1e-9)
        xn = (pts * w[:, None]).sum(axis=0) / w.sum()
        if np.hypot(*(xn - x)) < 1e-10:
            return xn
        x = xn
    return x


def outlier_reject(
    ann: AnnotationSet,
    rec: Recording,
    poses=None,
    min_entries: int = 5,
    prior_radius: float = 2.5,
) -> AnnotationSet:
    """Flag entries whose implied pad position strays from the robust fit.

    The pad is static, so every box should unproject to the same map-frame
    point. Only snapped entries vote for the consensus: pose-only fills all
    project the assumed park point, so letting them vote would hand a badly
    parked recording's bias a majority. Votes are area-weighted (a close,
    well-resolved box is stronger evidence than a distant sliver) and gated
    to prior_radius around the assumed park point: a run that repeatedly
    snapped the same off-path object would otherwise outvote the pad.

    All entries, fills included, are then measured against the fit and
    flagged when their residual exceeds the typical voter's by 3 MAD.
    Residuals are normalized by the expected unprojection noise before
    thresholding: the footpoint ray flattens with range, so a one-pixel
    error moves the implied point quadratically farther, and an
    unnormalized gate would flag every honest far-range snap. Snapped
    boxes touching the image border are exempt: their footpoint is cut
    off, so their implied position is biased by construction, not evidence
    of a bad annotation. A fill at the border has neither image evidence
    nor a testable footpoint and is dropped outright.
    """
    poses = odometry_chain(rec) if poses is None else poses
    anchor = None
    if rec.final_pad_pose_vehicle is not None:
        a = compose2(poses[-1], rec.final_pad_pose_vehicle)
        anchor = (a.x, a.y)
    out = list(ann.entries)
    for cam_id in sorted({e.camera_id for e in ann.entries}):
        cam = rec.camera(cam_id)
        W, H = cam.resolution
        idx, pts, votes, wts, scales = [], [], [], [], []
        for i, e in enumerate(out):
            if e.camera_id != cam_id or not e.keep:
                continue
            x0, y0, x1, y1 = e.box
            center = pad_center_estimate(cam, e.box, rec.pad_dims[0])
            on_border = x0 <= 0.5 or y0 <= 0.5 or x1 >= W - 0.5 or y1 >= H - 0.5
            if on_border or center is None:
                if not e.snapped:
                    out[i] = replace(out[i], keep=False)
                continue
            p = poses[rec.tick_of(e.t)]
            c, s = math.cos(p.heading), math.sin(p.heading)
            pt = (p.x + c * center[0] - s * center[1], p.y + s * center[0] + c * center[1])
            vote = e.snapped
            if anchor is not None and math.hypot(pt[0] - anchor[0], pt[1] - anchor[1]) > prior_radius:
                vote = False
            idx.append(i)
            pts.append(pt)
            votes.append(vote)
            wts.append((x1 - x0) * (y1 - y0))
            scales.append(1.0 + 0.04 * (center[0] ** 2 + center[1] ** 2))
        n_votes = int(np.sum(votes))
        if n_votes < min_entries:
            raise AutolabelError(f"too-few-entries: camera {cam_id} has {n_votes} usable snapped entries")
        pts = np.asarray(pts)
        votes = np.asarray(votes, dtype=bool)
        wts = np.asarray(wts)
        scales = np.asarray(scales)
        med = _geometric_median(pts[votes], wts[votes])
        d = np.hypot(*(pts[votes] - med).T) / scales[votes]
        mad = float(np.median(np.abs(d - np.median(d))))
        thresh = float(np.median(d)) + max(3.0 * mad, 0.06)
        inliers = votes.copy()
        inliers[votes] = d <= thresh
        if np.any(inliers) and not np.all(inliers[votes]):
            med = _geometric_median(pts[inliers], wts[inliers])
            dv = np.hypot(*(pts[inliers] - med).T) / scales[inliers]
            mad = float(np.median(np.abs(dv - np.median(dv))))
            thresh = float(np.median(dv)) + max(3.0 * mad, 0.06)
        keep = np.hypot(*(pts - med).T) / scales <= thresh
        for i, k in zip(idx, keep):
            if not k:
                out[i] = replace(out[i], keep=False)
    return AnnotationSet(out, dict(ann.stage_iou))


# ---------------------------------------------------------------------------
# SLAM-corrected poses


def _keyframe_ticks(avail: list[int], odo: list[Pose2], spacing: float) -> list[int]:
    """Pick keyframes among ticks that carry feature observations."""
    ticks = [avail[0]]
    dist = 0.0
    for prev, k in zip(avail, avail[1:]):
        a, b = odo[prev], odo[k]
        dist += math.hypot(b.x - a.x, b.y - a.y)
        if dist >= spacing or k == avail[-1]:
            ticks.append(k)
            dist = 0.0
    return ticks


def slam_pose_chain(rec: Recording, config: SlamConfig | None = None) -> tuple[list[Pose2], TaughtMap]:
    """Per-tick poses with keyframes bundle-adjusted, odometry in between.

    The returned chain lives in the map frame (first keyframe). Raises
    SlamError/AutolabelError when the recording cannot support mapping.
    """
    config = config or SlamConfig()
    if not rec.feature_obs:
        raise AutolabelError("recording has no feature observations")
    odo = odometry_chain(rec)
    obs_by_tick = {rec.tick_of(t): obs for t, obs in rec.feature_obs}
    avail = sorted(k for k in obs_by_tick if k < len(odo))
    kf_ticks = _keyframe_ticks(avail, odo, config.keyframe_spacing)
    kf_odom = [odo[k] for k in kf_ticks]
    kf_obs = [list(obs_by_tick[k]) for k in kf_ticks]
    slam_cam_id = rec.meta.get("slam_camera", "front")
    pad_guess = compose2(inverse2(odo[kf_ticks[0]]), _assumed_pad_in_map(rec, odo))
    taught = teach(kf_odom, kf_obs, rec.camera(slam_cam_id), pad_guess, config)
    poses = []
    j = 0
    for k in range(len(odo)):
        while j + 1 < len(kf_ticks) and kf_ticks[j + 1] <= k:
            j += 1
        anchor_tick = kf_ticks[j]
        rel = compose2(inverse2(odo[anchor_tick]), odo[k])
        poses.append(compose2(taught.keyframe_poses[j], rel))
    return poses, taught


def vslam_refine(rec: Recording, config: SlamConfig | None = None) -> AnnotationSet:
    """Backtrack again, but through bundle-adjusted poses instead of raw odometry."""
    poses, _ = slam_pose_chain(rec, config)
    pad_map = compose2(poses[-1], rec.final_pad_pose_vehicle) if rec.final_pad_pose_vehicle else None
    if pad_map is None:
        raise AutolabelError("missing-final-pose: recording was not parked")
    return _annotate_from_poses(rec, poses, pad_map, stage="vslam")


# ---------------------------------------------------------------------------
# cumulative stage pipeline


def _prior_pick_key(comp, prior_box):
    """Sort key: overlap with the projected box, then proximity, then size."""
    box, rows, _ = comp
    cx = 0.5 * (box[0] + box[2]) - 0.5 * (prior_box[0] + prior_box[2])
    cy = 0.5 * (box[1] + box[3]) - 0.5 * (prior_box[1] + prior_box[3])
    return (iou(box, prior_box), -math.hypot(cx, cy), len(rows))


def _stage_boxes(
    rec: Recording,
    raw: AnnotationSet,
    use_depth: bool,
    use_backtrack: bool,
    h_max: float = 0.2,
    stage: str = "seg",
    min_blob_px: int = 4,
    area_floor: float = 0.1,
) -> AnnotationSet:
    """Shared machinery for the first three cumulative stages.

    seg-only proposes the largest pad-class blob anywhere in the frame, so
    pad-like clutter, raised reflective panels and segmentation-noise
    clusters compete with the real pad on equal footing; +depth additionally
    requires blob pixels to sit at ground level, gating the raised
    impostors; +backtrack restricts the search to a window around the
    pose-projected box and keeps the projection itself when no blob
    survives (marked snapped=False: a pose-only fill with no image
    evidence).
    """
    frames = {(fr.t, fr.camera_id): fr for fr in rec.frames}
    entries = []
    for e in raw.entries:
        fr = frames[(e.t, e.camera_id)]
        if fr.seg is None:
            if use_backtrack:
                entries.append(replace(e, stage=stage, snapped=False))
            continue
        cam = rec.camera(e.camera_id)
        if use_backtrack:
            # manual-park error can shift the projection by over a pad length;
            # the window must still reacquire the true blob
            win = _window(e.box, fr.resolution, dilate=1.5)
        else:
            win = (0, 0, fr.resolution[0], fr.resolution[1])
        comps = _components_in_window(fr, win, min_px=min_blob_px)
        if use_depth:
            heights = _height_raster(fr, cam) if fr.depth is not None else None
            comps = [c for c in comps if _blob_passes_depth(heights, c[1], c[2], h_max)]
        if use_backtrack:
            # the floor is deliberately loose, and its reference is capped:
            # park error inflates the projected area by several times at
            # close range, where the true blob is already hundreds of pixels
            expected = min((e.box[2] - e.box[0]) * (e.box[3] - e.box[1]), 1000.0)
            comps = [c for c in comps if len(c[1]) >= area_floor * expected]
            # the position prior drives the pick; blob size only breaks ties.
            # largest-blob would hand every frame with a pad-like neighbour
            # to the bigger impostor.
            best = max(comps, key=lambda c: _prior_pick_key(c, e.box))[0] if comps else None
            if best is not None:
                entries.append(AnnotationEntry(e.t, e.camera_id, best, stage))
            else:
                entries.append(AnnotationEntry(e.t, e.camera_id, e.box, stage, snapped=False))
        else:
            best = max(comps, key=lambda c: len(c[1]))[0] if comps else None
            if best is not None:
                entries.append(AnnotationEntry(e.t, e.camera_id, best, stage))
    return AnnotationSet(entries)


def _mean_iou(ann: AnnotationSet, rec: Recording) -> tuple[float, int]:
    gt = {}
    for fr in rec.frames:
        for g in fr.gt_boxes:
            if g.object_id == "pad":
                gt[(fr.t, fr.camera_id)] = g.box
    vals = [iou(e.box, gt[(e.t, e.camera_id)]) for e in ann.kept() if (e.t, e.camera_id) in gt]
    return (float(np.mean(vals)) if vals else 0.0, len(vals))


def ablation_run(rec: Recording, slam_config: SlamConfig | None = None) -> dict:
    """Per-stage mean IoU of the cumulative refinement pipeline.

    Stages in order: segmentation snapping only, + depth gating, + odometry
    backtracking as the box prior, + temporal outlier rejection, + SLAM-
    corrected poses. Requires ground-truth boxes in the recording's frames.
    """
    odo = odometry_chain(rec)
    raw = backtrack(rec)
    stages: dict[str, AnnotationSet] = {}
    stages["seg"] = _stage_boxes(rec, raw, use_depth=False, use_backtrack=False, stage="seg")
    stages["depth"] = _stage_boxes(rec, raw, use_depth=True, use_backtrack=False, stage="depth")
    stage3 = _stage_boxes(rec, raw, use_depth=True, use_backtrack=True, stage="backtrack")
    stages["backtrack"] = stage3
    # a refinement stage that cannot run ships the previous stage's labels,
    # mirroring annotate()'s fallbacks
    try:
        stages["outlier"] = outlier_reject(stage3, rec, odo)
    except AutolabelError:
        stages["outlier"] = stage3
    try:
        poses, _ = slam_pose_chain(rec, slam_config)
        pad_map = compose2(poses[-1], rec.final_pad_pose_vehicle)
        raw5 = _annotate_from_poses(rec, poses, pad_map, stage="vslam")
        stage5 = _stage_boxes(rec, raw5, use_depth=True, use_backtrack=True, stage="vslam")
        stages["vslam"] = outlier_reject(stage5, rec, poses)
    except (SlamError, AutolabelError):
        stages["vslam"] = stages["outlier"]
    report: dict = {"stages": {}, "order": ["seg", "depth", "backtrack", "outlier", "vslam"]}
    for name, ann in stages.items():
        mean, n = _mean_iou(ann, rec)
        report["stages"][name] = {"mean_iou": mean, "entries": n}
    return report


def annotate(rec: Recording, slam_config: SlamConfig | None = None) -> AnnotationSet:
    """Production annotations: the full pipeline, best available pose chain."""
    raw = backtrack(rec)
    try:
        poses, _ = slam_pose_chain(rec, slam_config)
        pad_map = compose2(poses[-1], rec.final_pad_pose_vehicle)
        raw = _annotate_from_poses(rec, poses, pad_map, stage="vslam")
        stage = "vslam"
    except (SlamError, AutolabelError):
        poses = odometry_chain(rec)
        stage = "backtrack"
    refined = _stage_boxes(rec, raw, use_depth=True, use_backtrack=True, stage=stage)
    try:
        return outlier_reject(refined, rec, poses)
    except AutolabelError:
        return refined
