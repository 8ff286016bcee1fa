import math
from dataclasses import replace

import numpy as np
import pytest

from padalign.geom import Pose2, camera_extrinsic, make_camera
from padalign.perception import (
    DetectorModel,
    TopViewConfig,
    detect,
    detect_topview,
    ground_point_from_box,
    iou,
    pad_center_estimate,
    quality_for_extent,
)
from padalign.render import Frame, GtBox
from padalign.rngstream import stream
from padalign.world import ChargepadSpec, World

MODEL = DetectorModel()


def _frame(box, resolution=(1600, 1250), appearance="aruco_a"):
    return Frame(
        t=0.0,
        camera_id="front",
        resolution=resolution,
        seg=None,
        depth=None,
        appearance=None,
        gt_boxes=[GtBox(box=box)],
        pad_appearance_id=appearance,
    )


def test_quality_ramp_endpoints():
    assert quality_for_extent(MODEL, 12.0) == 0.0
    assert quality_for_extent(MODEL, 14.0) == pytest.approx(0.45)
    assert quality_for_extent(MODEL, 16.0) == pytest.approx(0.9)
    assert quality_for_extent(MODEL, 40.0) == pytest.approx(0.9)


def test_quality_monotone_in_extent():
    es = np.linspace(8, 30, 100)
    qs = [quality_for_extent(MODEL, e) for e in es]
    assert all(b >= a for a, b in zip(qs, qs[1:]))


def test_threshold_crossing_extent():
    # q >= 0.25 first holds just above e = 12 + 4 * 0.25 / 0.9
    e_star = 12.0 + 4.0 * (0.25 / 0.9)
    assert quality_for_extent(MODEL, e_star - 0.05) < 0.25
    assert quality_for_extent(MODEL, e_star + 0.05) >= 0.25


def test_detect_threshold_and_scale_invariance():
    # min dimension 13.5 ref px clears threshold; 12.5 does not
    assert detect(MODEL, _frame((0, 0, 13.5, 40.0))) != []
    assert detect(MODEL, _frame((0, 0, 12.5, 40.0))) == []
    # same physical box on the 160 px render: extents scale by 1/10
    small = _frame((0, 0, 1.35, 4.0), resolution=(160, 125))
    assert detect(MODEL, small) != []
    assert detect(MODEL, small)[0].quality == pytest.approx(detect(MODEL, _frame((0, 0, 13.5, 40.0)))[0].quality)


def test_learned_gain_raises_quality_and_extends_reach():
    trained = replace(MODEL, learned=(("aruco_a", 0.8),))
    for e in (11.5, 13.0, 15.0, 17.0):
        assert quality_for_extent(trained, e, "aruco_a") > quality_for_extent(MODEL, e, "aruco_a")
    # an extent invisible to the factory model now clears threshold
    assert quality_for_extent(MODEL, 12.5) < 0.25
    assert quality_for_extent(trained, 12.5, "aruco_a") >= 0.25
    # other appearances keep the factory curve
    assert quality_for_extent(trained, 13.0, "logo_b") == quality_for_extent(MODEL, 13.0)


def test_box_noise_deterministic_and_ordered():
    f = _frame((100, 100, 180, 140))
    a = detect(MODEL, f, stream(7, "det"), box_noise_px=2.0)[0]
    b = detect(MODEL, f, stream(7, "det"), box_noise_px=2.0)[0]
    assert a.box == b.box
    assert a.box != (100, 100, 180, 140)
    assert a.box[0] < a.box[2] and a.box[1] < a.box[3]


def test_iou_oracles():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 1), (1, 0, 3, 1)) == pytest.approx(1.0 / 3.0)


def test_ground_point_and_center_estimate():
    # camera 1 m up, pitched 45 deg down: image center ray lands 1 m ahead
    cam = make_camera("t", (800, 800), math.pi / 2, camera_extrinsic(0.0, 0.0, 1.0, 0.0, -math.pi / 4))
    box = (390.0, 380.0, 410.0, 400.0)  # bottom-center at the principal point
    foot = ground_point_from_box(cam, box)
    assert foot[0] == pytest.approx(1.0, abs=1e-9)
    assert foot[1] == pytest.approx(0.0, abs=1e-9)
    center = pad_center_estimate(cam, box, pad_length=0.76)
    assert center[0] == pytest.approx(1.38, abs=1e-9)
    assert center[1] == pytest.approx(0.0, abs=1e-9)


def test_ground_point_none_above_horizon():
    cam = make_camera("t", (800, 800), math.pi / 2, camera_extrinsic(0.0, 0.0, 1.0, 0.0, 0.0))
    assert ground_point_from_box(cam, (390, 200, 410, 250)) is None


# ---------------------------------------------------------------------------
# top view


def _front_cam():
    return make_camera("front", (1600, 1250), math.radians(190), camera_extrinsic(3.6, 0.0, 0.6, 0.0, math.radians(-25)))


def test_topview_box_geometry():
    cfg = TopViewConfig()
    world = World(pad=ChargepadSpec(pose=Pose2(3.6 + 5.0, 0.0, 0.0)))
    det = detect_topview(cfg, world, Pose2(), _front_cam())
    assert det is not None
    assert det.camera_id == "front_topview"
    x0, y0, x1, y1 = det.box
    assert x0 == pytest.approx((5.0 - 0.38 + 7.0) * 100.0)
    assert x1 == pytest.approx((5.0 + 0.38 + 7.0) * 100.0)
    assert y0 == pytest.approx((7.0 - 0.31) * 100.0)
    assert y1 == pytest.approx((7.0 + 0.31) * 100.0)
    assert det.quality == pytest.approx(0.9)


def test_topview_range_is_half_span():
    cfg = TopViewConfig()
    near = World(pad=ChargepadSpec(pose=Pose2(3.6 + 6.99 + 0.38, 0.0, 0.0)))
    far = World(pad=ChargepadSpec(pose=Pose2(3.6 + 7.01 + 0.38, 0.0, 0.0)))
    assert detect_topview(cfg, near, Pose2(), _front_cam()) is not None
    assert detect_topview(cfg, far, Pose2(), _front_cam()) is None


def test_topview_extent_distance_invariant():
    cfg = TopViewConfig()
    sizes = []
    for d in (2.0, 4.0, 6.0):
        world = World(pad=ChargepadSpec(pose=Pose2(3.6 + d, 0.0, 0.0)))
        det = detect_topview(cfg, world, Pose2(), _front_cam())
        sizes.append((det.box[2] - det.box[0], det.box[3] - det.box[1]))
    assert sizes[0] == pytest.approx(sizes[1])
    assert sizes[1] == pytest.approx(sizes[2])
