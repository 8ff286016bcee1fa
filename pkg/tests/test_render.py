import math

import numpy as np
import pytest

from padalign.geom import Pose2, camera_extrinsic, make_camera
from padalign.render import Frame, SensorNoise, pad_visible, render_frame
from padalign.rngstream import stream
from padalign.vehicle import VehicleGeometry
from padalign.world import SEG_GROUND, SEG_OBSTACLE, SEG_PAD, SEG_SKY, ChargepadSpec, Obstacle, World

FOV = math.radians(190.0)


def _front(scale=0.1):
    cam = make_camera("front", (1600, 1250), FOV, camera_extrinsic(3.6, 0.0, 0.6, 0.0, math.radians(-25)))
    return cam.scaled(scale) if scale != 1.0 else cam


def _rear(scale=0.1):
    cam = make_camera("rear", (1600, 1250), FOV, camera_extrinsic(-0.9, 0.0, 0.6, math.pi, math.radians(-25)))
    return cam.scaled(scale) if scale != 1.0 else cam


def _world(pad_x=7.0, obstacles=()):
    return World(pad=ChargepadSpec(pose=Pose2(pad_x, 0.0, 0.0)), obstacles=obstacles)


def test_render_deterministic():
    w = _world()
    a = render_frame(w, Pose2(), _front(), SensorNoise(0.02, 0.01, 0.0), stream(5, "r"))
    b = render_frame(w, Pose2(), _front(), SensorNoise(0.02, 0.01, 0.0), stream(5, "r"))
    assert np.array_equal(a.seg, b.seg)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.appearance, b.appearance)


def test_seg_classes_and_depth_domains():
    f = render_frame(_world(), Pose2(), _front())
    assert set(np.unique(f.seg)) <= {SEG_GROUND, SEG_PAD, SEG_OBSTACLE, SEG_SKY}
    assert np.any(f.seg == SEG_PAD)
    assert not np.any(f.seg == SEG_OBSTACLE)
    pad_depth = f.depth[f.seg == SEG_PAD]
    assert np.all(np.isfinite(pad_depth))
    assert np.all(np.isinf(f.depth[f.seg == SEG_SKY]))
    assert f.appearance.shape == (125, 160, 3)


def test_obstacle_rendered_when_in_view():
    obs = Obstacle(pose=Pose2(4.0, 1.5, 0.0), size=(0.6, 0.6, 0.9))
    f = render_frame(_world(obstacles=(obs,)), Pose2(), _front())
    assert np.any(f.seg == SEG_OBSTACLE)
    d = f.depth[f.seg == SEG_OBSTACLE]
    assert np.all(d < 7.0)


def test_pad_depth_close_to_geometry():
    f = render_frame(_world(), Pose2(), _front())
    pad_depth = f.depth[f.seg == SEG_PAD]
    # camera at (3.6, 0, 0.6); pad near edge 3.02 m ahead of its foot
    lo = math.hypot(7.0 - 0.38 - 3.6, 0.6 - 0.06) - 0.1
    hi = math.hypot(7.0 + 0.38 - 3.6, 0.6) + 0.1
    assert pad_depth.min() >= lo
    assert pad_depth.max() <= hi


def test_gt_box_tightly_bounds_pad_raster():
    cam = _front(1.0)
    f = render_frame(_world(), Pose2(), cam)
    assert len(f.gt_boxes) == 1
    ys, xs = np.nonzero(f.seg == SEG_PAD)
    # raster bbox spans pixel centers; analytic box is the sub-pixel silhouette
    x0, y0, x1, y1 = f.gt_boxes[0].box
    assert xs.min() + 0.5 == pytest.approx(x0, abs=1.25)
    assert xs.max() + 0.5 == pytest.approx(x1, abs=1.25)
    assert ys.min() + 0.5 == pytest.approx(y0, abs=1.25)
    assert ys.max() + 0.5 == pytest.approx(y1, abs=1.25)


def test_light_frame_matches_full_frame_box():
    w = _world()
    full = render_frame(w, Pose2(1.0, 0.2, 0.05), _front())
    light = render_frame(w, Pose2(1.0, 0.2, 0.05), _front(), rasters=False)
    assert light.seg is None and light.depth is None and light.appearance is None
    assert len(light.gt_boxes) == 1
    assert light.gt_boxes[0].box == pytest.approx(full.gt_boxes[0].box)
    assert light.pad_appearance_id == "aruco_a"


def test_no_box_when_pad_behind_camera():
    f = render_frame(_world(pad_x=7.0), Pose2(12.0, 0.0, 0.0), _front(), rasters=False)
    assert f.gt_boxes == []


def test_seg_flip_rate():
    w = _world()
    clean = render_frame(w, Pose2(), _front())
    noisy = render_frame(w, Pose2(), _front(), SensorNoise(seg_flip_rate=0.3), stream(2, "flip"))
    frac = np.mean(clean.seg != noisy.seg)
    assert frac == pytest.approx(0.3, abs=0.02)


def test_depth_noise_touches_only_finite():
    w = _world()
    clean = render_frame(w, Pose2(), _front())
    noisy = render_frame(w, Pose2(), _front(), SensorNoise(depth_sigma_rel=0.05), stream(3, "d"))
    fin = np.isfinite(clean.depth)
    assert np.array_equal(np.isfinite(noisy.depth), fin)
    rel = np.abs(noisy.depth[fin] / clean.depth[fin] - 1.0)
    assert rel.mean() == pytest.approx(0.05 * math.sqrt(2 / math.pi), rel=0.1)


def test_dropout_removes_exactly_one_modality():
    f = render_frame(_world(), Pose2(), _front(), SensorNoise(dropout_rate=1.0), stream(4, "drop"))
    assert (f.seg is None) != (f.depth is None)
    assert f.appearance is not None


def test_pad_visible_reports_reasons():
    geo = VehicleGeometry()
    cams = [_front(), _rear()]
    vis = pad_visible(_world(), Pose2(), cams, geo)
    assert vis["front"] == (True, None)
    assert vis["rear"] == (False, "outside_fov")
    # pad center inside the footprint hides it from every camera
    vis = pad_visible(_world(pad_x=1.35), Pose2(), cams, geo)
    assert vis["front"] == (False, "under_body")
    assert vis["rear"] == (False, "under_body")
