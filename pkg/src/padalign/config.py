"""Scenario configuration: strict JSON schema, presets, and builders.

A scenario file is UTF-8 JSON with exactly the top-level sections world, rig,
vehicle, noise, detector, tracker, slam, align. Every section maps onto a
frozen dataclass below; unknown keys anywhere in the tree are rejected with
the offending key named, so typos cannot silently fall back to defaults.
Angles in files are degrees (the rig tables quote degrees); builders convert.

The scenario hash is the sha256 of the canonical JSON form (sorted keys, no
whitespace) and is what recordings and reports embed to tie outputs to their
inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields

from .align import AlignConfig
from .geom import FisheyeCamera, Pose2, camera_extrinsic, make_camera
from .perception import DetectorModel
from .render import SensorNoise
from .tracker import TrackerConfig
from .vehicle import OdometryNoise, VehicleGeometry, VehicleState
from .vslam import SlamConfig
from .world import ChargepadSpec, Obstacle, World, scatter_landmarks, validate_world

SECTION_NAMES = ("world", "rig", "vehicle", "noise", "detector", "tracker", "slam", "align")
PRESETS = ("indoor", "outdoor", "synthetic")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PadSection:
    # default start (1.0) + front-camera lever arm (3.6) + 5 m sensing range
    x: float = 9.6
    y: float = 0.0
    heading_deg: float = 0.0
    length: float = 0.76
    width: float = 0.62
    height: float = 0.06
    appearance_id: str = "aruco_a"
    appearance_kind: str = "aruco_like"


@dataclass(frozen=True)
class ObstacleSection:
    x: float
    y: float
    heading_deg: float = 0.0
    length: float = 0.6
    width: float = 0.6
    height: float = 0.8


@dataclass(frozen=True)
class LandmarkSection:
    seed: int = 7
    count: int = 140


@dataclass(frozen=True)
class WorldSection:
    surface: str = "outdoor"
    pad: PadSection = field(default_factory=PadSection)
    obstacles: tuple[ObstacleSection, ...] = ()
    landmarks: LandmarkSection = field(default_factory=LandmarkSection)
    x_min: float = -10.0
    x_max: float = 25.0
    y_min: float = -10.0
    y_max: float = 10.0


@dataclass(frozen=True)
class CameraSection:
    cam_id: str
    x: float
    y: float
    z: float
    yaw_deg: float = 0.0
    pitch_deg: float = -25.0
    fov_deg: float = 190.0
    width: int = 1600
    height: int = 1250


def _default_cameras() -> tuple[CameraSection, ...]:
    # front/rear on the bumper line, left/right on the wing mirrors
    return (
        CameraSection("front", 3.6, 0.0, 0.6, 0.0, -25.0),
        CameraSection("rear", -0.9, 0.0, 0.6, 180.0, -25.0),
        CameraSection("left", 1.9, 0.9, 1.0, 90.0, -50.0),
        CameraSection("right", 1.9, -0.9, 1.0, -90.0, -50.0),
    )


@dataclass(frozen=True)
class RigSection:
    cameras: tuple[CameraSection, ...] = field(default_factory=_default_cameras)
    render_scale: float = 0.125
    record_cameras: tuple[str, ...] = ("front",)
    # the mirror cameras keep the pad in view once it slips under the front
    # bumper, so the last meter of an approach is not pure dead reckoning
    detect_cameras: tuple[str, ...] = ("front", "left", "right")
    slam_camera: str = "front"


@dataclass(frozen=True)
class VehicleSection:
    wheelbase: float = 2.7
    width: float = 1.8
    length: float = 4.5
    rear_overhang: float = 0.9
    coil_x: float = 1.35
    coil_y: float = 0.0
    max_steer: float = 0.55
    max_speed: float = 3.0
    max_accel: float = 2.0
    max_steer_rate: float = 0.8
    start_x: float = 1.0
    start_y: float = 0.0
    start_heading_deg: float = 0.0


@dataclass(frozen=True)
class NoiseSection:
    odom_trans_sigma: float = 0.0
    odom_rot_sigma: float = 0.0
    odom_heading_bias: float = 0.0
    seg_flip_rate: float = 0.0
    depth_sigma_rel: float = 0.0
    dropout_rate: float = 0.0
    box_noise_px: float = 0.0  # detection box jitter at the reference width
    feature_pixel_noise: float = 0.0
    heading_sigma: float = 0.0  # pad-heading measurement noise, radians


@dataclass(frozen=True)
class DetectorSection:
    min_extent_px: float = 12.0
    good_extent_px: float = 16.0
    base_quality: float = 0.9
    quality_threshold: float = 0.25
    ref_width: int = 1600
    learned: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class TrackerSection:
    max_age: int = 8
    min_hits: int = 2
    iou_gate: float = 0.3


@dataclass(frozen=True)
class SlamSection:
    enabled: bool = True
    keyframe_spacing: float = 0.5
    feature_range: float = 13.0
    huber_delta: float = 2.0
    max_iterations: int = 30
    min_keyframes: int = 5
    min_tracks: int = 20
    min_reloc_inliers: int = 12
    max_reloc_rms: float = 2.0
    reloc_inlier_px: float = 3.0
    odom_trans_weight: float = 30.0
    odom_rot_weight: float = 60.0


@dataclass(frozen=True)
class AlignSection:
    approach_speed: float = 1.0
    speed_gain: float = 1.2
    lookahead: float = 1.2
    replan_threshold: float = 0.05
    lost_target_timeout: float = 3.0
    estimate_smoothing: float = 0.35
    turn_radius_margin: float = 1.05
    deadreckon_distance: float = 2.25
    approach_run_in: float = 4.0
    dock_lead: float = 1.0
    dock_speed: float = 0.5
    reposition_distance: float = 3.0
    reverse_speed: float = 0.6
    goal_tolerance: float = 0.03


@dataclass(frozen=True)
class ScenarioConfig:
    world: WorldSection = field(default_factory=WorldSection)
    rig: RigSection = field(default_factory=RigSection)
    vehicle: VehicleSection = field(default_factory=VehicleSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    slam: SlamSection = field(default_factory=SlamSection)
    align: AlignSection = field(default_factory=AlignSection)


# ---------------------------------------------------------------------------
# dict <-> dataclass with strict key checking


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _element_type(tp):
    """Element type of tuple[X, ...] annotations, else None."""
    import typing

    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return args[0]
    return None


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'scenario'}: expected an object, got {type(data).__name__}")
    allowed = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {where!r}")
    kwargs = {}
    import typing

    hints = typing.get_type_hints(cls)
    for name, f in allowed.items():
        if name not in data:
            continue
        value = data[name]
        sub = f"{path}.{name}" if path else name
        tp = hints.get(name, f.type)
        elem = _element_type(tp)
        if _is_dataclass_type(tp):
            kwargs[name] = _from_dict(tp, value, sub)
        elif elem is not None and _is_dataclass_type(elem):
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[name] = tuple(_from_dict(elem, v, f"{sub}[{i}]") for i, v in enumerate(value))
        elif elem is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'scenario'}: {exc}") from exc


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, float) and float(obj).is_integer():
        return obj
    return obj


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    return _to_jsonable(cfg)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("scenario: expected a JSON object")
    for key in data:
        if key not in SECTION_NAMES:
            raise ConfigError(f"unknown key {key!r}")
    return _from_dict(ScenarioConfig, data, "")


def canonical_json(cfg: ScenarioConfig) -> str:
    return json.dumps(scenario_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def scenario_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(data)


def save_scenario(cfg: ScenarioConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# presets


def preset_scenario(name: str) -> ScenarioConfig:
    """Named full-scenario presets keyed by ground surface.

    Indoor garages have even floors (low odometry drift, crisp detections);
    outdoor lots drift more and see noisier boxes; synthetic is the noiseless
    debug surface.
    """
    if name == "indoor":
        return ScenarioConfig(
            world=WorldSection(surface="indoor", landmarks=LandmarkSection(seed=7, count=140)),
            noise=NoiseSection(
                odom_trans_sigma=0.02,
                odom_rot_sigma=0.02,
                odom_heading_bias=0.001,
                seg_flip_rate=0.01,
                depth_sigma_rel=0.02,
                dropout_rate=0.05,
                box_noise_px=1.5,
                feature_pixel_noise=0.3,
                heading_sigma=0.03,
            ),
        )
    if name == "outdoor":
        return ScenarioConfig(
            world=WorldSection(surface="outdoor", landmarks=LandmarkSection(seed=7, count=90)),
            noise=NoiseSection(
                # wheel slip on loose or wet paving; the bias term is the
                # per-meter rate that reproduces realistic end-of-maneuver
                # drift over our compressed (few-meter) approach paths
                odom_trans_sigma=0.2,
                odom_rot_sigma=0.3,
                odom_heading_bias=0.025,
                seg_flip_rate=0.03,
                depth_sigma_rel=0.05,
                dropout_rate=0.1,
                box_noise_px=2.0,
                feature_pixel_noise=0.5,
                heading_sigma=0.05,
            ),
        )
    if name == "synthetic":
        return ScenarioConfig(
            world=WorldSection(surface="synthetic", landmarks=LandmarkSection(seed=7, count=140)),
            noise=NoiseSection(),
        )
    raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# builders: config sections -> simulator objects


def build_world(section: WorldSection) -> World:
    pad = ChargepadSpec(
        pose=Pose2(section.pad.x, section.pad.y, math.radians(section.pad.heading_deg)),
        length=section.pad.length,
        width=section.pad.width,
        height=section.pad.height,
        appearance_id=section.pad.appearance_id,
        appearance_kind=section.pad.appearance_kind,
    )
    obstacles = tuple(
        Obstacle(
            pose=Pose2(o.x, o.y, math.radians(o.heading_deg)),
            size=(o.length, o.width, o.height),
        )
        for o in section.obstacles
    )
    landmarks = ()
    if section.landmarks.count > 0:
        landmarks = scatter_landmarks(section.landmarks.seed, count=section.landmarks.count)
    world = World(
        surface=section.surface,
        pad=pad,
        obstacles=obstacles,
        landmarks=landmarks,
        bounds=((section.x_min, section.x_max), (section.y_min, section.y_max)),
    )
    validate_world(world)
    return world


def build_camera(section: CameraSection) -> FisheyeCamera:
    mount = camera_extrinsic(
        section.x,
        section.y,
        section.z,
        math.radians(section.yaw_deg),
        math.radians(section.pitch_deg),
    )
    return make_camera(section.cam_id, (section.width, section.height), math.radians(section.fov_deg), mount)


def build_rig(section: RigSection) -> dict[str, FisheyeCamera]:
    cams = {}
    for cs in section.cameras:
        if cs.cam_id in cams:
            raise ConfigError(f"duplicate camera id {cs.cam_id!r}")
        cams[cs.cam_id] = build_camera(cs)
    for name in (*section.record_cameras, *section.detect_cameras, section.slam_camera):
        if name not in cams:
            raise ConfigError(f"rig references unknown camera {name!r}")
    return cams


def build_geometry(section: VehicleSection) -> VehicleGeometry:
    return VehicleGeometry(
        wheelbase=section.wheelbase,
        width=section.width,
        length=section.length,
        rear_overhang=section.rear_overhang,
        coil_offset=(section.coil_x, section.coil_y),
        max_steer=section.max_steer,
        max_speed=section.max_speed,
        max_accel=section.max_accel,
        max_steer_rate=section.max_steer_rate,
    )


def build_start_state(section: VehicleSection) -> VehicleState:
    return VehicleState(pose=Pose2(section.start_x, section.start_y, math.radians(section.start_heading_deg)))


def build_odometry_noise(section: NoiseSection) -> OdometryNoise:
    return OdometryNoise(
        trans_sigma=section.odom_trans_sigma,
        rot_sigma=section.odom_rot_sigma,
        heading_bias=section.odom_heading_bias,
    )


def build_sensor_noise(section: NoiseSection) -> SensorNoise:
    return SensorNoise(
        seg_flip_rate=section.seg_flip_rate,
        depth_sigma_rel=section.depth_sigma_rel,
        dropout_rate=section.dropout_rate,
    )


def build_detector(section: DetectorSection) -> DetectorModel:
    return DetectorModel(
        min_extent_px=section.min_extent_px,
        good_extent_px=section.good_extent_px,
        base_quality=section.base_quality,
        quality_threshold=section.quality_threshold,
        ref_width=section.ref_width,
        learned=tuple((str(a), float(g)) for a, g in section.learned),
    )


def build_tracker_config(section: TrackerSection) -> TrackerConfig:
    return TrackerConfig(max_age=section.max_age, min_hits=section.min_hits, iou_gate=section.iou_gate)


def build_slam_config(section: SlamSection) -> SlamConfig:
    return SlamConfig(
        keyframe_spacing=section.keyframe_spacing,
        feature_range=section.feature_range,
        huber_delta=section.huber_delta,
        max_iterations=section.max_iterations,
        min_keyframes=section.min_keyframes,
        min_tracks=section.min_tracks,
        min_reloc_inliers=section.min_reloc_inliers,
        max_reloc_rms=section.max_reloc_rms,
        reloc_inlier_px=section.reloc_inlier_px,
        odom_trans_weight=section.odom_trans_weight,
        odom_rot_weight=section.odom_rot_weight,
    )


def build_align_config(section: AlignSection) -> AlignConfig:
    return AlignConfig(**{f.name: getattr(section, f.name) for f in fields(AlignSection)})
