"""Deterministic 10 Hz session: one vehicle, one pad, one mode at a time.

The session owns the simulator state and is the only thing that mutates it.
Modes mirror the online-learning workflow: idle, auto_align (detector-guided
parking), repeat (map-guided parking), manual_record (human drives, sensors
record), online_train (batch: autolabel + train, runs synchronously), teach
(batch: build a landmark map from a recording). Commands move between modes
along fixed edges; anything else raises SessionError.

Every random draw comes from a stream keyed by (root seed, purpose, tick), so
replaying the same commands on the same scenario reproduces every byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autolabel, trainer
from .align import DONE, LOST, AlignmentController, ControllerStatus
from .autolabel import AutolabelError, Recording
from .config import (
    ScenarioConfig,
    build_align_config,
    build_detector,
    build_geometry,
    build_odometry_noise,
    build_rig,
    build_sensor_noise,
    build_slam_config,
    build_start_state,
    build_tracker_config,
    build_world,
    scenario_hash,
)
from .geom import Pose2, compose2, inverse2
from .perception import Detection, detect, ground_point_from_box, pad_center_estimate
from .perception import iou as perception_iou
from .render import render_frame
from .rngstream import stream
from .tracker import PadTracker, best_confirmed
from .vehicle import VehicleState, coil_position, heading_offset_mod_pi, read_odometry, step
from .vslam import SlamError, TaughtMap, observe_features, query_pad, relocalize

MODES = ("idle", "auto_align", "manual_record", "online_train", "teach", "repeat")
COMMANDS = ("trigger", "start_record", "finish_park", "start_training", "start_auto_align", "reset")

TICK_DT = 0.1
RIM_ANGLE_LIMIT = math.radians(80.0)  # beyond this the lens is all smear
RECORD_STRIDE = 1  # raster frames every tick, matching odometry; the
# training holdout gate (20 unseen samples) needs every frame a short
# parking maneuver can produce


class SessionError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentResult:
    positional_cm: float
    angular_deg: float
    status: str
    replans: int
    duration_s: float


@dataclass
class TickOutput:
    tick: int
    t: float
    mode: str
    state: VehicleState
    odom_pose: Pose2
    detections: list[Detection]
    track: object | None
    controller_state: str | None
    events: list[str]


@dataclass
class _RecordingBuffer:
    odometry: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    feature_obs: list = field(default_factory=list)
    start_tick: int = 0


def _label_agreement(ann, rec: Recording) -> float:
    """Truth-free label quality: agreement of final boxes with raw backtracking.

    The refined boxes come from image evidence, the raw boxes purely from the
    pose chain; when two independent routes to the same box agree, the labels
    are trustworthy. Mean IoU over the trainable kept entries (the ones the
    dataset builder admits), in [0, 1]: the proxy describes the labels the
    classifier actually learns from.
    """
    raw = autolabel.backtrack(rec)
    raw_by_key = {(e.t, e.camera_id): e.box for e in raw.entries}
    vals = []
    for e in trainer.trainable(ann.kept()):
        ref = raw_by_key.get((e.t, e.camera_id))
        if ref is not None:
            vals.append(perception_iou(e.box, ref))
    return float(np.mean(vals)) if vals else 0.0


def evaluate_alignment(state: VehicleState, world, geometry, status: str, replans: int, duration_s: float) -> AlignmentResult:
    """Score a finished maneuver against simulation truth."""
    coil = coil_position(geometry, state.pose)
    pad = world.pad.pose
    positional = math.hypot(coil[0] - pad.x, coil[1] - pad.y) * 100.0
    angular = math.degrees(heading_offset_mod_pi(state.pose.heading, pad.heading))
    return AlignmentResult(positional, angular, status, replans, duration_s)


class Session:
    def __init__(self, config: ScenarioConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.hash = scenario_hash(config)
        self.world = build_world(config.world)
        self.rig = build_rig(config.rig)
        self.geometry = build_geometry(config.vehicle)
        self.odo_noise = build_odometry_noise(config.noise)
        self.sensor_noise = build_sensor_noise(config.noise)
        self.detector = build_detector(config.detector)
        self.tracker_config = build_tracker_config(config.tracker)
        self.slam_config = build_slam_config(config.slam)
        self.align_config = build_align_config(config.align)

        self.detect_cams = [self.rig[c] for c in config.rig.detect_cameras]
        self.record_cams = [self.rig[c].scaled(config.rig.render_scale) for c in config.rig.record_cameras]
        self.slam_cam = self.rig[config.rig.slam_camera].scaled(config.rig.render_scale)

        self.state = build_start_state(config.vehicle)
        self.mode = "idle"
        self.tick = 0
        self.dt = TICK_DT
        self.odom_pose = Pose2()
        self.trackers = {cam.cam_id: PadTracker(self.tracker_config) for cam in self.detect_cams}
        self.controller: AlignmentController | None = None
        self._last_status: ControllerStatus | None = None
        self._align_started: float | None = None
        self.map: TaughtMap | None = None
        self.recording: Recording | None = None
        self._buffer: _RecordingBuffer | None = None
        self._pending = (0.0, 0.0, "forward")  # steer target, accel, gear
        self.last_result: AlignmentResult | None = None
        self.events: list[str] = []
        self.train_stats: dict = {}

    # -- clocks and frames ---------------------------------------------------

    @property
    def t(self) -> float:
        return self.tick * self.dt

    def _rng(self, *tags) -> np.random.Generator:
        return stream(self.seed, *tags)

    def pad_in_vehicle(self) -> Pose2:
        return compose2(inverse2(self.state.pose), self.world.pad.pose)

    # -- perception ----------------------------------------------------------

    def _detect_now(self, salt: int = 0) -> list[Detection]:
        """Detections on the detect cameras for the current pose (analytic frames)."""
        out: list[Detection] = []
        for cam in self.detect_cams:
            frame = render_frame(self.world, self.state.pose, cam, t=self.t, rasters=False)
            rng = self._rng("detect", self.tick, cam.cam_id, salt)
            dets = detect(self.detector, frame, rng=rng, box_noise_px=self.config.noise.box_noise_px)
            out.extend(self._foot_gate(cam, dets))
        return out

    def _foot_gate(self, cam, dets: list[Detection]) -> list[Detection]:
        """Drop boxes whose ground foot point cannot anchor a range estimate.

        Three failure shapes. Near the fisheye rim the lens resolves too
        little for the box bottom to mean "ground contact" (a sideways camera
        technically images straight ahead, but nothing metric survives out
        there). The other two come with the pad slipping under the bumper:
        the foot lands inside the vehicle footprint (box bottom no longer the
        pad/ground contact), or the foot sits so close to the camera's ground
        point that the bearing used to extrapolate from the near edge to the
        pad center is noise-dominated (the lever arm must at least match the
        half-length extrapolation; every blind centimeter surrendered here
        costs dead-reckoned centimeters at the coil).
        """
        cam_xy = cam.extrinsic.t[:2]
        kept = []
        for d in dets:
            u, v = 0.5 * (d.box[0] + d.box[2]), d.box[3]
            if math.hypot(u - cam.pp[0], v - cam.pp[1]) / cam.focal > RIM_ANGLE_LIMIT:
                continue
            foot = ground_point_from_box(cam, d.box)
            if foot is not None:
                if self.geometry.footprint_contains(foot[:2]):
                    continue
                if float(np.hypot(foot[0] - cam_xy[0], foot[1] - cam_xy[1])) < 0.5 * self.world.pad.length:
                    continue
            kept.append(d)
        return kept

    def _measure_pad(self, detections: list[Detection]) -> Pose2 | None:
        """Pad pose in the vehicle frame, gated by a fresh confirmed track.

        The tracker decides WHETHER there is a stable pad (confirmation,
        identity through dropouts); the geometry comes from the raw detection
        that updated the track this tick. Measuring from the Kalman box
        instead would fold the constant-velocity lag of a growing box into
        the range estimate (several cm at approach speeds).
        """
        by_cam: dict[str, list[Detection]] = {cam.cam_id: [] for cam in self.detect_cams}
        for d in detections:
            by_cam.setdefault(d.camera_id, []).append(d)
        best = None
        for cam in self.detect_cams:
            snaps = self.trackers[cam.cam_id].step(by_cam[cam.cam_id])
            snap = best_confirmed(snaps)
            if snap is None or snap.time_since_update > 0:
                continue
            source = max(
                by_cam[cam.cam_id],
                key=lambda d: perception_iou(d.box, snap.box),
                default=None,
            )
            if source is None:
                continue
            center = pad_center_estimate(cam, source.box, self.world.pad.length)
            if center is None:
                continue
            if self.geometry.footprint_contains(center[:2]):
                continue
            if best is None or snap.quality > best[1]:
                best = (center, snap.quality)
        if best is None:
            return None
        center = best[0]
        heading = self.pad_in_vehicle().heading
        sigma = self.config.noise.heading_sigma
        if sigma > 0:
            heading += float(self._rng("headmeas", self.tick).normal(0.0, sigma))
        return Pose2(float(center[0]), float(center[1]), heading)

    def _relocalize_now(self) -> Pose2 | None:
        """Pad pose in the vehicle frame via the taught map, if it answers."""
        if self.map is None:
            return None
        rng = self._rng("features", self.tick)
        obs = observe_features(
            self.world,
            self.state.pose,
            self.slam_cam,
            rng=rng,
            pixel_noise=self.config.noise.feature_pixel_noise,
            feature_range=self.slam_config.feature_range,
        )
        if len(obs) < self.slam_config.min_reloc_inliers:
            return None
        result = relocalize(self.map, obs, self.slam_cam, self.slam_config)
        if result is None:
            return None
        return query_pad(self.map, result.pose)

    # -- commands (mode graph edges) ------------------------------------------

    def command(self, name: str) -> str:
        if name not in COMMANDS:
            raise SessionError(f"unknown command {name!r}")
        if name == "reset":
            self._reset_transients()
            self.mode = "idle"
            return self.mode
        if name == "trigger":
            self._require_mode("idle", name)
            return self._trigger()
        if name == "start_record":
            self._require_mode("idle", name)
            self._start_recording()
            self.mode = "manual_record"
            return self.mode
        if name == "finish_park":
            self._require_mode("manual_record", name)
            self._finish_park()
            self.mode = "idle"
            return self.mode
        if name == "start_training":
            self._require_mode("idle", name)
            self._run_training()
            return self.mode
        if name == "start_auto_align":
            self._require_mode("idle", name)
            self._enter_alignment("auto_align")
            return self.mode
        raise SessionError(f"unknown command {name!r}")

    def _require_mode(self, mode: str, cmd: str) -> None:
        if self.mode != mode:
            raise SessionError(f"invalid-command: {cmd!r} requires mode {mode!r}, session is in {self.mode!r}")

    def _reset_transients(self) -> None:
        self.controller = None
        self._last_status = None
        self._align_started = None
        self._buffer = None
        self._pending = (0.0, 0.0, "forward")
        for tr in self.trackers.values():
            tr.tracks = []

    def _trigger(self) -> str:
        # the tracker needs min_hits to confirm; a trigger is a short burst
        measurement = None
        for salt in range(max(1, self.tracker_config.min_hits)):
            measurement = self._measure_pad(self._detect_now(salt=salt))
        if measurement is not None:
            self._enter_alignment("auto_align", seed_measurement=measurement)
            self.events.append("trigger: pad detected, aligning")
            return self.mode
        reloc = self._relocalize_now()
        if reloc is not None:
            self._enter_alignment("repeat", seed_measurement=reloc)
            self.events.append("trigger: map relocalization, aligning")
            return self.mode
        self._start_recording()
        self.mode = "manual_record"
        self.events.append("trigger: pad not found, drive to the pad manually")
        return self.mode

    def _enter_alignment(self, mode: str, seed_measurement: Pose2 | None = None) -> None:
        self.controller = AlignmentController(self.geometry, self.align_config)
        self._align_started = self.t
        if seed_measurement is not None:
            self.controller.observe(seed_measurement, self.odom_pose, self.t)
        self.mode = mode

    def _start_recording(self) -> None:
        self._buffer = _RecordingBuffer(start_tick=self.tick)
        self.recording = None

    def _finish_park(self) -> None:
        buf = self._buffer
        if buf is None or not buf.odometry:
            raise SessionError("not-recorded: no maneuver captured")
        coil = coil_position(self.geometry, self.state.pose)
        rel = compose2(inverse2(self.world.pad.pose), Pose2(float(coil[0]), float(coil[1]), 0.0))
        # accept anything inside the pad plus the documented unassisted-driver
        # bands (1.2 m longitudinal, 0.6 m lateral): a sloppy park is still a
        # park, and its error is exactly what the label pipeline must absorb
        half_l = self.world.pad.length / 2.0
        half_w = self.world.pad.width / 2.0
        if abs(rel.x) > half_l + 1.2 or abs(rel.y) > half_w + 0.6:
            raise SessionError("not-parked: coil is not over the pad")
        # the driver believes the coil sits centered on the pad; that belief,
        # not the truth, is what the annotation pipeline is allowed to know
        assumed = Pose2(self.geometry.coil_offset[0], self.geometry.coil_offset[1], 0.0)
        self.recording = Recording(
            frames=tuple(buf.frames),
            odometry=tuple(buf.odometry),
            feature_obs=tuple(buf.feature_obs),
            cameras=tuple(self.record_cams),
            final_pad_pose_vehicle=assumed,
            pad_dims=self.world.pad.dims,
            meta={
                "dt": self.dt,
                "seed": self.seed,
                "scenario": self.hash,
                "slam_camera": self.config.rig.slam_camera,
            },
        )
        self._buffer = None
        self.events.append(f"recording finalized: {len(self.recording.frames)} frames")

    def _run_training(self) -> None:
        if self.recording is None:
            raise SessionError("no-recording: park manually before training")
        self.mode = "online_train"
        try:
            ann = autolabel.annotate(self.recording, self.slam_config)
            rng = self._rng("train")
            dataset = trainer.build_dataset(ann, self.recording, rng=rng)
            # hold out a quarter, but never fewer than registration's 20-sample gate
            frac = max(0.25, min(0.5, 22.0 / max(len(dataset), 1)))
            train_set, holdout = trainer.split_dataset(dataset, rng, holdout_frac=frac)
            train_set = trainer.augment_dataset(train_set, rng, factor=30)
            # L1-normalized histogram features are small per-dim; the library
            # defaults (lr 0.1, 50 epochs) underfit them badly
            model = trainer.train(train_set, lr=1.0, epochs=300)
            appearance_id = self.recording.frames[0].pad_appearance_id
            kept = ann.kept()
            iou_proxy = _label_agreement(ann, self.recording)
            stats = trainer.holdout_stats(model, holdout, appearance_id, iou_proxy)
            self.detector = trainer.register_appearance(self.detector, model, stats)
            self.train_stats = {
                "appearance_id": appearance_id,
                "annotations": len(kept),
                "holdout_accuracy": stats.accuracy,
                "holdout_count": stats.count,
                "gain": self.detector.gain_for(appearance_id),
                "loss_final": model.train_loss_history[-1] if model.train_loss_history else None,
            }
            self.events.append(
                f"trained {appearance_id}: holdout acc {stats.accuracy:.3f}, gain {self.train_stats['gain']:.2f}"
            )
        except (AutolabelError, trainer.TrainerError) as exc:
            self.events.append(f"training failed: {exc}")
            self.mode = "idle"
            raise SessionError(f"training-failed: {exc}") from exc
        self.mode = "idle"

    def teach_from_recording(self, rec: Recording) -> TaughtMap:
        """Batch map build from a recorded maneuver (teach mode)."""
        self.mode = "teach"
        try:
            poses, taught = autolabel.slam_pose_chain(rec, self.slam_config)
        except (SlamError, AutolabelError) as exc:
            self.mode = "idle"
            raise SessionError(f"teach-failed: {exc}") from exc
        self.map = taught
        self.mode = "idle"
        self.events.append(f"map taught: {len(taught.keyframe_poses)} keyframes, {len(taught.landmarks)} landmarks")
        return taught

    # -- manual control ------------------------------------------------------

    def apply_control(self, steer: float, accel: float, gear: str = "forward") -> None:
        if self.mode not in ("manual_record", "idle"):
            raise SessionError(f"manual control not available in mode {self.mode!r}")
        if gear not in ("forward", "reverse"):
            raise SessionError(f"unknown gear {gear!r}")
        steer = float(np.clip(steer, -self.geometry.max_steer, self.geometry.max_steer))
        accel = float(np.clip(accel, -self.geometry.max_accel, self.geometry.max_accel))
        self._pending = (steer, accel, gear)

    # -- the tick ------------------------------------------------------------

    def step_tick(self) -> TickOutput:
        """One 10 Hz tick: drive, sense, track, record, update the controller.

        The controller is updated exactly once per tick; its commands are
        applied at the NEXT tick (one-tick actuation latency, like a real
        control loop), which also keeps REPOSITION's distance bookkeeping
        honest.
        """
        events_before = len(self.events)
        self.tick += 1

        if self.mode in ("auto_align", "repeat"):
            accel, steer_rate = self._drive_from_status(self._last_status)
        else:
            steer_target, accel, gear = self._pending
            if gear == "reverse" and accel > 0:
                accel = -accel
            steer_rate = float(
                np.clip(
                    (steer_target - self.state.steer) / self.dt,
                    -self.geometry.max_steer_rate,
                    self.geometry.max_steer_rate,
                )
            )

        prev = self.state
        self.state = step(self.state, self.geometry, accel, steer_rate, self.dt)
        odo_rng = self._rng("odom", self.tick)
        sample = read_odometry(prev, self.state, self.odo_noise, odo_rng, self.dt)
        self.odom_pose = compose2(self.odom_pose, sample.delta)

        detections = self._detect_now()
        measurement = self._measure_pad(detections)

        if self._buffer is not None:
            self._record_tick(sample)

        status = None
        if self.mode in ("auto_align", "repeat") and self.controller is not None:
            if measurement is None and self.map is not None:
                measurement = self._relocalize_now()
            self.controller.observe(measurement, self.odom_pose, self.t)
            status = self.controller.update(self.odom_pose, self.t, self.dt)
            self._last_status = status
            if status.state in (DONE, LOST):
                self.last_result = evaluate_alignment(
                    self.state,
                    self.world,
                    self.geometry,
                    status.state,
                    status.replans,
                    self.t - (self._align_started or 0.0),
                )
                self.events.append(
                    f"alignment {status.state}: {self.last_result.positional_cm:.1f} cm, "
                    f"{self.last_result.angular_deg:.2f} deg"
                )
                self.controller = None
                self._last_status = None
                self.mode = "idle"

        return TickOutput(
            tick=self.tick,
            t=self.t,
            mode=self.mode,
            state=self.state,
            odom_pose=self.odom_pose,
            detections=detections,
            track=self._best_track(),
            controller_state=status.state if status is not None else None,
            events=self.events[events_before:],
        )

    def _drive_from_status(self, status: ControllerStatus | None) -> tuple[float, float]:
        if status is None or status.state in (DONE, LOST):
            return (
                float(np.clip(-self.state.speed / self.dt, -self.geometry.max_accel, self.geometry.max_accel)),
                0.0,
            )
        accel = float(
            np.clip((status.target_speed - self.state.speed) / self.dt, -self.geometry.max_accel, self.geometry.max_accel)
        )
        steer_rate = float(
            np.clip(
                (status.target_steer - self.state.steer) / self.dt,
                -self.geometry.max_steer_rate,
                self.geometry.max_steer_rate,
            )
        )
        return accel, steer_rate

    def _record_tick(self, sample) -> None:
        buf = self._buffer
        buf.odometry.append(sample)
        rng = self._rng("features", self.tick)
        obs = observe_features(
            self.world,
            self.state.pose,
            self.slam_cam,
            rng=rng,
            pixel_noise=self.config.noise.feature_pixel_noise,
            feature_range=self.slam_config.feature_range,
        )
        if obs:
            buf.feature_obs.append((len(buf.odometry) * self.dt, obs))
        if len(buf.odometry) % RECORD_STRIDE == 0:
            for cam in self.record_cams:
                frame = render_frame(
                    self.world,
                    self.state.pose,
                    cam,
                    noise=self.sensor_noise,
                    rng=self._rng("render", self.tick, cam.cam_id),
                    t=len(buf.odometry) * self.dt,
                )
                buf.frames.append(frame)

    def _best_track(self):
        snaps = []
        for tr in self.trackers.values():
            snaps.extend(tr.snapshots())
        return best_confirmed(snaps)

    # -- batch helpers ---------------------------------------------------------

    def run_alignment(self, max_t: float = 90.0) -> AlignmentResult:
        """Step until the active alignment finishes; returns the scored result."""
        if self.mode not in ("auto_align", "repeat"):
            raise SessionError(f"no alignment active (mode {self.mode!r})")
        start = self.tick
        while self.mode in ("auto_align", "repeat"):
            self.step_tick()
            if (self.tick - start) * self.dt > max_t:
                self.last_result = evaluate_alignment(
                    self.state, self.world, self.geometry, "timeout", 0, max_t
                )
                self.controller = None
                self.mode = "idle"
                break
        return self.last_result


def scripted_manual_park(session: Session, park_offset: Pose2, max_t: float = 60.0) -> None:
    """Drive the manual maneuver like a human with eyes on the pad.

    The scripted driver sees the true pad (humans do) but parks with
    park_offset of error and believes the result is centered; that belief is
    exactly what the recording's final pose will claim. Implemented by aiming
    the alignment controller at the offset pad pose, converted to pedal and
    wheel commands through Session.apply_control so the drive takes the same
    path a cockpit client would.
    """
    if session.mode != "manual_record":
        raise SessionError(f"scripted park requires manual_record mode, session is in {session.mode!r}")
    ctrl = AlignmentController(session.geometry, session.align_config)
    aim = compose2(session.world.pad.pose, park_offset)
    t_end = session.t + max_t
    while session.mode == "manual_record" and session.t < t_end:
        rel = compose2(inverse2(session.state.pose), aim)
        meas = None if session.geometry.footprint_contains((rel.x, rel.y)) else rel
        ctrl.observe(meas, session.state.pose, session.t)
        status = ctrl.update(session.state.pose, session.t, session.dt)
        if status.state in (DONE, LOST):
            break
        accel = float(
            np.clip(
                (status.target_speed - session.state.speed) / session.dt,
                -session.geometry.max_accel,
                session.geometry.max_accel,
            )
        )
        session.apply_control(status.target_steer, accel)
        session.step_tick()
    # roll to a stop so the recorded final pose is a parked pose
    while abs(session.state.speed) > 1e-3 and session.t < t_end + 2.0:
        session.apply_control(0.0, float(np.clip(-session.state.speed / session.dt, -session.geometry.max_accel, session.geometry.max_accel)))
        session.step_tick()
    session.apply_control(0.0, 0.0)
