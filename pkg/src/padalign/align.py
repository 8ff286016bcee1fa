"""Automated final alignment onto the chargepad.

Planning is Dubins CSC built geometrically from turning circles: same-side
pairs use the external tangent, opposite-side pairs the internal tangent, and
the shortest valid word wins. When the direct word would loop (goal too close
or too lateral for the turning radius), the controller first backs straight
up to buy room, then replans.

The pad estimate is smoothed in the dead-reckoned odometry frame so vehicle
motion between detections cannot smear it. The final stretch is driven blind:
once the remaining path is shorter than the under-body horizon the plan is
frozen and followed on odometry alone, because no camera can see a pad that
is underneath the vehicle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Pose2, compose2, wrap_angle
from .vehicle import VehicleGeometry, coil_position


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class AlignConfig:
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


# ---------------------------------------------------------------------------
# dubins


@dataclass(frozen=True)
class Segment:
    curvature: float  # signed 1/R; 0 for straight
    length: float  # arc length, >= 0


@dataclass
class DubinsPath:
    start: Pose2
    segments: tuple[Segment, Segment, Segment]

    @property
    def length(self) -> float:
        return sum(s.length for s in self.segments)

    def sample(self, spacing: float = 0.01) -> np.ndarray:
        """Waypoints (n, 3) along the path including both endpoints."""
        pts = [(self.start.x, self.start.y, self.start.heading)]
        pose = self.start
        for seg in self.segments:
            n = max(1, int(math.ceil(seg.length / spacing)))
            for i in range(1, n + 1):
                pose_i = _advance(pose, seg.curvature, seg.length * i / n)
                pts.append((pose_i.x, pose_i.y, pose_i.heading))
            pose = _advance(pose, seg.curvature, seg.length)
        return np.array(pts)

    def end(self) -> Pose2:
        pose = self.start
        for seg in self.segments:
            pose = _advance(pose, seg.curvature, seg.length)
        return pose


def _advance(pose: Pose2, curvature: float, s: float) -> Pose2:
    """Exact rollout of a constant-curvature segment."""
    if abs(curvature) < 1e-12:
        return Pose2(pose.x + s * math.cos(pose.heading), pose.y + s * math.sin(pose.heading), pose.heading)
    R = 1.0 / curvature
    dth = curvature * s
    return Pose2(
        pose.x + R * (math.sin(pose.heading + dth) - math.sin(pose.heading)),
        pose.y - R * (math.cos(pose.heading + dth) - math.cos(pose.heading)),
        pose.heading + dth,
    )


def _rot90(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


def _arc_angle(from_heading: float, to_heading: float, turn: float) -> float:
    """Swept angle in [0, 2pi) turning in direction `turn` (+1 ccw, -1 cw)."""
    d = (to_heading - from_heading) * turn
    return d % (2.0 * math.pi)


def dubins_csc(start: Pose2, goal: Pose2, radius: float) -> DubinsPath:
    """Shortest of the four CSC words at the given turning radius."""
    if radius <= 0:
        raise PlanError("turning radius must be positive")
    best: DubinsPath | None = None
    p0 = np.array([start.x, start.y])
    p1 = np.array([goal.x, goal.y])
    n0 = np.array([-math.sin(start.heading), math.cos(start.heading)])
    n1 = np.array([-math.sin(goal.heading), math.cos(goal.heading)])
    for s1 in (1.0, -1.0):
        c1 = p0 + radius * s1 * n0
        for s2 in (1.0, -1.0):
            c2 = p1 + radius * s2 * n1
            C = c2 - c1
            D = float(np.linalg.norm(C))
            if s1 == s2:
                if D < 1e-12:
                    t_hat = np.array([math.cos(start.heading), math.sin(start.heading)])
                    lam = 0.0
                else:
                    t_hat = C / D
                    lam = D
            else:
                if D < 2.0 * radius:
                    continue
                gamma = math.asin(2.0 * radius / D) * (1.0 if s1 > 0 else -1.0)
                cg, sg = math.cos(gamma), math.sin(gamma)
                Ch = C / D
                t_hat = np.array([Ch[0] * cg - Ch[1] * sg, Ch[0] * sg + Ch[1] * cg])
                lam = D * cg
            psi = math.atan2(t_hat[1], t_hat[0])
            a1 = _arc_angle(start.heading, psi, s1)
            a2 = _arc_angle(psi, goal.heading, s2)
            path = DubinsPath(
                start=start,
                segments=(
                    Segment(curvature=s1 / radius, length=a1 * radius),
                    Segment(curvature=0.0, length=lam),
                    Segment(curvature=s2 / radius, length=a2 * radius),
                ),
            )
            if best is None or path.length < best.length:
                best = path
    if best is None:
        raise PlanError("no CSC word feasible")
    return best


def path_is_loopy(path: DubinsPath) -> bool:
    """Direct word wraps too far around the circles to be a sane approach."""
    arc = sum(abs(s.curvature) * s.length for s in path.segments)
    return arc > 1.5 * math.pi


# ---------------------------------------------------------------------------
# goal construction


def alignment_goal(pad: Pose2, vehicle_heading: float, geometry: VehicleGeometry) -> Pose2:
    """Rear-axle goal pose that parks the coil on the pad center.

    The pad is symmetric along its length, so the approach heading is the pad
    axis nearest the vehicle's current heading (mod pi).
    """
    h = pad.heading
    if abs(wrap_angle(h - vehicle_heading)) > math.pi / 2:
        h = wrap_angle(h + math.pi)
    ox, oy = geometry.coil_offset
    gx = pad.x - (ox * math.cos(h) - oy * math.sin(h))
    gy = pad.y - (ox * math.sin(h) + oy * math.cos(h))
    return Pose2(gx, gy, h)


# ---------------------------------------------------------------------------
# estimate smoothing


class PadEstimator:
    """EMA over pad pose measurements, held in the odometry frame."""

    def __init__(self, config: AlignConfig):
        self.config = config
        self._est: Pose2 | None = None
        self._last_update: float | None = None

    def update(self, pad_in_vehicle: Pose2, odom_pose: Pose2, t: float) -> None:
        meas = compose2(odom_pose, pad_in_vehicle)
        if self._est is None:
            self._est = meas
        else:
            a = self.config.estimate_smoothing
            self._est = Pose2(
                (1 - a) * self._est.x + a * meas.x,
                (1 - a) * self._est.y + a * meas.y,
                self._est.heading + a * wrap_angle(meas.heading - self._est.heading),
            )
        self._last_update = t

    def pad_in_odom(self) -> Pose2 | None:
        return self._est

    def age(self, t: float) -> float:
        return math.inf if self._last_update is None else t - self._last_update

    def reset(self) -> None:
        self._est = None
        self._last_update = None


# ---------------------------------------------------------------------------
# pure pursuit


class PurePursuit:
    def __init__(self, waypoints: np.ndarray, geometry: VehicleGeometry, config: AlignConfig):
        self.wp = waypoints
        self.geometry = geometry
        self.config = config
        seg = np.diff(waypoints[:, :2], axis=0)
        self.arc = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])

    @property
    def total_length(self) -> float:
        return float(self.arc[-1])

    def progress(self, pose: Pose2) -> float:
        d = np.hypot(self.wp[:, 0] - pose.x, self.wp[:, 1] - pose.y)
        return float(self.arc[int(np.argmin(d))])

    def remaining(self, pose: Pose2) -> float:
        return max(0.0, self.total_length - self.progress(pose))

    def control(self, pose: Pose2) -> tuple[float, float]:
        """(target_speed, target_steer) toward the lookahead point.

        Past the path end the carrot continues along the goal heading, so the
        endgame pulls heading onto the goal axis instead of orbiting the last
        waypoint.
        """
        s = self.progress(pose)
        s_look = s + self.config.lookahead
        if s_look <= self.total_length:
            i = min(int(np.searchsorted(self.arc, s_look)), len(self.wp) - 1)
            target = self.wp[i, :2]
        else:
            over = s_look - self.total_length
            gh = self.wp[-1, 2]
            target = self.wp[-1, :2] + over * np.array([math.cos(gh), math.sin(gh)])
        dx = target[0] - pose.x
        dy = target[1] - pose.y
        c, si = math.cos(-pose.heading), math.sin(-pose.heading)
        lx = c * dx - si * dy
        ly = si * dx + c * dy
        dist = math.hypot(lx, ly)
        remaining = self.remaining(pose)
        if dist < 1e-6 or remaining <= 1e-9:
            return 0.0, 0.0
        alpha = math.atan2(ly, lx)
        steer = math.atan2(2.0 * self.geometry.wheelbase * math.sin(alpha), max(dist, 0.3))
        steer = float(np.clip(steer, -self.geometry.max_steer, self.geometry.max_steer))
        v = min(self.config.approach_speed, self.config.speed_gain * remaining + 0.05)
        return v, steer


# ---------------------------------------------------------------------------
# controller

SEARCH = "search"
DRIVE = "drive"
REPOSITION = "reposition"
DEADRECKON = "deadreckon"
DONE = "done"
LOST = "lost"


@dataclass
class ControllerStatus:
    state: str
    target_speed: float
    target_steer: float
    remaining: float
    replans: int


class AlignmentController:
    """Drives the rear axle so the coil parks on the estimated pad center."""

    def __init__(self, geometry: VehicleGeometry, config: AlignConfig | None = None):
        self.geometry = geometry
        self.config = config or AlignConfig()
        self.estimator = PadEstimator(self.config)
        self.state = SEARCH
        self.pursuit: PurePursuit | None = None
        self._planned_from: Pose2 | None = None
        self._goal: Pose2 | None = None
        self._search_started: float | None = None
        self._reverse_left = 0.0
        self.replans = 0
        self.radius = geometry.min_turn_radius * self.config.turn_radius_margin

    def observe(self, pad_in_vehicle: Pose2 | None, odom_pose: Pose2, t: float) -> None:
        if pad_in_vehicle is not None and self.state != DEADRECKON:
            self.estimator.update(pad_in_vehicle, odom_pose, t)

    def _plan(self, odom_pose: Pose2) -> None:
        """Plan curves to a pre-goal, then a straight run-in onto the goal.

        The final stretch is driven blind (pad under the body), so the path
        must end straight: curvature there would have to be flown open loop.
        The run-in is longer than the blind distance, which also gives pure
        pursuit room to settle heading before measurements stop.
        """
        pad = self.estimator.pad_in_odom()
        goal = alignment_goal(pad, odom_pose.heading, self.geometry)
        cg, sg = math.cos(goal.heading), math.sin(goal.heading)
        # longest straight first; never shorter than the blind stretch
        floor = self.config.deadreckon_distance + 0.15
        ladder = np.arange(self.config.approach_run_in, floor - 1e-9, -0.05)
        for run_in in ladder:
            pre_goal = Pose2(goal.x - run_in * cg, goal.y - run_in * sg, goal.heading)
            path = dubins_csc(odom_pose, pre_goal, self.radius)
            if not path_is_loopy(path):
                break
        else:
            self.state = REPOSITION
            self._reverse_left = self.config.reposition_distance
            self.pursuit = None
            return
        wp = path.sample()
        s = np.arange(0.01, run_in + 1e-9, 0.01)
        tail = np.column_stack(
            [pre_goal.x + s * cg, pre_goal.y + s * sg, np.full(len(s), goal.heading)]
        )
        self.pursuit = PurePursuit(np.vstack([wp, tail]), self.geometry, self.config)
        self._planned_from = pad
        self._goal = goal
        self.state = DRIVE
        self.replans += 1

    def _dock(self, pose: Pose2) -> tuple[float, float, float]:
        """(speed, steer, along-axis remaining) steering the coil onto the goal axis.

        Pure pursuit alone leaves the blind segment with whatever heading lag it
        accumulated on the last arc, so the endgame regulates the coil point
        onto the line through the goal instead: the carrot sits on that line a
        fixed lead ahead of the coil's projection, which nulls cross-track and
        heading together and leaves a straight final meter.
        """
        g = self._goal
        cg, sg = math.cos(g.heading), math.sin(g.heading)
        dx = g.x - pose.x
        dy = g.y - pose.y
        s_rem = dx * cg + dy * sg
        # carrot a fixed lead ahead of the rear axle's projection onto the axis
        lead = self.config.dock_lead
        rx = g.x + (lead - s_rem) * cg - pose.x
        ry = g.y + (lead - s_rem) * sg - pose.y
        c, si = math.cos(-pose.heading), math.sin(-pose.heading)
        lx = c * rx - si * ry
        ly = si * rx + c * ry
        alpha = math.atan2(ly, lx)
        dist = math.hypot(lx, ly)
        steer = math.atan2(2.0 * self.geometry.wheelbase * math.sin(alpha), max(dist, 0.3))
        steer = float(np.clip(steer, -self.geometry.max_steer, self.geometry.max_steer))
        v = min(self.config.dock_speed, self.config.speed_gain * max(s_rem, 0.0) + 0.05)
        return v, steer, s_rem

    def update(self, odom_pose: Pose2, t: float, dt: float) -> ControllerStatus:
        cfg = self.config
        if self.state in (DONE, LOST):
            return ControllerStatus(self.state, 0.0, 0.0, 0.0, self.replans)

        if self.state == SEARCH:
            if self._search_started is None:
                self._search_started = t
            if self.estimator.pad_in_odom() is not None:
                self._plan(odom_pose)
            elif t - self._search_started > cfg.lost_target_timeout:
                self.state = LOST
                return ControllerStatus(self.state, 0.0, 0.0, 0.0, self.replans)
            else:
                return ControllerStatus(self.state, 0.0, 0.0, 0.0, self.replans)

        if self.state == REPOSITION:
            if self._reverse_left > 0:
                self._reverse_left -= abs(cfg.reverse_speed) * dt
                return ControllerStatus(self.state, -cfg.reverse_speed, 0.0, self._reverse_left, self.replans)
            self._plan(odom_pose)
            if self.state == REPOSITION:
                # still loopy after backing up: buy more room
                self._reverse_left = cfg.reposition_distance
                return ControllerStatus(self.state, -cfg.reverse_speed, 0.0, self._reverse_left, self.replans)

        if self.state == DRIVE:
            if self.estimator.age(t) > cfg.lost_target_timeout:
                self.state = LOST
                return ControllerStatus(self.state, 0.0, 0.0, 0.0, self.replans)
            pad = self.estimator.pad_in_odom()
            moved = math.hypot(pad.x - self._planned_from.x, pad.y - self._planned_from.y)
            remaining = self.pursuit.remaining(odom_pose)
            # too close to fit a fresh run-in: ride the plan, fix up at handoff
            can_replan = remaining > cfg.deadreckon_distance + 0.5
            if moved > cfg.replan_threshold and can_replan:
                self._plan(odom_pose)
                if self.state != DRIVE:
                    return self.update(odom_pose, t, dt)
                remaining = self.pursuit.remaining(odom_pose)
            if remaining <= cfg.deadreckon_distance:
                # last estimate wins: re-aim the docking axis, same mod-pi branch
                self._goal = alignment_goal(pad, self._goal.heading, self.geometry)
                self.state = DEADRECKON
            else:
                v, steer = self.pursuit.control(odom_pose)
                return ControllerStatus(DRIVE, v, steer, remaining, self.replans)

        if self.state == DEADRECKON:
            v, steer, remaining = self._dock(odom_pose)
            if remaining <= cfg.goal_tolerance / 2:
                self.state = DONE
                return ControllerStatus(DONE, 0.0, 0.0, 0.0, self.replans)
            return ControllerStatus(DEADRECKON, v, steer, remaining, self.replans)

        return ControllerStatus(self.state, 0.0, 0.0, 0.0, self.replans)
