"""Box tracking with a constant-velocity Kalman filter per track.

State is [u, v, s, r, du, dv, ds]: box center, area, aspect ratio, and their
velocities (aspect held constant). Detections associate to predicted boxes by
IoU through an optimal assignment, gated so poor overlaps spawn new tracks
instead of corrupting old ones. Updates use the Joseph form so covariance
stays symmetric positive definite no matter how degenerate the gain gets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .perception import Detection, iou


@dataclass(frozen=True)
class TrackerConfig:
    max_age: int = 8
    min_hits: int = 2
    iou_gate: float = 0.3


def box_to_z(box) -> np.ndarray:
    x0, y0, x1, y1 = box
    w = max(x1 - x0, 1e-6)
    h = max(y1 - y0, 1e-6)
    return np.array([x0 + w / 2.0, y0 + h / 2.0, w * h, w / h])


def z_to_box(z) -> tuple[float, float, float, float]:
    u, v, s, r = float(z[0]), float(z[1]), float(z[2]), float(z[3])
    s = max(s, 1e-6)
    r = max(r, 1e-6)
    w = np.sqrt(s * r)
    h = s / w
    return (u - w / 2.0, v - h / 2.0, u + w / 2.0, v + h / 2.0)


_F = np.eye(7)
_F[0, 4] = _F[1, 5] = _F[2, 6] = 1.0
_H = np.zeros((4, 7))
_H[0, 0] = _H[1, 1] = _H[2, 2] = _H[3, 3] = 1.0

_R = np.diag([1.0, 1.0, 10.0, 10.0])
_Q = np.diag([1.0, 1.0, 1.0, 0.01, 0.01, 0.01, 1e-4])


def _initial_covariance() -> np.ndarray:
    P = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])
    return P


class Track:
    def __init__(self, track_id: int, det: Detection):
        self.track_id = track_id
        self.x = np.zeros(7)
        self.x[:4] = box_to_z(det.box)
        self.P = _initial_covariance()
        self.hits = 1
        self.age = 0
        self.time_since_update = 0
        self.quality = det.quality
        self.camera_id = det.camera_id

    def predict(self) -> None:
        # keep area from going negative under a shrinking velocity
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0
        self.x = _F @ self.x
        self.P = _F @ self.P @ _F.T + _Q
        self.age += 1
        self.time_since_update += 1

    def update(self, det: Detection) -> None:
        z = box_to_z(det.box)
        y = z - _H @ self.x
        S = _H @ self.P @ _H.T + _R
        K = self.P @ _H.T @ np.linalg.solve(S, np.eye(4))
        self.x = self.x + K @ y
        I_KH = np.eye(7) - K @ _H
        self.P = I_KH @ self.P @ I_KH.T + K @ _R @ K.T
        self.hits += 1
        self.time_since_update = 0
        self.quality = 0.7 * self.quality + 0.3 * det.quality

    @property
    def box(self) -> tuple[float, float, float, float]:
        return z_to_box(self.x[:4])


@dataclass(frozen=True)
class TrackSnapshot:
    track_id: int
    camera_id: str
    box: tuple[float, float, float, float]
    quality: float
    hits: int
    age: int
    time_since_update: int
    confirmed: bool


def associate(track_boxes, det_boxes, gate: float) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Optimal IoU matching. Returns (pairs, unmatched_tracks, unmatched_dets).

    Sub-gate overlaps are zeroed before assignment, so dropping below-gate
    pairs afterwards cannot break optimality of the kept ones.
    """
    if not track_boxes or not det_boxes:
        return [], list(range(len(track_boxes))), list(range(len(det_boxes)))
    m = np.zeros((len(track_boxes), len(det_boxes)))
    for i, tb in enumerate(track_boxes):
        for j, db in enumerate(det_boxes):
            v = iou(tb, db)
            m[i, j] = v if v >= gate else 0.0
    rows, cols = linear_sum_assignment(-m)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if m[i, j] >= gate]
    matched_t = {i for i, _ in pairs}
    matched_d = {j for _, j in pairs}
    un_t = [i for i in range(len(track_boxes)) if i not in matched_t]
    un_d = [j for j in range(len(det_boxes)) if j not in matched_d]
    return pairs, un_t, un_d


class PadTracker:
    """Single-camera tracker; sessions hold one per camera."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.tracks: list[Track] = []
        self._next_id = 1

    def step(self, detections: list[Detection]) -> list[TrackSnapshot]:
        for tr in self.tracks:
            tr.predict()
        pairs, _, un_d = associate(
            [tr.box for tr in self.tracks], [d.box for d in detections], self.config.iou_gate
        )
        for ti, di in pairs:
            self.tracks[ti].update(detections[di])
        for di in un_d:
            self.tracks.append(Track(self._next_id, detections[di]))
            self._next_id += 1
        self.tracks = [tr for tr in self.tracks if tr.time_since_update <= self.config.max_age]
        return self.snapshots()

    def snapshots(self) -> list[TrackSnapshot]:
        out = []
        for tr in self.tracks:
            out.append(
                TrackSnapshot(
                    track_id=tr.track_id,
                    camera_id=tr.camera_id,
                    box=tr.box,
                    quality=tr.quality,
                    hits=tr.hits,
                    age=tr.age,
                    time_since_update=tr.time_since_update,
                    confirmed=tr.hits >= self.config.min_hits,
                )
            )
        return out


def best_confirmed(snapshots: list[TrackSnapshot]) -> TrackSnapshot | None:
    """Freshest confirmed track, quality breaking ties."""
    live = [s for s in snapshots if s.confirmed]
    if not live:
        return None
    return min(live, key=lambda s: (s.time_since_update, -s.quality))
