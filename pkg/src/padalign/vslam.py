"""Teach-and-repeat sparse mapping on fisheye feature tracks.

Teach runs bundle adjustment over planar keyframe poses (x, y, heading) and
3D landmarks, observed as pixel features through one fisheye camera. The
first keyframe pins the gauge, so the map frame is the teach start frame.
Repeat relocalizes a pose-only solve against the frozen landmarks.

The solver is Levenberg-Marquardt on Huber-weighted reprojection residuals
with analytic Jacobians (finite-difference-checked in tests) and sparse
normal equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, identity
from scipy.sparse.linalg import spsolve

from .geom import (
    FisheyeCamera,
    Pose2,
    compose2,
    compose3,
    inverse2,
    pixel_rays,
    pose2_to_pose3,
    project_cam,
    wrap_angle,
)
from .world import World


class SlamError(ValueError):
    pass


@dataclass(frozen=True)
class SlamConfig:
    keyframe_spacing: float = 0.5
    feature_range: float = 13.0
    huber_delta: float = 2.0
    max_iterations: int = 30
    min_keyframes: int = 5
    min_tracks: int = 20
    min_reloc_inliers: int = 12
    max_reloc_rms: float = 2.0
    reloc_inlier_px: float = 3.0
    # weak odometry prior between consecutive keyframes; pins the scale the
    # feature terms cannot observe without drowning their corrections
    odom_trans_weight: float = 30.0  # px per meter of relative-pose error
    odom_rot_weight: float = 60.0  # px per radian


@dataclass
class TaughtMap:
    keyframe_poses: list[Pose2]
    landmarks: dict[int, np.ndarray]
    pad_anchor: Pose2
    camera_id: str
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "keyframe_poses": [[p.x, p.y, p.heading] for p in self.keyframe_poses],
            "landmarks": {str(k): [float(x) for x in v] for k, v in sorted(self.landmarks.items())},
            "pad_anchor": [self.pad_anchor.x, self.pad_anchor.y, self.pad_anchor.heading],
            "camera_id": self.camera_id,
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaughtMap":
        return cls(
            keyframe_poses=[Pose2(*p) for p in d["keyframe_poses"]],
            landmarks={int(k): np.asarray(v, dtype=float) for k, v in d["landmarks"].items()},
            pad_anchor=Pose2(*d["pad_anchor"]),
            camera_id=d["camera_id"],
            stats=dict(d.get("stats", {})),
        )


@dataclass(frozen=True)
class RelocResult:
    pose: Pose2
    inliers: int
    rms: float


# ---------------------------------------------------------------------------
# observation model


def observe_features(
    world: World,
    vehicle_pose: Pose2,
    cam: FisheyeCamera,
    rng: np.random.Generator | None = None,
    pixel_noise: float = 0.0,
    feature_range: float = 13.0,
) -> list[tuple[int, float, float]]:
    """Visible wall features as (descriptor_id, u, v), noisy if asked."""
    if not world.landmarks:
        return []
    C = compose3(pose2_to_pose3(vehicle_pose), cam.extrinsic)
    R = C.matrix()
    pts = np.stack([lm.position for lm in world.landmarks])
    rel = pts - C.t[None, :]
    dist = np.linalg.norm(rel, axis=1)
    p_cam = rel @ R
    uv, valid = project_cam(cam, p_cam)
    w, h = cam.resolution
    keep = valid & (dist <= feature_range) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    out = []
    for i in np.nonzero(keep)[0]:
        u, v = uv[i]
        if pixel_noise > 0 and rng is not None:
            u += rng.normal(0.0, pixel_noise)
            v += rng.normal(0.0, pixel_noise)
        out.append((int(world.landmarks[i].descriptor_id), float(u), float(v)))
    return out


# ---------------------------------------------------------------------------
# projection jacobians


def project_point_jacobian(cam: FisheyeCamera, p_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Equidistant projection and its 2x3 Jacobian w.r.t. the camera point."""
    x, y, z = float(p_cam[0]), float(p_cam[1]), float(p_cam[2])
    rho2 = x * x + y * y
    rho = math.sqrt(rho2)
    n2 = rho2 + z * z
    if rho < 1e-9:
        # on-axis: projection is flat at the principal point
        uv = np.array([cam.pp[0], cam.pp[1]])
        J = np.array([[cam.focal / max(z, 1e-9), 0.0, 0.0], [0.0, cam.focal / max(z, 1e-9), 0.0]])
        return uv, J
    theta = math.atan2(rho, z)
    g = cam.focal * theta / rho
    uv = np.array([cam.pp[0] + g * x, cam.pp[1] + g * y])
    dth = np.array([(z / n2) * (x / rho), (z / n2) * (y / rho), -rho / n2])
    drho = np.array([x / rho, y / rho, 0.0])
    dg = cam.focal * (dth * rho - theta * drho) / rho2
    J = np.array(
        [
            [g + x * dg[0], x * dg[1], x * dg[2]],
            [y * dg[0], g + y * dg[1], y * dg[2]],
        ]
    )
    return uv, J


def _pose_terms(kf: Pose2, cam: FisheyeCamera):
    """Rotation/translation pieces reused across the residuals of one keyframe."""
    c, s = math.cos(kf.heading), math.sin(kf.heading)
    R_kf = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    dR_kf = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    R_E = cam.extrinsic.matrix()
    t_E = cam.extrinsic.t
    R_C = R_kf @ R_E
    t_C = R_kf @ t_E + np.array([kf.x, kf.y, 0.0])
    return R_kf, dR_kf, R_E, t_E, R_C, t_C


def residual_and_jacobians(kf: Pose2, lm: np.ndarray, cam: FisheyeCamera, z_uv: np.ndarray):
    """Reprojection residual with Jacobians w.r.t. kf (x, y, heading) and landmark."""
    R_kf, dR_kf, R_E, t_E, R_C, t_C = _pose_terms(kf, cam)
    p_cam = R_C.T @ (lm - t_C)
    uv, J_pt = project_point_jacobian(cam, p_cam)
    r = uv - z_uv
    d_lm = J_pt @ R_C.T
    d_xy = -d_lm[:, :2]
    t_kf = np.array([kf.x, kf.y, 0.0])
    dp_dth = R_E.T @ dR_kf.T @ (lm - t_kf)
    d_th = J_pt @ dp_dth
    J_pose = np.column_stack([d_xy, d_th])
    return r, J_pose, d_lm, p_cam


def _project_only(kf: Pose2, lm: np.ndarray, cam: FisheyeCamera) -> np.ndarray:
    _, _, _, _, R_C, t_C = _pose_terms(kf, cam)
    p_cam = R_C.T @ (lm - t_C)
    uv, _ = project_point_jacobian(cam, p_cam)
    return uv


def _huber_weight(r_norm: float, delta: float) -> float:
    return 1.0 if r_norm <= delta else delta / r_norm


def _huber_cost(r_norm: np.ndarray, delta: float) -> float:
    quad = r_norm <= delta
    return float(np.sum(0.5 * r_norm[quad] ** 2) + np.sum(delta * (r_norm[~quad] - 0.5 * delta)))


# ---------------------------------------------------------------------------
# triangulation


def triangulate_two_view(o1, d1, o2, d2) -> np.ndarray | None:
    """Midpoint of the common perpendicular between two rays."""
    w0 = o1 - o2
    a = d1 @ d1
    b = d1 @ d2
    c = d2 @ d2
    d = d1 @ w0
    e = d2 @ w0
    den = a * c - b * b
    if den < 1e-9:
        return None
    s = (b * e - c * d) / den
    t = (a * e - b * d) / den
    if s < 0.05 or t < 0.05:
        return None
    p1 = o1 + s * d1
    p2 = o2 + t * d2
    return 0.5 * (p1 + p2)


def _init_landmarks(kf_poses: list[Pose2], frames, cam: FisheyeCamera) -> dict[int, np.ndarray]:
    seen: dict[int, list[tuple[int, float, float]]] = {}
    for k, obs in enumerate(frames):
        for did, u, v in obs:
            seen.setdefault(did, []).append((k, u, v))
    cams = []
    for kf in kf_poses:
        C = compose3(pose2_to_pose3(kf), cam.extrinsic)
        cams.append((C.matrix(), C.t))
    out: dict[int, np.ndarray] = {}
    for did, entries in seen.items():
        if len(entries) < 2:
            continue
        best = None
        # widest-baseline pair first, midpoint pair as fallback
        for (ka, ua, va), (kb, ub, vb) in ((entries[0], entries[-1]), (entries[0], entries[len(entries) // 2])):
            if ka == kb:
                continue
            Ra, ta = cams[ka]
            Rb, tb = cams[kb]
            da = Ra @ pixel_rays(cam, [(ua, va)])[0]
            db = Rb @ pixel_rays(cam, [(ub, vb)])[0]
            p = triangulate_two_view(ta, da, tb, db)
            if p is not None:
                best = p
                break
        if best is not None:
            out[did] = best
    return out


# ---------------------------------------------------------------------------
# bundle adjustment


def _assemble(kf_poses, lm_ids, lms, frames, cam, config: SlamConfig, odom_deltas=None):
    """Huber-weighted residual vector, sparse Jacobian, and robust cost."""
    delta = config.huber_delta
    lm_index = {did: j for j, did in enumerate(lm_ids)}
    K = len(kf_poses)
    n_params = 3 * (K - 1) + 3 * len(lm_ids)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    res: list[float] = []
    norms: list[float] = []
    row = 0
    for k, obs in enumerate(frames):
        kf = kf_poses[k]
        for did, u, v in obs:
            j = lm_index.get(did)
            if j is None:
                continue
            r, J_pose, J_lm, _ = residual_and_jacobians(kf, lms[j], cam, np.array([u, v]))
            rn = float(np.linalg.norm(r))
            norms.append(rn)
            w = math.sqrt(_huber_weight(rn, delta))
            res.extend((w * r).tolist())
            lcol = 3 * (K - 1) + 3 * j
            for rr in range(2):
                if k > 0:
                    pcol = 3 * (k - 1)
                    for cc in range(3):
                        rows.append(row + rr)
                        cols.append(pcol + cc)
                        vals.append(w * J_pose[rr, cc])
                for cc in range(3):
                    rows.append(row + rr)
                    cols.append(lcol + cc)
                    vals.append(w * J_lm[rr, cc])
            row += 2
    cost = _huber_cost(np.array(norms), delta)
    if odom_deltas is not None:
        kt, kr = config.odom_trans_weight, config.odom_rot_weight
        for k, meas in enumerate(odom_deltas):
            a, b = kf_poses[k], kf_poses[k + 1]
            est = compose2(inverse2(a), b)
            r3 = np.array(
                [
                    kt * (est.x - meas.x),
                    kt * (est.y - meas.y),
                    kr * wrap_angle(est.heading - meas.heading),
                ]
            )
            c, s = math.cos(a.heading), math.sin(a.heading)
            Ja = np.array(
                [
                    [kt * -c, kt * -s, kt * est.y],
                    [kt * s, kt * -c, kt * -est.x],
                    [0.0, 0.0, -kr],
                ]
            )
            Jb = np.array([[kt * c, kt * s, 0.0], [kt * -s, kt * c, 0.0], [0.0, 0.0, kr]])
            res.extend(r3.tolist())
            for rr in range(3):
                if k > 0:
                    for cc in range(3):
                        rows.append(row + rr)
                        cols.append(3 * (k - 1) + cc)
                        vals.append(Ja[rr, cc])
                for cc in range(3):
                    rows.append(row + rr)
                    cols.append(3 * k + cc)
                    vals.append(Jb[rr, cc])
            row += 3
            cost += 0.5 * float(r3 @ r3)
    J = coo_matrix((vals, (rows, cols)), shape=(row, n_params)).tocsr()
    r_vec = np.array(res)
    return J, r_vec, cost


def _unpack(x, kf_poses, lm_ids, lms):
    K = len(kf_poses)
    new_kf = [kf_poses[0]]
    for k in range(1, K):
        dx, dy, dth = x[3 * (k - 1): 3 * k]
        p = kf_poses[k]
        new_kf.append(Pose2(p.x + dx, p.y + dy, p.heading + dth))
    base = 3 * (K - 1)
    new_lms = [lms[j] + x[base + 3 * j: base + 3 * j + 3] for j in range(len(lm_ids))]
    return new_kf, new_lms


def bundle_adjust(kf_poses, frames, cam: FisheyeCamera, config: SlamConfig, odom_deltas=None):
    """LM over keyframes 1..K-1 and all triangulated landmarks.

    Returns (optimized keyframes, landmark dict, stats).
    """
    lms_init = _init_landmarks(kf_poses, frames, cam)
    lm_ids = sorted(lms_init.keys())
    lms = [lms_init[d] for d in lm_ids]
    if not lm_ids:
        raise SlamError("no landmarks could be triangulated")
    kf_poses = list(kf_poses)
    lam = 1e-3
    J, r, cost = _assemble(kf_poses, lm_ids, lms, frames, cam, config, odom_deltas)
    iters = 0
    for _ in range(config.max_iterations):
        iters += 1
        A = (J.T @ J).tocsc()
        g = J.T @ r
        if float(np.max(np.abs(g))) < 1e-9:
            break
        D = identity(A.shape[0], format="csc")
        D.setdiag(np.maximum(A.diagonal(), 1e-6))
        step = spsolve(A + lam * D, -g)
        new_kf, new_lms = _unpack(step, kf_poses, lm_ids, lms)
        J2, r2, cost2 = _assemble(new_kf, lm_ids, new_lms, frames, cam, config, odom_deltas)
        if cost2 < cost:
            rel = (cost - cost2) / max(cost, 1e-12)
            kf_poses, lms, J, r, cost = new_kf, new_lms, J2, r2, cost2
            lam = max(lam * 0.4, 1e-9)
            if rel < 1e-10:
                break
        else:
            lam *= 5.0
            if lam > 1e8:
                break
    rms = math.sqrt(float(np.mean(r * r))) if len(r) else 0.0
    stats = {"iterations": iters, "cost": cost, "weighted_rms_px": rms, "landmarks": len(lm_ids)}
    return kf_poses, {d: lms[j] for j, d in enumerate(lm_ids)}, stats


def teach(
    kf_odom_poses,
    frames,
    cam: FisheyeCamera,
    pad_in_start: Pose2,
    config: SlamConfig | None = None,
) -> TaughtMap:
    """Build a map from keyframed odometry and feature observations.

    The map frame is the first keyframe's frame; pad_in_start is the pad pose
    seen from that frame (known because the teach drive starts parked on it).
    """
    config = config or SlamConfig()
    if len(kf_odom_poses) < config.min_keyframes:
        raise SlamError(f"need at least {config.min_keyframes} keyframes, got {len(kf_odom_poses)}")
    if len(frames) != len(kf_odom_poses):
        raise SlamError("one feature frame per keyframe required")
    counts: dict[int, int] = {}
    for obs in frames:
        for did, _, _ in obs:
            counts[did] = counts.get(did, 0) + 1
    tracks = sum(1 for c in counts.values() if c >= 2)
    if tracks < config.min_tracks:
        raise SlamError(f"need at least {config.min_tracks} landmark tracks, got {tracks}")

    start = kf_odom_poses[0]
    rel = [compose2(inverse2(start), p) for p in kf_odom_poses]
    deltas = [compose2(inverse2(a), b) for a, b in zip(rel, rel[1:])]
    kf_opt, lms, stats = bundle_adjust(rel, frames, cam, config, odom_deltas=deltas)
    stats["tracks"] = tracks
    return TaughtMap(
        keyframe_poses=kf_opt,
        landmarks=lms,
        pad_anchor=pad_in_start,
        camera_id=cam.cam_id,
        stats=stats,
    )


# ---------------------------------------------------------------------------
# repeat


def _pose_only_solve(obs, landmarks, cam, init: Pose2, config: SlamConfig) -> tuple[Pose2, float]:
    pose = init
    lam = 1e-3
    pts = []
    zs = []
    for did, u, v in obs:
        p = landmarks.get(did)
        if p is not None:
            pts.append(p)
            zs.append((u, v))
    if len(pts) < 3:
        return init, math.inf
    for _ in range(25):
        Js = []
        rs = []
        norms = []
        for p, (u, v) in zip(pts, zs):
            r, J_pose, _, _ = residual_and_jacobians(pose, np.asarray(p), cam, np.array([u, v]))
            rn = float(np.linalg.norm(r))
            w = math.sqrt(_huber_weight(rn, config.huber_delta))
            Js.append(w * J_pose)
            rs.append(w * r)
            norms.append(rn)
        J = np.vstack(Js)
        r_vec = np.concatenate(rs)
        cost = _huber_cost(np.array(norms), config.huber_delta)
        A = J.T @ J + lam * np.diag(np.maximum(np.diag(J.T @ J), 1e-6))
        g = J.T @ r_vec
        if float(np.max(np.abs(g))) < 1e-9:
            break
        try:
            step = np.linalg.solve(A, -g)
        except np.linalg.LinAlgError:
            break
        cand = Pose2(pose.x + step[0], pose.y + step[1], pose.heading + step[2])
        norms2 = [np.linalg.norm(_project_only(cand, np.asarray(p), cam) - np.array(z)) for p, z in zip(pts, zs)]
        cost2 = _huber_cost(np.array(norms2), config.huber_delta)
        if cost2 < cost:
            pose = cand
            lam = max(lam * 0.4, 1e-9)
            if (cost - cost2) / max(cost, 1e-12) < 1e-12:
                break
        else:
            lam *= 5.0
            if lam > 1e8:
                break
    final = [np.linalg.norm(_project_only(pose, np.asarray(p), cam) - np.array(z)) for p, z in zip(pts, zs)]
    return pose, float(np.mean(np.square(final)) ** 0.5)


def relocalize(
    taught: TaughtMap,
    obs,
    cam: FisheyeCamera,
    config: SlamConfig | None = None,
    prior: Pose2 | None = None,
) -> RelocResult | None:
    """Pose-only solve against the frozen map. None when confidence is too low."""
    config = config or SlamConfig()
    inits = [prior] if prior is not None else list(taught.keyframe_poses[:: max(1, len(taught.keyframe_poses) // 8)])
    best: tuple[float, Pose2, int] | None = None
    for init in inits:
        pose, _ = _pose_only_solve(obs, taught.landmarks, cam, init, config)
        norms = []
        for did, u, v in obs:
            p = taught.landmarks.get(did)
            if p is None:
                continue
            norms.append(np.linalg.norm(_project_only(pose, np.asarray(p), cam) - np.array([u, v])))
        if not norms:
            continue
        norms = np.array(norms)
        inl = norms < config.reloc_inlier_px
        if int(inl.sum()) < config.min_reloc_inliers:
            continue
        rms = float(np.sqrt(np.mean(norms[inl] ** 2)))
        if rms > config.max_reloc_rms:
            continue
        if best is None or rms < best[0]:
            best = (rms, pose, int(inl.sum()))
    if best is None:
        return None
    rms, pose, inliers = best
    return RelocResult(pose=pose, inliers=inliers, rms=rms)


def query_pad(taught: TaughtMap, vehicle_pose_in_map: Pose2) -> Pose2:
    """Pad pose in the vehicle frame, via the taught anchor."""
    return compose2(inverse2(vehicle_pose_in_map), taught.pad_anchor)
