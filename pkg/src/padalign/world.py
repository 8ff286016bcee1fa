"""Static world model: chargepad, obstacles, landmarks, surfaces.

The world is laid out on the ground plane z = 0 in world coordinates.
Boxes (the pad and obstacles) stand on the ground; landmarks are elevated
points on surrounding structure that the mapping pipeline can observe.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose2, rot2, transform2
from .rngstream import stream

# segmentation class codes shared by the renderer and annotation pipeline
SEG_GROUND = 0
SEG_PAD = 1
SEG_OBSTACLE = 2
SEG_SKY = 3

SURFACES = ("indoor", "outdoor", "synthetic")


class WorldError(ValueError):
    """Raised when a world description violates an invariant."""


@dataclass(frozen=True)
class ChargepadSpec:
    """Ground charging pad. Length runs along the pad's own x axis (the
    intended approach direction), width across it."""

    pose: Pose2 = field(default_factory=Pose2)
    length: float = 0.76
    width: float = 0.62
    height: float = 0.06
    appearance_id: str = "aruco_a"
    appearance_kind: str = "aruco_like"

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.length, self.width, self.height)


@dataclass(frozen=True)
class Obstacle:
    pose: Pose2
    size: tuple[float, float, float]  # (length, width, height), standing on ground
    # surfaces the segmenter mistakes for a chargepad (painted markings,
    # reflective panels) land in the pad class; ordinary structure does not
    pad_like: bool = False


@dataclass(frozen=True)
class Landmark:
    lm_id: int
    position: np.ndarray  # (3,)
    descriptor_id: int


@dataclass(frozen=True)
class World:
    surface: str = "indoor"
    pad: ChargepadSpec = field(default_factory=ChargepadSpec)
    obstacles: tuple[Obstacle, ...] = ()
    landmarks: tuple[Landmark, ...] = ()
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((-10.0, 25.0), (-10.0, 10.0))


# ---------------------------------------------------------------------------
# validation


def _rect_corners(pose: Pose2, length: float, width: float) -> np.ndarray:
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    return transform2(pose, local)


def _rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads (corner arrays (4, 2))."""
    for quad in (a, b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def validate_world(world: World) -> None:
    if world.surface not in SURFACES:
        raise WorldError(f"surface must be one of {SURFACES}, got {world.surface!r}")
    (x0, x1), (y0, y1) = world.bounds
    if not (x0 < x1 and y0 < y1):
        raise WorldError("bounds must be non-degenerate")
    if not (x0 <= world.pad.pose.x <= x1 and y0 <= world.pad.pose.y <= y1):
        raise WorldError("pad lies outside world bounds")
    if min(world.pad.length, world.pad.width, world.pad.height) <= 0:
        raise WorldError("pad dimensions must be positive")
    pad_rect = _rect_corners(world.pad.pose, world.pad.length, world.pad.width)
    for i, obs in enumerate(world.obstacles):
        if min(obs.size) <= 0:
            raise WorldError(f"obstacles[{i}].size must be positive")
        if _rects_overlap(pad_rect, _rect_corners(obs.pose, obs.size[0], obs.size[1])):
            raise WorldError(f"obstacles[{i}] overlaps the pad footprint")
    seen = set()
    for lm in world.landmarks:
        if lm.descriptor_id in seen:
            raise WorldError(f"duplicate landmark descriptor {lm.descriptor_id}")
        seen.add(lm.descriptor_id)
        if lm.position[2] <= 0:
            raise WorldError(f"landmark {lm.lm_id} must sit above the ground")


# ---------------------------------------------------------------------------
# landmark scatter


def scatter_landmarks(
    seed: int,
    count: int = 140,
    x_range: tuple[float, float] = (-2.0, 16.0),
    wall_offset: float = 5.0,
    height_range: tuple[float, float] = (0.3, 2.5),
    min_separation: float = 0.35,
) -> tuple[Landmark, ...]:
    """Poisson-disk style dart throwing on two walls flanking the corridor."""
    rng = stream(seed, "world", "landmarks")
    placed: list[np.ndarray] = []
    out: list[Landmark] = []
    attempts = 0
    while len(out) < count and attempts < count * 200:
        attempts += 1
        side = 1.0 if rng.random() < 0.5 else -1.0
        p = np.array(
            [
                rng.uniform(*x_range),
                side * wall_offset + rng.normal(0.0, 0.05),
                rng.uniform(*height_range),
            ]
        )
        if any(np.linalg.norm(p - q) < min_separation for q in placed):
            continue
        placed.append(p)
        out.append(Landmark(lm_id=len(out), position=p, descriptor_id=len(out)))
    return tuple(out)


# ---------------------------------------------------------------------------
# procedural appearance


def _id_salt(appearance_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(appearance_id.encode(), digest_size=4).digest(), "little")


def pad_texture_at(appearance_kind: str, appearance_id: str, u, v) -> np.ndarray:
    """Deterministic pad top-surface color at normalized coords u, v in [0, 1].

    Accepts scalars or arrays; returns (..., 3) float RGB in [0, 1].
    """
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0 - 1e-9)
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0 - 1e-9)
    salt = _id_salt(appearance_id)
    if appearance_kind == "aruco_like":
        n = 6
        cu = (u * n).astype(int)
        cv = (v * n).astype(int)
        border = (cu == 0) | (cv == 0) | (cu == n - 1) | (cv == n - 1)
        h = (cu * 73856093) ^ (cv * 19349663) ^ salt
        h = (h * 2654435761) & 0xFFFFFFFF  # avalanche so the salt reaches every cell
        black = (h >> 16) % 2 == 0
        # center cell is always dark so every marker keeps a high-contrast core
        center = (cu == n // 2) & (cv == n // 2)
        lum = np.where(border, 0.92, np.where(center, 0.08, np.where(black, 0.08, 0.92)))
        return np.stack([lum, lum, lum], axis=-1)
    if appearance_kind == "logo_like":
        h1 = ((salt >> 2) % 97) / 97.0
        h2 = ((salt >> 9) % 89) / 89.0
        tone_a = np.array([0.15 + 0.3 * h1, 0.2, 0.55 + 0.35 * h2])
        tone_b = np.array([0.85, 0.82, 0.78])
        r = np.hypot(u - 0.5, v - 0.5) / 0.42
        w = np.clip(3.0 * (1.0 - r), 0.0, 1.0)
        w = w * w * (3 - 2 * w)
        return w[..., None] * tone_a + (1.0 - w[..., None]) * tone_b
    if appearance_kind == "plain":
        g = 0.35 + 0.3 * ((salt % 101) / 101.0)
        base = np.array([g, g * 0.98, g * 0.95])
        return np.broadcast_to(base, np.shape(u) + (3,)).copy()
    raise WorldError(f"unknown appearance kind {appearance_kind!r}")


def ground_color(surface: str, x, y) -> np.ndarray:
    """Viewpoint-stable procedural ground color (world-anchored hash jitter)."""
    base = {
        "indoor": np.array([0.48, 0.47, 0.45]),
        "outdoor": np.array([0.38, 0.37, 0.36]),
        "synthetic": np.array([0.50, 0.50, 0.52]),
    }[surface]
    ix = np.floor(np.asarray(x, dtype=float) * 8.0).astype(np.int64)
    iy = np.floor(np.asarray(y, dtype=float) * 8.0).astype(np.int64)
    h = (ix * 73856093) ^ (iy * 19349663)
    jitter = ((h % 256) / 255.0 - 0.5) * 0.07
    return np.clip(base + jitter[..., None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# ray casting


@dataclass(frozen=True)
class Hit:
    t: float
    seg_class: int
    part: str  # "ground" | "pad_top" | "pad_side" | "obstacle" | "sky"
    point: np.ndarray | None


def _ray_box(origin: np.ndarray, direction: np.ndarray, pose: Pose2, size) -> tuple[float, int] | None:
    """Slab intersection with a ground-standing oriented box.

    Returns (t_enter, entry_axis) or None. entry_axis: 0=x, 1=y, 2=z slab.
    """
    l, w, h = size
    R = rot2(-pose.heading)
    o2 = R @ (origin[:2] - np.array([pose.x, pose.y]))
    d2 = R @ direction[:2]
    o = np.array([o2[0], o2[1], origin[2]])
    d = np.array([d2[0], d2[1], direction[2]])
    lo = np.array([-l / 2.0, -w / 2.0, 0.0])
    hi = np.array([l / 2.0, w / 2.0, h])
    t_near, t_far = -math.inf, math.inf
    axis = -1
    for k in range(3):
        if abs(d[k]) < 1e-12:
            if o[k] < lo[k] or o[k] > hi[k]:
                return None
            continue
        t1 = (lo[k] - o[k]) / d[k]
        t2 = (hi[k] - o[k]) / d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > t_near:
            t_near, axis = t1, k
        t_far = min(t_far, t2)
        if t_near > t_far:
            return None
    if t_far < 1e-9:
        return None
    t_hit = t_near if t_near > 1e-9 else t_far
    return (t_hit, axis)


def occupancy_hit(world: World, origin, direction) -> Hit:
    """Nearest surface along a single ray. Reference implementation; the
    renderer carries a vectorized equivalent."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    best_t = math.inf
    best = ("sky", SEG_SKY)
    if d[2] < -1e-12:
        t = -o[2] / d[2]
        if t > 1e-9:
            best_t, best = t, ("ground", SEG_GROUND)
    hit = _ray_box(o, d, world.pad.pose, world.pad.dims)
    if hit is not None and hit[0] < best_t:
        part = "pad_top" if hit[1] == 2 else "pad_side"
        best_t, best = hit[0], (part, SEG_PAD)
    for obs in world.obstacles:
        hit = _ray_box(o, d, obs.pose, obs.size)
        if hit is not None and hit[0] < best_t:
            best_t, best = hit[0], ("obstacle", SEG_OBSTACLE)
    if math.isinf(best_t):
        return Hit(math.inf, SEG_SKY, "sky", None)
    return Hit(best_t, best[1], best[0], o + best_t * d)
