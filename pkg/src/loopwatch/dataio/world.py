"""Synthetic corridor world: geometry, first-person renderer and vehicle model.

Coordinates are planar with ``y`` pointing "down" so that heading angles grow
clockwise: a positive steering command turns the vehicle right.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..kvfile import dataclass_from_kv, dataclass_to_kv, read_kv, write_kv

_LEFT_COLORS = np.array([[0.75, 0.38, 0.32], [0.80, 0.55, 0.30], [0.70, 0.30, 0.45]])
_RIGHT_COLORS = np.array([[0.30, 0.45, 0.75], [0.30, 0.65, 0.60], [0.45, 0.40, 0.78]])
_CAP_COLOR = np.array([0.35, 0.35, 0.35])
_FLOOR_A = np.array([0.62, 0.58, 0.50])
_FLOOR_B = np.array([0.30, 0.28, 0.26])
_CEILING = np.array([0.88, 0.88, 0.92])


@dataclass
class WorldConfig:
    # corridor layout; empty ``segments`` means a random layout drawn from the seed
    segments: tuple = ()
    turns: tuple = ()
    n_segments: int = 8
    width: float = 2.0
    wall_height: float = 1.2
    camera_height: float = 0.5
    # vehicle and controller
    speed: float = 1.0
    dt: float = 0.1
    gain: float = 4.0
    lookahead: float = 1.5
    u_min: float = -0.24
    u_max: float = 0.28
    noise_std: float = 0.03
    start_offset: float = 0.0
    collision_radius: float = 0.2
    # camera
    image_height: int = 64
    image_width: int = 80
    fov_deg: float = 70.0
    supersample: int = 2
    checkerboard: bool = True
    tile: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.segments = tuple(float(s) for s in self.segments)
        self.turns = tuple(float(t) for t in self.turns)
        if self.image_height < 32 or self.image_width < 32:
            raise ConfigError("image size must be at least 32x32")
        if self.speed <= 0 or self.dt <= 0 or self.gain <= 0:
            raise ConfigError("speed, dt and gain must be positive")
        if self.u_min >= self.u_max:
            raise ConfigError("need u_min < u_max")
        if self.segments and len(self.turns) != len(self.segments) - 1:
            raise ConfigError(
                f"{len(self.segments)} segments need {len(self.segments) - 1} turns, "
                f"got {len(self.turns)}")

    @classmethod
    def load(cls, path) -> "WorldConfig":
        return dataclass_from_kv(cls, read_kv(path))

    def save(self, path) -> None:
        write_kv(path, dataclass_to_kv(self))


def _seg_dist(p1, p2, q1, q2) -> float:
    """Minimum distance between two planar segments (non-crossing case handled)."""
    def point_seg(p, a, b):
        ab = b - a
        t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
        return np.linalg.norm(p - (a + t * ab))

    d1, d2 = p2 - p1, q2 - q1
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) > 1e-12:
        w = q1 - p1
        s = (w[0] * d2[1] - w[1] * d2[0]) / den
        t = (w[0] * d1[1] - w[1] * d1[0]) / den
        if 0 <= s <= 1 and 0 <= t <= 1:
            return 0.0
    return min(point_seg(p1, q1, q2), point_seg(p2, q1, q2),
               point_seg(q1, p1, p2), point_seg(q2, p1, p2))


@dataclass
class Corridor:
    """Centerline polyline with mitered wall polylines and end caps."""

    centerline: np.ndarray          # (K, 2)
    wall_a: np.ndarray              # (S, 2) wall segment start points
    wall_b: np.ndarray              # (S, 2) wall segment end points
    wall_color: np.ndarray          # (S, 3)
    wall_offset: np.ndarray         # (S,) arc length at each segment start, for panel seams
    width: float
    arclen: np.ndarray = field(init=False)

    def __post_init__(self):
        seg = np.diff(self.centerline, axis=0)
        self.arclen = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])

    @property
    def length(self) -> float:
        return float(self.arclen[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self.arclen, s, side="right")) - 1, len(self.arclen) - 2)
        frac = (s - self.arclen[i]) / (self.arclen[i + 1] - self.arclen[i])
        return self.centerline[i] + frac * (self.centerline[i + 1] - self.centerline[i])

    def project(self, p: np.ndarray, s_hint: float | None = None, reach: float = 3.0):
        """Arc length and distance of the closest centerline point to ``p``.

        With ``s_hint`` only segments overlapping ``[s_hint - 1, s_hint + reach]``
        are searched, which keeps the projection from jumping across corners.
        """
        a = self.centerline[:-1]
        b = self.centerline[1:]
        ab = b - a
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
        closest = a + t[:, None] * ab
        dist = np.hypot(*(p - closest).T)
        s = self.arclen[:-1] + t * (self.arclen[1:] - self.arclen[:-1])
        if s_hint is not None:
            ok = (self.arclen[1:] >= s_hint - 1.0) & (self.arclen[:-1] <= s_hint + reach)
            dist = np.where(ok, dist, np.inf)
        i = int(np.argmin(dist))
        return float(s[i]), float(dist[i])

    def wall_distance(self, p: np.ndarray) -> float:
        ab = self.wall_b - self.wall_a
        t = np.clip(np.einsum("ij,ij->i", p - self.wall_a, ab)
                    / np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-12), 0, 1)
        closest = self.wall_a + t[:, None] * ab
        return float(np.min(np.hypot(*(p - closest).T)))

    def ray_distances(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest wall hit along each ray ``origin + t * dirs``.

        Returns (t, wall index, position along the wall in meters).
        """
        e = self.wall_b - self.wall_a                        # (S, 2)
        q = self.wall_a - origin                             # (S, 2)
        rx, ry = dirs[:, 0:1], dirs[:, 1:2]                  # (R, 1)
        den = rx * e[:, 1] - ry * e[:, 0]                    # (R, S)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (q[:, 0] * e[:, 1] - q[:, 1] * e[:, 0]) / den
            s = (q[:, 0] * ry - q[:, 1] * rx) / den
        ok = (np.abs(den) > 1e-12) & (t > 1e-6) & (s >= 0) & (s <= 1)
        t = np.where(ok, t, np.inf)
        idx = np.argmin(t, axis=1)
        rows = np.arange(len(dirs))
        hit_t = t[rows, idx]
        along = s[rows, idx] * np.hypot(e[idx, 0], e[idx, 1]) + self.wall_offset[idx]
        return hit_t, idx, along


def _offset_polyline(points: np.ndarray, half: float):
    """Right and left mitered offsets of a polyline (y-down frame)."""
    d = np.diff(points, axis=0)
    d /= np.hypot(d[:, 0], d[:, 1])[:, None]
    normals = np.stack([-d[:, 1], d[:, 0]], axis=1)      # points to the right
    right, left = [], []
    for k in range(len(points)):
        if k == 0:
            m, scale = normals[0], 1.0
        elif k == len(points) - 1:
            m, scale = normals[-1], 1.0
        else:
            m = normals[k - 1] + normals[k]
            m /= np.linalg.norm(m)
            scale = 1.0 / float(np.dot(m, normals[k]))
        right.append(points[k] + m * half * scale)
        left.append(points[k] - m * half * scale)
    return np.array(right), np.array(left)


def centerline_vertices(segments, turns) -> np.ndarray:
    pts = [np.zeros(2)]
    heading = 0.0
    for i, length in enumerate(segments):
        pts.append(pts[-1] + length * np.array([math.cos(heading), math.sin(heading)]))
        if i < len(turns):
            heading += math.radians(turns[i])
    return np.array(pts)


def validate_layout(segments, turns, width: float) -> None:
    if len(segments) < 1:
        raise ConfigError("corridor needs at least one segment")
    if any(s < width for s in segments):
        raise ConfigError(f"every segment must be at least the corridor width ({width} m) long")
    if any(abs(t) > 120 for t in turns):
        raise ConfigError("turn angles must lie within [-120, 120] degrees")
    pts = centerline_vertices(segments, turns)
    for i in range(len(segments)):
        for j in range(i + 2, len(segments)):
            if _seg_dist(pts[i], pts[i + 1], pts[j], pts[j + 1]) < 1.5 * width:
                raise ConfigError(
                    f"corridor segments {i} and {j} overlap; the layout is not a single "
                    "connected corridor")


def random_layout(rng: np.random.Generator, n_segments: int, width: float):
    """Random layout whose first two turns are one right and one left turn."""
    for _ in range(1000):
        segments = [float(rng.uniform(6.0, 9.0))]
        segments += [float(rng.uniform(4.0, 8.0)) for _ in range(n_segments - 1)]
        mags = rng.choice([60.0, 75.0, 90.0], size=n_segments - 1)
        signs = rng.choice([-1.0, 1.0], size=n_segments - 1)
        if n_segments >= 3:
            signs[:2] = [1.0, -1.0] if rng.random() < 0.5 else [-1.0, 1.0]
        turns = [float(m * s) for m, s in zip(mags, signs)]
        try:
            validate_layout(segments, turns, width)
        except ConfigError:
            continue
        return tuple(segments), tuple(turns)
    raise ConfigError("could not draw a valid random corridor layout")


def build_corridor(segments, turns, width: float) -> Corridor:
    validate_layout(segments, turns, width)
    pts = centerline_vertices(segments, turns)
    # extend behind the start so the back cap is out of the initial view
    d0 = (pts[1] - pts[0]) / np.linalg.norm(pts[1] - pts[0])
    pts = np.vstack([pts[0] - 1.0 * d0, pts[1:]])
    right, left = _offset_polyline(pts, width / 2)
    a, b, colors, offsets = [], [], [], []
    for side, palette in ((left, _LEFT_COLORS), (right, _RIGHT_COLORS)):
        run = 0.0
        for k in range(len(side) - 1):
            a.append(side[k])
            b.append(side[k + 1])
            colors.append(palette[k % len(palette)])
            offsets.append(run)
            run += float(np.linalg.norm(side[k + 1] - side[k]))
    for cap in ((left[0], right[0]), (right[-1], left[-1])):
        a.append(cap[0])
        b.append(cap[1])
        colors.append(_CAP_COLOR)
        offsets.append(0.0)
    return Corridor(pts, np.array(a), np.array(b), np.array(colors), np.array(offsets), width)


@dataclass
class VehicleState:
    position: np.ndarray
    heading: float
    speed: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.heading = wrap_angle(self.heading)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


class Renderer:
    """Column ray caster with a perspective floor/ceiling and wall panels."""

    def __init__(self, config: WorldConfig, corridor: Corridor, tint: np.ndarray):
        self.cfg = config
        self.corridor = corridor
        self.tint = tint
        ss = config.supersample
        self.h, self.w = config.image_height * ss, config.image_width * ss
        half = math.tan(math.radians(config.fov_deg) / 2)
        self.offsets = half * ((np.arange(self.w) + 0.5) / self.w * 2 - 1)   # (W,)
        self.focal = (self.w / 2) / half
        self.rows = np.arange(self.h) + 0.5 - self.h / 2                     # (H,)

    def render(self, state: VehicleState) -> np.ndarray:
        """RGB frame (3, H, W) as uint8."""
        cfg = self.cfg
        fwd = np.array([math.cos(state.heading), math.sin(state.heading)])
        right = np.array([-fwd[1], fwd[0]])
        dirs = fwd[None, :] + self.offsets[:, None] * right[None, :]          # (W, 2)
        depth, wall, along = self.corridor.ray_distances(state.position, dirs)

        y = self.rows[:, None]                                                # (H, 1)
        top = -self.focal * (cfg.wall_height - cfg.camera_height) / depth     # (W,)
        bottom = self.focal * cfg.camera_height / depth
        is_floor = y > bottom[None, :]
        is_ceiling = y < top[None, :]

        img = np.empty((self.h, self.w, 3))
        # walls: base color, dark panel seams every meter, distance falloff
        seam = (np.mod(along, 1.0) < 0.06).astype(float)
        wall_rgb = self.corridor.wall_color[wall] * (1.0 - 0.45 * seam)[:, None]
        wall_rgb = wall_rgb / (1.0 + 0.10 * depth)[:, None]
        img[:] = wall_rgb[None, :, :]
        # baseboard stripe near the floor line
        base = (y > bottom[None, :] - 0.12 * self.focal / depth[None, :]) & ~is_floor
        img[base] *= 0.6

        with np.errstate(divide="ignore"):
            floor_d = np.where(y > 0, self.focal * cfg.camera_height / y, np.inf)   # (H, 1)
            ceil_d = np.where(y < 0, self.focal * (cfg.wall_height - cfg.camera_height) / -y,
                              np.inf)
        fy, fx = np.nonzero(is_floor)
        d = floor_d[fy, 0]
        pts = state.position[None, :] + d[:, None] * dirs[fx]
        if cfg.checkerboard:
            parity = (np.floor(pts[:, 0] / cfg.tile) + np.floor(pts[:, 1] / cfg.tile)) % 2
            color = np.where(parity[:, None] > 0, _FLOOR_A, _FLOOR_B)
        else:
            color = np.broadcast_to(_FLOOR_A, (len(d), 3))
        img[fy, fx] = color / (1.0 + 0.10 * d)[:, None]
        cy, cx = np.nonzero(is_ceiling)
        img[cy, cx] = _CEILING / (1.0 + 0.06 * ceil_d[cy, 0])[:, None]

        img *= self.tint
        ss = cfg.supersample
        img = img.reshape(cfg.image_height, ss, cfg.image_width, ss, 3).mean(axis=(1, 3))
        out = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        return np.ascontiguousarray(out.transpose(2, 0, 1))


class PurePursuit:
    """Steers toward a look-ahead point on the corridor centerline."""

    def __init__(self, config: WorldConfig, corridor: Corridor):
        self.cfg = config
        self.corridor = corridor
        self.s = 0.0

    def command(self, state: VehicleState) -> float:
        cfg = self.cfg
        self.s, _ = self.corridor.project(state.position, self.s)
        target = self.corridor.point_at(self.s + cfg.lookahead)
        v = target - state.position
        fwd = np.array([math.cos(state.heading), math.sin(state.heading)])
        alpha = math.atan2(fwd[0] * v[1] - fwd[1] * v[0], float(np.dot(fwd, v)))
        curvature = 2.0 * math.sin(alpha) / cfg.lookahead
        return cfg.speed * curvature / cfg.gain


class World:
    """Everything seeded for one episode: corridor, tint, controller noise."""

    def __init__(self, config: WorldConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        layout_ss, tint_ss, noise_ss = np.random.SeedSequence(self.seed).spawn(3)
        if config.segments:
            segments, turns = config.segments, config.turns
        else:
            segments, turns = random_layout(np.random.default_rng(layout_ss),
                                            config.n_segments, config.width)
        self.segments, self.turns = tuple(segments), tuple(turns)
        self.corridor = build_corridor(segments, turns, config.width)
        trng = np.random.default_rng(tint_ss)
        tint = trng.uniform(0.88, 1.12, size=3) * trng.uniform(0.8, 1.1)
        self.tint = tint
        self.renderer = Renderer(config, self.corridor, tint)
        self._noise_ss = noise_ss

    def noise(self, length: int) -> np.ndarray:
        rng = np.random.default_rng(self._noise_ss)
        return rng.normal(0.0, self.config.noise_std, size=length)

    def initial_state(self) -> VehicleState:
        cl = self.corridor.centerline
        d = (cl[1] - cl[0]) / np.linalg.norm(cl[1] - cl[0])
        right = np.array([-d[1], d[0]])
        pos = cl[0] + 1.5 * d + self.config.start_offset * right
        return VehicleState(pos, math.atan2(d[1], d[0]), self.config.speed)

    def advance(self, state: VehicleState, u: float) -> VehicleState:
        """Kinematic update; a move that would hit a wall is refused (crash)."""
        cfg = self.config
        heading = state.heading + cfg.gain * u * cfg.dt
        pos = state.position + state.speed * cfg.dt * np.array([math.cos(heading),
                                                                math.sin(heading)])
        if self.corridor.wall_distance(pos) < cfg.collision_radius:
            pos = state.position
        return VehicleState(pos, heading, state.speed)
