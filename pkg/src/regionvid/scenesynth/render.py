"""Sprite world: palette, backgrounds, shapes, action trajectories and exact rasterisation.

Sprites are drawn without anti-aliasing by testing pixel centres against the
shape in the sprite's local frame, so every mask is exact. Each sprite has a
base colour and an accent cap on its facing side; the facing direction is the
sprite's pose and depends on the action being performed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..textcond import ACTIONS, BACKGROUNDS, SHAPES

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "orange": (1.00, 0.55, 0.00),
    "yellow": (0.95, 0.90, 0.10),
    "magenta": (0.90, 0.10, 0.80),
    "purple": (0.50, 0.10, 0.70),
    "white": (1.00, 1.00, 1.00),
    "black": (0.05, 0.05, 0.05),
    "cyan": (0.00, 0.85, 0.85),
    "pink": (1.00, 0.60, 0.75),
    "brown": (0.50, 0.28, 0.10),
    "navy": (0.10, 0.15, 0.50),
    "lime": (0.60, 1.00, 0.20),
}

# (colour above the horizon, colour below, horizon as fraction of height);
# sky is a vertical gradient between its two colours
BACKGROUND_STYLE = {
    "plain": ((0.55, 0.55, 0.55), (0.55, 0.55, 0.55), None),
    "sky": ((0.45, 0.65, 0.95), (0.75, 0.85, 1.00), None),
    "grass": ((0.60, 0.80, 0.95), (0.25, 0.60, 0.20), 0.4),
    "beach": ((0.20, 0.45, 0.80), (0.90, 0.80, 0.55), 0.4),
}

# facing direction (degrees, counter-clockwise from +x with y pointing up)
POSE = {"slide-right": 0.0, "slide-left": 180.0, "bounce": 270.0, "still": 90.0, "grow": 45.0, "spin": 90.0}

SHAPE_AREA = {  # area of each unit shape, in units of radius^2
    "circle": math.pi,
    "square": 1.64 ** 2,
    "triangle": 3 * math.sqrt(3) / 4 * 1.25 ** 2,
    "star": 5 * 1.2 * 0.5 * math.sin(math.radians(36)),
}
ACCENT_EDGE = 0.35


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    image_size: int = 32
    frames: int = 8
    subject_size: float = 0.25  # sprite diameter as a fraction of the frame
    slide_speed: float = 1.0  # px per frame
    bounce_amplitude: float = 4.0  # px
    bounce_period: float = 4.0  # frames per hop
    spin_rate: float = 45.0  # degrees per frame
    grow_range: tuple[float, float] = (0.75, 1.3)

    @property
    def radius(self) -> float:
        return self.subject_size * self.image_size / 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "grow_range" in d:
            d["grow_range"] = tuple(d["grow_range"])
        return cls(**d)


@dataclass(frozen=True)
class SubjectSpec:
    shape: str
    base_color: str
    accent_color: str
    size: float = 1.0  # multiplier on the world's subject size
    identity: str | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}")
        if self.base_color not in PALETTE or self.accent_color not in PALETTE:
            raise SceneError(f"unknown colour in {self.base_color}/{self.accent_color}")
        if self.base_color == self.accent_color:
            raise SceneError("base and accent colours must differ")

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.shape, self.base_color, self.accent_color)


@dataclass(frozen=True)
class ActionSpec:
    action: str
    velocity: float = 0.0  # px / frame (slides)
    amplitude: float = 0.0  # px (bounce)
    period: float = 1.0  # frames (bounce)
    angular_rate: float = 0.0  # deg / frame (spin)
    scale_range: tuple[float, float] = (1.0, 1.0)  # (grow)

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise SceneError(f"unknown action {self.action!r}")

    @classmethod
    def default(cls, action: str, world: WorldConfig) -> "ActionSpec":
        if action in ("slide-right", "slide-left"):
            return cls(action, velocity=world.slide_speed)
        if action == "bounce":
            return cls(action, amplitude=world.bounce_amplitude, period=world.bounce_period)
        if action == "spin":
            return cls(action, angular_rate=world.spin_rate)
        if action == "grow":
            return cls(action, scale_range=tuple(world.grow_range))
        return cls(action)


@dataclass(frozen=True)
class PlacedSubject:
    subject: SubjectSpec
    action: ActionSpec
    start: tuple[float, float]  # centre in pixels (x, y), y down
    theta0: float | None = None  # initial facing; None = the action's pose

    def state(self, f: int, frames: int) -> tuple[float, float, float, float]:
        """(cx, cy, facing degrees, scale) at frame f."""
        a = self.action
        x, y = self.start
        theta = POSE[a.action] if self.theta0 is None else self.theta0
        scale = 1.0
        if a.action == "slide-right":
            x += a.velocity * f
        elif a.action == "slide-left":
            x -= a.velocity * f
        elif a.action == "bounce":
            y -= a.amplitude * abs(math.sin(math.pi * f / a.period))
        elif a.action == "spin":
            theta += a.angular_rate * f
        elif a.action == "grow":
            g0, g1 = a.scale_range
            scale = g0 + (g1 - g0) * (f / (frames - 1) if frames > 1 else 0.0)
        return x, y, theta, scale


@dataclass(frozen=True)
class SceneSpec:
    subjects: tuple[PlacedSubject, ...]
    background: str
    frames: int
    size: int
    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise SceneError(f"unknown background {self.background!r}")

    def to_json(self) -> dict:
        return {
            "background": self.background,
            "frames": self.frames,
            "size": self.size,
            "world": asdict(self.world),
            "subjects": [
                {"subject": asdict(p.subject), "action": asdict(p.action), "start": list(p.start),
                 "theta0": p.theta0}
                for p in self.subjects
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        world = WorldConfig.from_dict(d["world"])
        subs = []
        for s in d["subjects"]:
            act = dict(s["action"])
            act["scale_range"] = tuple(act["scale_range"])
            subs.append(PlacedSubject(SubjectSpec(**s["subject"]), ActionSpec(**act), tuple(s["start"]), s["theta0"]))
        return cls(tuple(subs), d["background"], d["frames"], d["size"], world)


# ---------------------------------------------------------------- rasterisation

def _polygon_inside(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(u.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > v) != (y2 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (u < xint)
    return inside


def _regular(n: int, r: float, phase: float = 0.0) -> np.ndarray:
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(ang), r * np.sin(ang)], 1)


_TRIANGLE = _regular(3, 1.25)
_STAR = np.array([
    (r * math.cos(math.pi * k / 5), r * math.sin(math.pi * k / 5))
    for k, r in zip(range(10), [1.2, 0.5] * 5)
])


_SQUARE = np.array([(0.82, 0.82), (-0.82, 0.82), (-0.82, -0.82), (0.82, -0.82)])
_VERTICES = {"square": _SQUARE, "triangle": _TRIANGLE, "star": _STAR}


def sprite_extent(shape: str, cx: float, cy: float, theta: float, radius: float) -> tuple[float, float, float, float]:
    """Tight pixel box (x0, y0, x1, y1) of a sprite at the given pose."""
    if shape == "circle":
        return cx - radius, cy - radius, cx + radius, cy + radius
    t = math.radians(theta)
    u, v = _VERTICES[shape].T * radius
    px = u * math.cos(t) - v * math.sin(t)
    py = u * math.sin(t) + v * math.cos(t)
    return cx + float(px.min()), cy - float(py.max()), cx + float(px.max()), cy - float(py.min())


def shape_mask_local(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership in the unit shape; the shape faces +u."""
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.82
    if shape == "triangle":
        return _polygon_inside(u, v, _TRIANGLE)
    if shape == "star":
        return _polygon_inside(u, v, _STAR)
    raise SceneError(f"unknown shape {shape!r}")


def sprite_masks(shape: str, cx: float, cy: float, theta: float, radius: float,
                 h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(body mask, accent mask) on an h x w pixel grid."""
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5 - cx
    py = -(ys + 0.5 - cy)  # y up
    t = math.radians(theta)
    u = (px * math.cos(t) + py * math.sin(t)) / radius
    v = (-px * math.sin(t) + py * math.cos(t)) / radius
    body = shape_mask_local(shape, u, v)
    return body, body & (u > ACCENT_EDGE)


def rgb(name: str) -> np.ndarray:
    return np.asarray(PALETTE[name], dtype=np.float32)


def render_background(name: str, h: int, w: int) -> np.ndarray:
    """[3, h, w] in [-1, 1], constant along each row."""
    top, bottom, horizon = BACKGROUND_STYLE[name]
    top, bottom = np.asarray(top, np.float32), np.asarray(bottom, np.float32)
    rows = (np.arange(h, dtype=np.float32) + 0.5) / h
    if horizon is None:
        col = top[:, None] + (bottom - top)[:, None] * rows[None]
    else:
        col = np.where(rows[None] < horizon, top[:, None], bottom[:, None])
    img = np.repeat(col[:, :, None], w, axis=2)
    return (img * 2.0 - 1.0).astype(np.float32)


def draw_sprite(img: np.ndarray, subject: SubjectSpec, cx, cy, theta, scale, radius) -> np.ndarray:
    """Paint a sprite in place; returns its body mask."""
    _, h, w = img.shape
    body, accent = sprite_masks(subject.shape, cx, cy, theta, radius * subject.size * scale, h, w)
    img[:, body] = (rgb(subject.base_color) * 2 - 1)[:, None]
    img[:, accent] = (rgb(subject.accent_color) * 2 - 1)[:, None]
    return body


def render_frame(scene: SceneSpec, f: int) -> tuple[np.ndarray, np.ndarray]:
    """Image [3, H, W] in [-1, 1] and per-subject visible masks [N, H, W]."""
    h = w = scene.size
    radius = scene.world.radius * scene.size / scene.world.image_size
    img = render_background(scene.background, h, w)
    masks = np.zeros((len(scene.subjects), h, w), dtype=bool)
    for i, ps in enumerate(scene.subjects):
        cx, cy, theta, scale = ps.state(f, scene.frames)
        x0, y0, x1, y1 = sprite_extent(ps.subject.shape, cx, cy, theta, radius * ps.subject.size * scale)
        if x0 < 0 or x1 > w or y0 < 0 or y1 > h:
            raise SceneError(f"subject {i} leaves the frame at frame {f}")
        body = draw_sprite(img, ps.subject, cx, cy, theta, scale, radius)
        masks[:, body] = False
        masks[i] = body
    return img, masks


def render_video(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    out = [render_frame(scene, f) for f in range(scene.frames)]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])


def trajectory_extent(ps: PlacedSubject, frames: int, radius: float) -> tuple[float, float, float, float]:
    """Pixel bounding box (x0, y0, x1, y1) swept by the sprite over all frames."""
    boxes = []
    for f in range(frames):
        cx, cy, theta, scale = ps.state(f, frames)
        boxes.append(sprite_extent(ps.subject.shape, cx, cy, theta, radius * ps.subject.size * scale))
    b = np.array(boxes)
    return float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max())


def place_in_box(subject: SubjectSpec, action: ActionSpec, box: tuple[float, float, float, float],
                 world: WorldConfig, frames: int, u: float, v: float, theta0: float | None = None,
                 margin: float = 0.1) -> PlacedSubject:
    """Start position so the whole trajectory stays in ``box``; u, v in [0, 1] pick where."""
    probe = PlacedSubject(subject, action, (0.0, 0.0), theta0)
    x0, y0, x1, y1 = trajectory_extent(probe, frames, world.radius)
    bx0, by0, bx1, by1 = box
    lo_x, hi_x = bx0 + margin - x0, bx1 - margin - x1
    lo_y, hi_y = by0 + margin - y0, by1 - margin - y1
    if lo_x > hi_x or lo_y > hi_y:
        raise SceneError(f"{subject.shape} doing {action.action} does not fit in {box}")
    return PlacedSubject(subject, action, (lo_x + u * (hi_x - lo_x), lo_y + v * (hi_y - lo_y)), theta0)


def reference_rgba(subject: SubjectSpec, world: WorldConfig, background: str, center, scale: float = 1.0,
                   theta: float = POSE["still"]) -> np.ndarray:
    """A reference photo of a subject: RGB over a background plus an exact alpha channel, [4, H, W]."""
    n = world.image_size
    img = render_background(background, n, n)
    body = draw_sprite(img, subject, center[0], center[1], theta, scale, world.radius)
    alpha = body.astype(np.float32)[None]
    return np.concatenate([img, alpha], 0)
