"""Deterministic proxy metrics for generated sprite videos, subject detection and benchmark scoring.

Features are hand-built so every score is reproducible bit for bit:

* subject fidelity: cosine between colour-histogram + shape-moment vectors
  of a detected subject and its reference renders;
* text alignment: agreement between the prompted (shape, action) and the
  shape/action read off the detected trajectory;
* temporal consistency: cosine between pooled consecutive frames;
* dynamic degree: mean absolute frame difference relative to a full-speed slide.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from matplotlib.colors import rgb_to_hsv
from scipy import ndimage

from .numerics import ContractError
from .scenesynth.render import (
    BACKGROUND_STYLE,
    PALETTE,
    SHAPE_AREA,
    ActionSpec,
    PlacedSubject,
    SceneSpec,
    SubjectSpec,
    WorldConfig,
    render_background,
    render_video,
    sprite_masks,
)
from .textcond import ACTIONS, SHAPES, SubjectClause

HUE_BINS = 10
GRAY_BINS = 4
HIST_BINS = HUE_BINS * 2 + GRAY_BINS
GRAY_SATURATION = 0.2
SHAPE_WEIGHT = 1.0
ROTATIONS = np.arange(0.0, 360.0, 5.0)


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class Calibration:
    tau: float  # per-pixel max-channel deviation from background that counts as foreground
    a_min: int  # smallest component (pixels) accepted as a subject
    kappa: float  # mean |frame difference| of the full-speed reference slide

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(**d)


def _background_rows(world: WorldConfig) -> np.ndarray:
    n = world.image_size
    rows = [render_background(b, n, 1)[:, :, 0].T for b in BACKGROUND_STYLE]
    return np.concatenate(rows)  # [rows, 3]


def min_contrast(world: WorldConfig) -> float:
    """Smallest max-channel gap between any palette colour and any background row."""
    bg = _background_rows(world)
    cols = np.array([PALETTE[c] for c in sorted(PALETTE)], np.float32) * 2 - 1
    gaps = np.abs(cols[:, None] - bg[None]).max(-1)
    return float(gaps.min())


def calibration_slide(world: WorldConfig) -> SceneSpec:
    """Two subjects sliding right at full speed on the plain background."""
    n = world.image_size
    r = world.radius
    subs = (
        PlacedSubject(SubjectSpec("square", "red", "yellow"), ActionSpec.default("slide-right", world),
                      (r + 1.0, n * 0.3)),
        PlacedSubject(SubjectSpec("square", "navy", "cyan"), ActionSpec.default("slide-right", world),
                      (r + 1.0, n * 0.7)),
    )
    return SceneSpec(subs, "plain", world.frames, n, world)


def mean_abs_diff(frames: np.ndarray) -> float:
    frames = np.asarray(frames, np.float64)
    if frames.shape[0] < 2:
        raise ContractError("need at least two frames")
    return float(np.abs(np.diff(frames, axis=0)).reshape(frames.shape[0] - 1, -1).mean(1).mean())


def calibrate(world: WorldConfig) -> Calibration:
    """Thresholds from renderer sweeps: half the weakest colour/background contrast,
    half the smallest sprite area, and the flux of the full-speed slide."""
    tau = 0.5 * min_contrast(world)
    n = world.image_size
    smallest = min(world.grow_range[0], 1.0) * world.radius
    areas = []
    for shape in SHAPES:
        for theta in ROTATIONS[::3]:
            body, _ = sprite_masks(shape, n / 2, n / 2, float(theta), smallest, n, n)
            areas.append(int(body.sum()))
    a_min = max(1, int(0.5 * min(areas)))
    frames, _ = render_video(calibration_slide(world))
    return Calibration(tau=round(tau, 6), a_min=a_min, kappa=mean_abs_diff(frames))


# ---------------------------------------------------------------- detection

def background_estimate(frame: np.ndarray, step: float = 0.125) -> np.ndarray:
    """Per-row modal colour: quantise each row's pixels, average the most common bin."""
    c, h, w = frame.shape
    q = np.round(np.clip(frame, -1, 1) / step).astype(np.int32)
    out = np.empty_like(frame)
    for y in range(h):
        keys = q[:, y, :].T
        uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        sel = inv.reshape(-1) == int(np.argmax(counts))
        out[:, y, :] = frame[:, y, sel].mean(1)[:, None]
    return out


@dataclass
class Detection:
    mask: np.ndarray  # [H, W] bool
    centroid: tuple[float, float]  # (x, y) in pixels, y down
    area: int
    orientation: float | None  # facing in degrees (y up), from the accent cap


def _dominant(pixels: np.ndarray, step: float = 0.125) -> np.ndarray:
    q = np.round(pixels / step).astype(np.int32)
    uniq, inv, counts = np.unique(q, axis=0, return_inverse=True, return_counts=True)
    return pixels[inv.reshape(-1) == int(np.argmax(counts))].mean(0)


def orientation(frame: np.ndarray, mask: np.ndarray, tau: float) -> float | None:
    """Direction from the body centroid to the centroid of pixels unlike the body's main colour."""
    ys, xs = np.nonzero(mask)
    pix = frame[:, ys, xs].T
    base = _dominant(pix)
    accent = np.abs(pix - base).max(1) > tau
    if not accent.any() or accent.all():
        return None
    dx = xs[accent].mean() - xs.mean()
    dy = -(ys[accent].mean() - ys.mean())
    if dx == 0 and dy == 0:
        return None
    return float(math.degrees(math.atan2(dy, dx)) % 360.0)


def detect_subject(frame: np.ndarray, rect, cal: Calibration, background: np.ndarray | None = None
                   ) -> Detection | None:
    """Largest foreground component whose centroid lies in ``rect`` (normalised x0, y0, x1, y1)."""
    _, h, w = frame.shape
    bg = background_estimate(frame) if background is None else background
    fg = np.abs(frame - bg).max(0) > cal.tau
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return None
    x0, y0, x1, y1 = rect[0] * w, rect[1] * h, rect[2] * w, rect[3] * h
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(fg, labels, idx)
    cents = ndimage.center_of_mass(fg, labels, idx)
    best, best_area = None, 0
    for k, area, (cy, cx) in zip(idx, areas, cents):
        cx, cy = cx + 0.5, cy + 0.5
        if x0 <= cx < x1 and y0 <= cy < y1 and area > best_area:
            best, best_area = k, int(area)
    if best is None or best_area < cal.a_min:
        return None
    mask = labels == best
    ys, xs = np.nonzero(mask)
    return Detection(mask, (float(xs.mean() + 0.5), float(ys.mean() + 0.5)), best_area,
                     orientation(frame, mask, cal.tau))


@dataclass
class Track:
    """One subject followed through a video; ``frames[f]`` is ``None`` where it was not found."""

    frames: list[Detection | None]

    @property
    def found(self) -> list[int]:
        return [f for f, d in enumerate(self.frames) if d is not None]

    @property
    def missing(self) -> bool:
        return len(self.found) * 2 < len(self.frames)


def track_subject(video: np.ndarray, rect, cal: Calibration) -> Track:
    return Track([detect_subject(fr, rect, cal) for fr in video])


# ---------------------------------------------------------------- features

def hu_moments(mask: np.ndarray) -> np.ndarray:
    """The seven rotation/scale/translation invariant moments of a binary mask."""
    ys, xs = np.nonzero(mask)
    m00 = float(len(xs))
    if m00 == 0:
        return np.zeros(7)
    x = xs - xs.mean()
    y = ys - ys.mean()

    def eta(p, q):
        return float((x ** p * y ** q).sum()) / m00 ** (1 + (p + q) / 2)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    a, b = n30 + n12, n21 + n03
    return np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11 ** 2,
        (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
        a ** 2 + b ** 2,
        (n30 - 3 * n12) * a * (a ** 2 - 3 * b ** 2) + (3 * n21 - n03) * b * (3 * a ** 2 - b ** 2),
        (n20 - n02) * (a ** 2 - b ** 2) + 4 * n11 * a * b,
        (3 * n21 - n03) * a * (a ** 2 - 3 * b ** 2) - (n30 - 3 * n12) * b * (3 * a ** 2 - b ** 2),
    ])


def _interp_bins(x: np.ndarray, centers: np.ndarray, circular: bool) -> np.ndarray:
    """Split each value linearly between its two nearest bin centres: [n, bins]."""
    k = len(centers)
    out = np.zeros((len(x), k))
    if circular:
        pos = x * k
        lo = np.floor(pos).astype(int) % k
        frac = pos - np.floor(pos)
        hi = (lo + 1) % k
    else:
        pos = np.clip(np.interp(x, centers, np.arange(k)), 0, k - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, k - 1)
        frac = pos - lo
    rows = np.arange(len(x))
    np.add.at(out, (rows, lo), 1 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


def color_histogram(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """24 bins: 10 hues x {dark, bright} for saturated pixels, plus 4 gray levels; sums to 1."""
    pix = (np.clip(frame[:, mask].T, -1, 1) + 1) / 2
    if len(pix) == 0:
        return np.zeros(HIST_BINS)
    hsv = rgb_to_hsv(pix)
    h, s, v = hsv[:, 0], hsv[:, 1], hsv[:, 2]
    gray = s < GRAY_SATURATION
    hist = np.zeros(HIST_BINS)
    if (~gray).any():
        # bin centres at multiples of 36 degrees
        hue = _interp_bins(h[~gray], np.arange(HUE_BINS) / HUE_BINS, circular=True)
        val = _interp_bins(v[~gray], np.array([0.4, 0.9]), circular=False)
        hist[:2 * HUE_BINS] = (hue[:, :, None] * val[:, None, :]).sum(0).reshape(-1)
    if gray.any():
        hist[2 * HUE_BINS:] = _interp_bins(v[gray], (np.arange(GRAY_BINS) + 0.5) / GRAY_BINS, False).sum(0)
    return hist / len(pix)


def features(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Unit-norm subject descriptor: colour histogram, Hu moments, area fraction."""
    hist = color_histogram(frame, mask)
    hist = hist / max(np.linalg.norm(hist), 1e-12)
    v = np.concatenate([hist, SHAPE_WEIGHT * hu_moments(mask), [mask.mean()]])
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _cos01(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), 0.0, 1.0))


def reference_features(refs: np.ndarray) -> list[np.ndarray]:
    """Features of [M, 4, H, W] RGBA reference renders (alpha gives the mask)."""
    return [features(r[:3], r[3] > 0.5) for r in refs]


def dino_proxy(frame_or_video: np.ndarray, obs, refs: list[np.ndarray]) -> float:
    """Best-matching reference cosine, averaged over frames; frames without a detection score 0.

    ``obs`` is a ``Detection`` (single frame) or a ``Track``; ``refs`` are reference feature vectors.
    """
    if not refs:
        raise ContractError("need at least one reference")
    if obs is None:
        return 0.0
    if isinstance(obs, Detection):
        obs, frame_or_video = Track([obs]), frame_or_video[None]
    scores = []
    for fr, det in zip(frame_or_video, obs.frames):
        if det is None:
            scores.append(0.0)
            continue
        f = features(fr, det.mask)
        scores.append(max(_cos01(f, r) for r in refs))
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------- attributes

def _template_iou(mask: np.ndarray, shape: str, centroid, area: int) -> float:
    h, w = mask.shape
    r = math.sqrt(area / SHAPE_AREA[shape])
    best = 0.0
    for theta in ROTATIONS:
        tmpl, _ = sprite_masks(shape, centroid[0], centroid[1], float(theta), r, h, w)
        inter = np.logical_and(tmpl, mask).sum()
        union = np.logical_or(tmpl, mask).sum()
        best = max(best, inter / union if union else 0.0)
        if shape == "circle":
            break
    return float(best)


def classify_shape(track: Track) -> str | None:
    found = track.found
    if not found:
        return None
    score = {s: 0.0 for s in SHAPES}
    for f in found:
        d = track.frames[f]
        for s in SHAPES:
            score[s] += _template_iou(d.mask, s, d.centroid, d.area)
    return max(SHAPES, key=lambda s: score[s])


@dataclass(frozen=True)
class ActionThresholds:
    slide_speed: float = 0.4  # px / frame of fitted horizontal drift
    bounce_range: float = 2.0  # px of vertical travel
    spin_rate: float = 20.0  # mean |orientation change| per frame, degrees
    grow_ratio: float = 1.5  # fitted area growth over the clip


def classify_action(track: Track, th: ActionThresholds = ActionThresholds()) -> str | None:
    found = track.found
    if len(found) < 2:
        return None
    f = np.array(found, np.float64)
    det = [track.frames[i] for i in found]
    x = np.array([d.centroid[0] for d in det])
    y = np.array([d.centroid[1] for d in det])
    area = np.array([d.area for d in det], np.float64)
    angles = [(i, d.orientation) for i, d in zip(found, det) if d.orientation is not None]
    if len(angles) >= 2:
        steps = []
        for (i0, a0), (i1, a1) in zip(angles, angles[1:]):
            d = (a1 - a0 + 180.0) % 360.0 - 180.0
            steps.append(abs(d) / (i1 - i0))
        if np.mean(steps) > th.spin_rate:
            return "spin"
    vx = np.polyfit(f, x, 1)[0]
    if abs(vx) > th.slide_speed:
        return "slide-right" if vx > 0 else "slide-left"
    if y.max() - y.min() > th.bounce_range:
        return "bounce"
    slope, icpt = np.polyfit(f, area, 1)
    a0 = icpt + slope * f[0]
    a1 = icpt + slope * f[-1]
    if a0 > 0 and a1 / a0 > th.grow_ratio:
        return "grow"
    return "still"


def attribute_vector(shape: str | None, action: str | None) -> np.ndarray:
    v = np.zeros(len(SHAPES) + len(ACTIONS))
    if shape is not None:
        v[SHAPES.index(shape)] = 1.0
    if action is not None:
        v[len(SHAPES) + ACTIONS.index(action)] = 1.0
    return v


def clip_t_proxy(track: Track | None, clause: SubjectClause) -> float:
    """Cosine between the clause's (shape, action) one-hot and the measured one: 0, 0.5 or 1."""
    if track is None or track.missing:
        return 0.0
    want = attribute_vector(clause.shape, clause.action)
    got = attribute_vector(classify_shape(track), classify_action(track) if clause.action else None)
    dot, nn = float(want @ got), float(want @ want) * float(got @ got)
    # one-hot blocks: sqrt of the norm product is exact, so matches land on 0, 0.5 and 1 exactly
    return dot / math.sqrt(nn) if nn else 0.0


# ---------------------------------------------------------------- video-level

def pooled(frame: np.ndarray, cells: int = 8) -> np.ndarray:
    c, h, w = frame.shape
    if h % cells or w % cells:
        raise ContractError(f"frame {h}x{w} not divisible into {cells}x{cells} cells")
    return frame.reshape(c, cells, h // cells, cells, w // cells).mean((2, 4)).reshape(-1)


def t_cons(frames: np.ndarray) -> float:
    """Mean over consecutive frames of (1 + cos) / 2 between 8x8-pooled frames."""
    frames = np.asarray(frames, np.float64)
    if frames.shape[0] < 2:
        raise ContractError("temporal consistency needs at least two frames")
    vals = []
    for a, b in zip(frames[:-1], frames[1:]):
        pa, pb = pooled(a), pooled(b)
        na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
        cos = 1.0 if na == 0 and nb == 0 else (0.0 if na == 0 or nb == 0 else pa @ pb / (na * nb))
        vals.append((1.0 + cos) / 2.0)
    return float(np.clip(np.mean(vals), 0.0, 1.0))


def dync(frames: np.ndarray, kappa: float) -> float:
    """Mean absolute frame-to-frame change relative to ``kappa``, clipped to [0, 1]."""
    if kappa <= 0:
        raise ContractError("kappa must be positive")
    return float(np.clip(mean_abs_diff(frames) / kappa, 0.0, 1.0))


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchSubject:
    identity: str
    shape: str
    base_color: str
    accent_color: str

    def spec(self) -> SubjectSpec:
        return SubjectSpec(self.shape, self.base_color, self.accent_color, identity=self.identity)


@dataclass
class Combination:
    name: str
    subjects: list[str]  # identity tokens, left to right
    prompts: list[str]


@dataclass
class BenchSpec:
    subjects: list[BenchSubject]
    combinations: list[Combination]
    seeds: list[int] = field(default_factory=lambda: [0, 1])

    def subject(self, identity: str) -> BenchSubject:
        for s in self.subjects:
            if s.identity == identity:
                return s
        raise KeyError(f"unknown subject {identity}")

    @property
    def held_out(self) -> list[tuple[str, str, str]]:
        return [(s.shape, s.base_color, s.accent_color) for s in self.subjects]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "BenchSpec":
        return cls([BenchSubject(**s) for s in d["subjects"]],
                   [Combination(**c) for c in d["combinations"]], list(d.get("seeds", [0, 1])))

    @classmethod
    def load(cls, path) -> "BenchSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


METRICS = ("dino", "clip_t", "t_cons", "dync", "missing")


@dataclass
class MetricsReport:
    arm: str
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict[str, float]:
        return aggregate(self.rows)

    def to_json(self) -> dict:
        return {"arm": self.arm, "rows": self.rows, "aggregates": self.aggregates, "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        for k in ("arm", "rows"):
            if k not in d:
                raise ContractError(f"report lacks {k!r}")
        return cls(d["arm"], d["rows"], d.get("meta", {}))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def aggregate(rows: list[dict]) -> dict[str, float]:
    if not rows:
        return {m: 0.0 for m in METRICS}
    return {m: float(np.mean([r[m] for r in rows])) for m in METRICS}


def write_table(reports: list[MetricsReport], path) -> None:
    """One CSV row per arm with the mean of each metric."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["arm", *METRICS, "n"])
        for r in reports:
            agg = r.aggregates
            wr.writerow([r.arm, *(f"{agg[m]:.6f}" for m in METRICS), len(r.rows)])


def score_video(video: np.ndarray, clauses: list[SubjectClause], rects: list, refs: list[list[np.ndarray]],
                cal: Calibration) -> dict:
    """All metrics for one generated video; subject i is looked for inside ``rects[i]``."""
    dino, clip_t, missing = [], [], []
    for clause, rect, ref in zip(clauses, rects, refs):
        tr = track_subject(video, rect, cal)
        missing.append(float(tr.missing))
        dino.append(0.0 if tr.missing else dino_proxy(video, tr, ref))
        clip_t.append(clip_t_proxy(tr, clause))
    return {
        "dino": float(np.mean(dino)),
        "clip_t": float(np.mean(clip_t)),
        "t_cons": t_cons(video),
        "dync": dync(video, cal.kappa),
        "missing": float(np.mean(missing)),
        "subject_dino": dino,
        "subject_clip_t": clip_t,
        "subject_missing": missing,
    }


@lru_cache(maxsize=64)
def _reference_bank(subject: SubjectSpec, world: WorldConfig, count: int, seed: int) -> tuple:
    from .numerics import Stream
    from .scenesynth.mix import reference_set
    refs = reference_set(subject, world, count, Stream(seed, "refs", subject.identity or "", *subject.triple))
    return tuple(reference_features(refs.images))
