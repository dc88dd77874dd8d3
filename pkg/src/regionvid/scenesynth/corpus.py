"""Pretraining corpus: balanced random scenes with captions, minus held-out subjects."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import Stream
from ..textcond import ACTIONS, BACKGROUNDS, SHAPES, PromptAST, SubjectClause
from .render import (
    PALETTE,
    ActionSpec,
    PlacedSubject,
    SceneError,
    SceneSpec,
    SubjectSpec,
    WorldConfig,
    place_in_box,
    render_video,
    trajectory_extent,
)


@dataclass(frozen=True)
class CorpusConfig:
    images: int = 2000
    videos: int = 2000
    subject_count_probs: tuple[float, ...] = (0.5, 0.5)  # P(1 subject), P(2 subjects), ...
    p_background_word: float = 0.75
    p_action_word: float = 0.85

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if "subject_count_probs" in d:
            d["subject_count_probs"] = tuple(d["subject_count_probs"])
        return cls(**d)


@dataclass
class CorpusItem:
    index: int
    kind: str  # "image" | "video"
    scene: SceneSpec
    caption: PromptAST
    # per-subject trajectory boxes in normalised coords (for routed training)
    boxes: list[tuple[float, float, float, float]]
    frame: int = 0  # which frame an image item shows

    def to_json(self) -> dict:
        return {"index": self.index, "kind": self.kind, "scene": self.scene.to_json(),
                "caption": self.caption.render(), "boxes": [list(b) for b in self.boxes], "frame": self.frame}


class _Balanced:
    """Draws values in shuffled full passes so histograms stay flat."""

    def __init__(self, values, stream: Stream):
        self.values = list(values)
        self.stream = stream
        self.queue: list = []

    def next(self, exclude=()):
        for _ in range(4 * len(self.values)):
            if not self.queue:
                self.queue = [self.values[i] for i in self.stream.permutation(len(self.values))]
            v = self.queue.pop(0)
            if v not in exclude:
                return v
            self.queue.append(v)
        raise SceneError("no admissible value")


def random_subject(stream: Stream, shape: str, held_out: set) -> SubjectSpec:
    colors = sorted(PALETTE)
    while True:
        base, accent = stream.choice(colors, size=2, replace=False)
        if (shape, base, accent) not in held_out:
            return SubjectSpec(shape, base, accent)


def make_scene(stream: Stream, world: WorldConfig, n_subjects: int, shapes, actions, background: str,
               held_out: set, frames: int) -> tuple[SceneSpec, list]:
    """Subjects in balanced left-to-right strips (or anywhere, when alone)."""
    size = world.image_size
    placed, boxes = [], []
    for i in range(n_subjects):
        subject = random_subject(stream, shapes[i], held_out)
        act = ActionSpec.default(actions[i], world)
        if n_subjects == 1:
            box = (0.0, 0.0, float(size), float(size))
        else:
            x0 = size * i / n_subjects
            box = (x0, 0.0, size * (i + 1) / n_subjects, float(size))
        theta0 = float(stream.uniform(0, 360)) if act.action == "spin" else None
        ps = place_in_box(subject, act, box, world, frames, stream.random(), stream.random(), theta0)
        placed.append(ps)
        x0, y0, x1, y1 = trajectory_extent(ps, frames, world.radius)
        boxes.append(tuple(float(np.clip(v / size, 0.0, 1.0)) for v in (x0, y0, x1, y1)))
    return SceneSpec(tuple(placed), background, frames, size, world), boxes


def gen_corpus(cfg: CorpusConfig, world: WorldConfig, seed: int, held_out=()) -> list[CorpusItem]:
    if cfg.images < 0 or cfg.videos < 0 or cfg.images + cfg.videos < 1:
        raise ValueError("corpus needs at least one item")
    held_out = {tuple(t) for t in held_out}
    root = Stream(seed, "corpus")
    shapes = _Balanced(SHAPES, root.child("shape"))
    actions = _Balanced(ACTIONS, root.child("action"))
    backgrounds = _Balanced(BACKGROUNDS, root.child("background"))
    probs = np.asarray(cfg.subject_count_probs, dtype=float)
    probs = probs / probs.sum()
    items = []
    kinds = ["image"] * cfg.images + ["video"] * cfg.videos
    for index, kind in enumerate(kinds):
        s = root.child("item", index)
        n = int(np.searchsorted(np.cumsum(probs), s.random(), side="right")) + 1
        n = min(n, len(probs))
        shp = [shapes.next() for _ in range(n)]
        # three or more strips are too narrow for a slide
        no_slide = ("slide-right", "slide-left") if n >= 3 else ()
        act = [actions.next(exclude=no_slide) for _ in range(n)]
        bg = backgrounds.next()
        frames = world.frames
        scene, boxes = make_scene(s, world, n, shp, act, bg, held_out, frames)
        clauses = tuple(
            SubjectClause(ps.subject.shape, ps.action.action if s.random() < cfg.p_action_word else None)
            for ps in scene.subjects
        )
        caption = PromptAST(clauses, bg if s.random() < cfg.p_background_word else None)
        frame = int(s.integers(0, frames)) if kind == "image" else 0
        items.append(CorpusItem(index, kind, scene, caption, boxes, frame))
    return items


def render_corpus(items: list[CorpusItem]) -> dict[str, np.ndarray]:
    """Pixel arrays for training: images [n, 3, H, W] and videos [n, F, 3, H, W] as uint8."""
    imgs, vids = [], []
    for it in items:
        frames, _ = render_video(it.scene)
        q = to_uint8(frames)
        if it.kind == "image":
            imgs.append(q[it.frame])
        else:
            vids.append(q)
    out = {}
    if imgs:
        out["images"] = np.stack(imgs)
    if vids:
        out["videos"] = np.stack(vids)
    return out


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32) / 127.5 - 1.0
