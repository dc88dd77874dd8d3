"""Reference renders, alpha segmentation, co-occurrence composites and motion-prior images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..attention import RegionLayout
from ..diffusion import NoiseSchedule, SamplerConfig
from ..numerics import Stream
from ..textcond import ACTIONS, BACKGROUNDS, PromptAST, SubjectClause
from .render import POSE, SceneError, SubjectSpec, WorldConfig, reference_rgba, render_background, sprite_extent

DEFAULT_MOTION_COUNT = 200


@dataclass
class SubjectRefs:
    subject: SubjectSpec
    images: np.ndarray  # [M, 4, H, W]: RGB in [-1, 1] plus alpha

    @property
    def rgb(self) -> np.ndarray:
        return self.images[:, :3]


@dataclass
class MixSample:
    image: np.ndarray  # [3, H, W]
    masks: np.ndarray  # [N, H, W] bool
    background: np.ndarray  # [3, H, W]


@dataclass
class MotionSample:
    image: np.ndarray  # [3, H, W]
    prompts: tuple[PromptAST, ...]


def reference_set(subject: SubjectSpec, world: WorldConfig, count: int, stream: Stream) -> SubjectRefs:
    """``count`` (3-5) stills of one subject at varied positions, scales and backgrounds."""
    if not 1 <= count:
        raise ValueError("need at least one reference image")
    n = world.image_size
    out = []
    for j in range(count):
        scale = float(stream.uniform(0.9, 1.1))
        x0, y0, x1, y1 = sprite_extent(subject.shape, 0.0, 0.0, POSE["still"], world.radius * subject.size * scale)
        cx = float(stream.uniform(0.5 - x0, n - 0.5 - x1))
        cy = float(stream.uniform(0.5 - y0, n - 0.5 - y1))
        bg = stream.choice(BACKGROUNDS)
        out.append(reference_rgba(subject, world, bg, (cx, cy), scale))
    return SubjectRefs(subject, np.stack(out))


def segment_subject(rgba: np.ndarray) -> np.ndarray:
    """Binary subject mask from an image carrying alpha (channel 3): alpha > 0.5."""
    if rgba.ndim != 3 or rgba.shape[0] != 4:
        raise SceneError("segmentation needs a [4, H, W] image with an alpha channel")
    return rgba[3] > 0.5


def cutout(rgba: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tight (pixels, mask) crop around the segmented subject."""
    mask = segment_subject(rgba)
    if not mask.any():
        raise SceneError("reference has an empty subject mask")
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    return rgba[:3, y0:y1, x0:x1].copy(), mask[y0:y1, x0:x1].copy()


def region_bbox(idx: np.ndarray, slot: int) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(idx == slot)
    if len(ys) == 0:
        raise SceneError(f"slot {slot} has no cells at this resolution")
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def procedural_background(stream: Stream, size: int) -> np.ndarray:
    return render_background(stream.choice(BACKGROUNDS), size, size)


def synth_mix(refs: list[SubjectRefs], layout: RegionLayout, count: int, stream: Stream,
              background=None) -> list[MixSample]:
    """Paste segmented subject i into region i of ``layout`` over a background, ``count`` times.

    ``background``: ``None`` for procedural backgrounds, or a callable
    ``(stream) -> [3, H, W]`` (e.g. a sampler on the pretrained model).
    """
    slots = layout.subject_slots
    if len(refs) > len(slots):
        raise SceneError(f"{len(refs)} subjects but the layout has {len(slots)} regions")
    size = refs[0].images.shape[-1]
    idx = layout.rasterize(size, size)
    out = []
    for j in range(count):
        s = stream.child("mix", j)
        bg = procedural_background(s, size) if background is None else np.asarray(background(s), np.float32)
        img = bg.copy()
        masks = np.zeros((len(refs), size, size), dtype=bool)
        for i, r in enumerate(refs):
            pix, m = cutout(r.images[int(s.integers(0, len(r.images)))])
            y0, y1, x0, x1 = region_bbox(idx, slots[i])
            h, w = m.shape
            if h > y1 - y0 or w > x1 - x0:
                raise SceneError(f"subject {i} ({w}x{h}px) is larger than its region ({x1 - x0}x{y1 - y0}px)")
            for _ in range(64):
                oy = y0 + int(s.integers(0, y1 - y0 - h + 1))
                ox = x0 + int(s.integers(0, x1 - x0 - w + 1))
                if (idx[oy:oy + h, ox:ox + w][m] == slots[i]).all():
                    break
            else:
                raise SceneError(f"subject {i} does not fit inside region {slots[i]}")
            full = np.zeros((size, size), dtype=bool)
            full[oy:oy + h, ox:ox + w] = m
            img[:, full] = pix[:, m]
            masks[i] = full
        out.append(MixSample(img, masks, bg))
    return out


def motion_prompts(categories: list[str], stream: Stream, actions=ACTIONS) -> tuple[PromptAST, ...]:
    return tuple(PromptAST((SubjectClause(c, stream.choice(list(actions))),)) for c in categories)


def gen_motion_prior(bundle, categories: list[str], layout: RegionLayout, schedule: NoiseSchedule,
                     sampler: SamplerConfig, seed: int, count: int = DEFAULT_MOTION_COUNT,
                     actions=ACTIONS, batch: int = 16) -> list[MotionSample]:
    """Single-frame routed generations with category-level prompts "a <shape> <action>"."""
    from ..generate import CondSpec, sample_batch

    if bundle is None:
        raise SceneError("motion-prior generation needs a pretrained model")
    if len(categories) != len(layout.regions):
        raise SceneError("one category per layout region required")
    prompt_sets = [motion_prompts(categories, Stream(seed, "motion", j), actions) for j in range(count)]
    specs = [CondSpec(p + ((None,) if layout.background_slot is not None else ()), layout) for p in prompt_sets]
    out = []
    bundle.eval()
    for start in range(0, count, batch):
        chunk = range(start, min(count, start + batch))
        seeds = [seed * 100003 + j for j in chunk]
        imgs = sample_batch(bundle, [specs[j] for j in chunk], seeds, schedule, sampler, frames=1, temporal=False)
        for j, img in zip(chunk, imgs[:, 0]):
            out.append(MotionSample(img.numpy(), prompt_sets[j]))
    return out
