"""Cross-attention with optional spatial routing of queries to per-region prompts.

A :class:`RegionLayout` assigns every latent query position to one prompt
slot. Routed attention lets the queries of slot ``i`` see only the keys and
values of prompt ``i``; with a single slot it is ordinary cross-attention.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn

from .adapters import LoRALinear
from .numerics import ShapeError, softmax_rows

MAX_REGIONS = 8


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    rect: tuple[float, float, float, float]  # x0, y0, x1, y1 in [0, 1]
    slot: int
    priority: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.rect
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise LayoutError(f"empty or out-of-range rect {self.rect}")
        if self.slot < 0:
            raise LayoutError("negative prompt slot")

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.rect
        return (x1 - x0) * (y1 - y0)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.rect
        return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


@dataclass(frozen=True)
class RegionLayout:
    regions: tuple[Region, ...]
    background_slot: int | None = None
    uniform: int | None = None  # set by uniform_layout: balanced integer strips

    def __post_init__(self):
        if not self.regions:
            raise LayoutError("layout needs at least one region")
        pr = [r.priority for r in self.regions]
        if len(set(pr)) != len(pr):
            raise LayoutError(f"region priorities must be unique, got {pr}")

    @property
    def n_slots(self) -> int:
        slots = [r.slot for r in self.regions]
        if self.background_slot is not None:
            slots.append(self.background_slot)
        return max(slots) + 1

    @property
    def subject_slots(self) -> list[int]:
        return [r.slot for r in self.regions]

    def rasterize(self, h: int, w: int) -> np.ndarray:
        return _rasterize(self, int(h), int(w)).copy()

    def to_json(self) -> dict:
        if self.uniform is not None:
            return {"uniform": self.uniform}
        return {
            "regions": [{"rect": list(r.rect), "slot": r.slot, "priority": r.priority} for r in self.regions],
            "background_slot": self.background_slot,
        }

    def __str__(self) -> str:
        if self.uniform is not None:
            return f"uniform:{self.uniform}"
        return json.dumps(self.to_json(), sort_keys=True)


@lru_cache(maxsize=512)
def _rasterize(layout: RegionLayout, h: int, w: int) -> np.ndarray:
    if h < 1 or w < 1:
        raise LayoutError("feature map must be at least 1x1")
    out = np.full((h, w), -1, dtype=np.int64)
    if layout.uniform is not None:
        n = layout.uniform
        widths = [w // n + (1 if i < w % n else 0) for i in range(n)]
        start = 0
        for region, width in zip(layout.regions, widths):
            out[:, start:start + width] = region.slot
            start += width
    else:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        for region in sorted(layout.regions, key=lambda r: r.priority):
            out[region.contains(xs, ys)] = region.slot
        if (out < 0).any():
            if layout.background_slot is None:
                raise LayoutError(f"cells outside every region and no background slot at {h}x{w}")
            out[out < 0] = layout.background_slot
    out.setflags(write=False)
    return out


def uniform_layout(n: int) -> RegionLayout:
    """``n`` equal vertical strips, left to right in prompt order."""
    if not 1 <= n <= MAX_REGIONS:
        raise LayoutError(f"uniform layout needs 1..{MAX_REGIONS} regions, got {n}")
    regions = tuple(Region((i / n, 0.0, (i + 1) / n, 1.0), slot=i, priority=i) for i in range(n))
    return RegionLayout(regions, None, uniform=n)


def custom_layout(rects: list, background: bool = True, priorities: list[int] | None = None) -> RegionLayout:
    """Regions in slot order; by default smaller rects take precedence."""
    regions_in = [tuple(float(v) for v in r) for r in rects]
    if priorities is None:
        areas = [(x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in regions_in]
        order = sorted(range(len(regions_in)), key=lambda i: (-areas[i], i))
        priorities = [0] * len(regions_in)
        for rank, i in enumerate(order):
            priorities[i] = rank
    regions = tuple(Region(r, slot=i, priority=int(p)) for i, (r, p) in enumerate(zip(regions_in, priorities)))
    return RegionLayout(regions, len(regions) if background else None)


def parse_layout(spec) -> RegionLayout:
    """Accept ``"uniform:N"``, a JSON string, or an already-decoded dict/list."""
    if isinstance(spec, RegionLayout):
        return spec
    if isinstance(spec, str):
        s = spec.strip()
        if s.startswith("uniform:"):
            try:
                return uniform_layout(int(s.split(":", 1)[1]))
            except ValueError as e:
                raise LayoutError(f"bad layout shorthand {spec!r}") from e
        try:
            spec = json.loads(s)
        except json.JSONDecodeError as e:
            raise LayoutError(f"layout is neither uniform:N nor JSON: {spec!r}") from e
    if isinstance(spec, dict) and "uniform" in spec:
        return uniform_layout(int(spec["uniform"]))
    if isinstance(spec, list):
        spec = {"regions": spec, "background_slot": len(spec)}
    if not isinstance(spec, dict) or "regions" not in spec:
        raise LayoutError(f"unrecognised layout {spec!r}")
    entries = spec["regions"]
    rects = [e["rect"] if isinstance(e, dict) else e for e in entries]
    if all(isinstance(e, dict) and "priority" in e for e in entries):
        pri = [int(e["priority"]) for e in entries]
    else:
        pri = None
    layout = custom_layout(rects, background=False, priorities=pri)
    slots = [int(e.get("slot", i)) if isinstance(e, dict) else i for i, e in enumerate(entries)]
    regions = tuple(Region(r.rect, s, r.priority) for r, s in zip(layout.regions, slots))
    bg = spec.get("background_slot")
    return RegionLayout(regions, None if bg is None else int(bg))


# ---------------------------------------------------------------- attention

class CrossAttention(nn.Module):
    """Single-head cross-attention: W_Q from features, W_K / W_V from text.

    One set of projections serves every region.
    """

    def __init__(self, query_dim: int, context_dim: int, inner_dim: int | None = None):
        super().__init__()
        inner_dim = inner_dim or query_dim
        self.inner_dim = inner_dim
        self.q = LoRALinear(query_dim, inner_dim, bias=False)
        self.k = LoRALinear(context_dim, inner_dim, bias=False)
        self.v = LoRALinear(context_dim, inner_dim, bias=False)
        self.out = LoRALinear(inner_dim, query_dim)

    def attention_weights(self, x: torch.Tensor, ctx: torch.Tensor, region: torch.Tensor | None = None) -> torch.Tensor:
        b, n, L, _ = ctx.shape
        q = self.q(x)
        k = self.k(ctx.reshape(b, n * L, -1))
        logits = q @ k.transpose(1, 2) / math.sqrt(self.inner_dim)
        if n > 1:
            if region is None:
                raise LayoutError("several prompts need a region map")
            if int(region.max()) >= n or int(region.min()) < 0:
                raise LayoutError(f"region map refers to slot {int(region.max())} but only {n} prompts given")
            key_slot = torch.arange(n).repeat_interleave(L)
            allowed = region[:, :, None] == key_slot[None, None, :]
            logits = logits.masked_fill(~allowed, float("-inf"))
        return softmax_rows(logits)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, region: torch.Tensor | None = None) -> torch.Tensor:
        """x: [B, Q, C]; ctx: [B, N, L, d] prompts; region: [B, Q] slot per query."""
        if ctx.dim() != 4:
            raise ShapeError(f"context must be [B, N, L, d], got {tuple(ctx.shape)}")
        b, n, L, _ = ctx.shape
        w = self.attention_weights(x, ctx, region)
        v = self.v(ctx.reshape(b, n * L, -1))
        return self.out(w @ v)


def cross_attention(q_features: torch.Tensor, text: torch.Tensor, w: CrossAttention) -> torch.Tensor:
    """Vanilla attention of ``[m, d_model]`` queries over one ``[L, d]`` prompt."""
    if q_features.dim() != 2 or text.dim() != 2:
        raise ShapeError("cross_attention expects [m, d_model] queries and [L, d] text")
    return w(q_features[None], text[None, None])[0]


def sdca(q_features: torch.Tensor, texts: list[torch.Tensor], layout: RegionLayout, w: CrossAttention) -> torch.Tensor:
    """Region-routed attention over an ``[h, w, d_model]`` feature map."""
    h, wd, c = q_features.shape
    idx = layout.rasterize(h, wd)
    if layout.n_slots > len(texts):
        raise LayoutError(f"layout uses {layout.n_slots} prompt slots but {len(texts)} prompts given")
    ctx = torch.stack(list(texts))[None]
    region = torch.from_numpy(idx).reshape(1, -1)
    out = w(q_features.reshape(1, h * wd, c), ctx, region if len(texts) > 1 else None)
    return out.reshape(h, wd, c)
