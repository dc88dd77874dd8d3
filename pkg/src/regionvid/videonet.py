"""Noise-prediction U-Net over frame batches with temporal attention and LoRA.

Frames are folded into the batch axis so every spatial layer treats them as
independent images; temporal blocks then mix information across the frame
axis at each spatial position. Temporal blocks start as exact identities.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapters import LoRALinear, adapter_state, lora_layers
from .attention import CrossAttention, LayoutError, RegionLayout
from .numerics import ShapeError, conv2d, group_norm, silu, timestep_embedding, upsample_nearest
from .textcond import TextEncoder, Vocabulary


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: tuple[int, int] = (64, 128)
    in_channels: int = 3
    text_dim: int = 64
    max_tokens: int = 16
    text_layers: int = 2
    groups: int = 8
    self_attn_heads: int = 4
    # feature maps larger than this skip self-attention (0 = attend everywhere)
    self_attn_max_res: int = 0
    temporal_heads: int = 4
    max_frames: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def frame_merge(video: torch.Tensor) -> torch.Tensor:
    """[B, F, C, H, W] -> [B*F, C, H, W], index b*F + f."""
    if video.dim() != 5:
        raise ShapeError(f"expected [B, F, C, H, W], got {tuple(video.shape)}")
    b, f = video.shape[:2]
    return video.reshape(b * f, *video.shape[2:])


def frame_unmerge(x: torch.Tensor, frames: int) -> torch.Tensor:
    if x.shape[0] % frames:
        raise ShapeError(f"batch of {x.shape[0]} is not a multiple of {frames} frames")
    return x.reshape(x.shape[0] // frames, frames, *x.shape[1:])


@dataclass
class Conditioning:
    """Prompt encodings plus the spatial routing of each batch item.

    ``texts`` is ``[B, N, L, d]``. ``layouts`` holds one layout per item when
    routing is on (``None`` means a single prompt attended everywhere).
    """

    texts: torch.Tensor
    layouts: Sequence[RegionLayout | None] | None = None

    def region_map(self, h: int, w: int) -> torch.Tensor | None:
        if self.texts.shape[1] == 1:
            return None
        if self.layouts is None:
            raise LayoutError("several prompts per item but no layouts")
        maps = []
        for lay in self.layouts:
            if lay is None:
                maps.append(np.zeros((h, w), dtype=np.int64))
            else:
                if lay.n_slots > self.texts.shape[1]:
                    raise LayoutError(f"layout needs {lay.n_slots} prompts, only {self.texts.shape[1]} given")
                maps.append(lay.rasterize(h, w))
        return torch.from_numpy(np.stack(maps)).reshape(len(maps), h * w)

    def repeat_frames(self, frames: int) -> "Conditioning":
        if frames == 1:
            return self
        texts = self.texts.repeat_interleave(frames, dim=0)
        layouts = None if self.layouts is None else [l for l in self.layouts for _ in range(frames)]
        return Conditioning(texts, layouts)


# ---------------------------------------------------------------- blocks

class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride)


class GroupNorm(nn.Module):
    def __init__(self, groups: int, channels: int):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.weight, self.bias)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = GroupNorm(groups, cin)
        self.conv1 = Conv(cin, cout)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = GroupNorm(groups, cout)
        self.conv2 = Conv(cout, cout)
        self.skip = Conv(cin, cout, k=1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(dim, dim, bias=False)
        self.k = LoRALinear(dim, dim, bias=False)
        self.v = LoRALinear(dim, dim, bias=False)
        self.out = LoRALinear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        q, k, v = (m(x).view(b, n, self.heads, c // self.heads).transpose(1, 2) for m in (self.q, self.k, self.v))
        att = F.scaled_dot_product_attention(q, k, v)
        return self.out(att.transpose(1, 2).reshape(b, n, c))


class SpatialTransformer(nn.Module):
    """Per-frame self-attention then (optionally routed) cross-attention."""

    def __init__(self, dim: int, text_dim: int, heads: int, groups: int, use_self: bool):
        super().__init__()
        self.norm_in = GroupNorm(groups, dim)
        self.norm_self = nn.LayerNorm(dim) if use_self else None
        self.self_attn = SelfAttention(dim, heads) if use_self else None
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, text_dim)

    def forward(self, x, cond: Conditioning):
        b, c, h, w = x.shape
        t = self.norm_in(x).flatten(2).transpose(1, 2)
        if self.self_attn is not None:
            t = t + self.self_attn(self.norm_self(t))
        t = t + self.cross_attn(self.norm_cross(t), cond.texts, cond.region_map(h, w))
        return x + t.transpose(1, 2).reshape(b, c, h, w)


class TemporalModule(nn.Module):
    """Attention over the frame axis at each spatial position.

    The output projection starts at zero, so the block is an exact identity
    until training moves it; ``gate`` scales the residual per channel.
    """

    def __init__(self, dim: int, heads: int, max_frames: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.gate = nn.Parameter(torch.ones(dim))
        pos = timestep_embedding(torch.arange(max_frames), dim)
        self.register_buffer("frame_pos", pos, persistent=False)

    def forward(self, x, frames: int):
        bf, c, h, w = x.shape
        b = bf // frames
        t = x.reshape(b, frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, frames, c)
        z = self.norm(t) + self.frame_pos[:frames]
        q, k, v = (u.view(-1, frames, self.heads, c // self.heads).transpose(1, 2)
                   for u in self.qkv(z).chunk(3, dim=-1))
        att = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(-1, frames, c)
        t = t + self.gate * self.proj(att)
        return t.reshape(b, h * w, frames, c).permute(0, 2, 3, 1).reshape(bf, c, h, w)


class Stage(nn.Module):
    def __init__(self, cin, cout, cfg: ModelConfig, temb: int, res: int):
        super().__init__()
        use_self = cfg.self_attn_max_res <= 0 or res <= cfg.self_attn_max_res
        self.res = ResBlock(cin, cout, temb, cfg.groups)
        self.attn = SpatialTransformer(cout, cfg.text_dim, cfg.self_attn_heads, cfg.groups, use_self)
        self.temporal = TemporalModule(cout, cfg.temporal_heads, cfg.max_frames)

    def forward(self, x, emb, cond, frames, temporal):
        x = self.attn(self.res(x, emb), cond)
        if temporal:
            x = self.temporal(x, frames)
        return x


class UNet(nn.Module):
    """Two down stages, a middle stage and two up stages with skips."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.channels
        s = cfg.image_size
        temb = 4 * c1
        self.temb_dim = c1
        self.time_mlp = nn.Sequential(nn.Linear(c1, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.stem = Conv(cfg.in_channels, c1)
        self.down1 = Stage(c1, c1, cfg, temb, s)
        self.pool1 = Conv(c1, c1, stride=2)
        self.down2 = Stage(c1, c2, cfg, temb, s // 2)
        self.pool2 = Conv(c2, c2, stride=2)
        self.mid = Stage(c2, c2, cfg, temb, s // 4)
        self.up2 = Stage(2 * c2, c2, cfg, temb, s // 2)
        self.up1 = Stage(c2 + c1, c1, cfg, temb, s)
        self.out_norm = GroupNorm(cfg.groups, c1)
        self.out = Conv(c1, cfg.in_channels)
        nn.init.zeros_(self.out.weight)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: Conditioning, temporal: bool = True) -> torch.Tensor:
        """z: [B, F, C, H, W]; t: [B]; cond holds one entry per video."""
        b, frames = z.shape[:2]
        x = frame_merge(z)
        emb = self.time_mlp(timestep_embedding(t.repeat_interleave(frames), self.temb_dim))
        cond = cond.repeat_frames(frames)
        temporal = temporal and frames > 1
        h = self.stem(x)
        h1 = self.down1(h, emb, cond, frames, temporal)
        h2 = self.down2(self.pool1(h1), emb, cond, frames, temporal)
        h = self.mid(self.pool2(h2), emb, cond, frames, temporal)
        h = self.up2(torch.cat([upsample_nearest(h), h2], 1), emb, cond, frames, temporal)
        h = self.up1(torch.cat([upsample_nearest(h), h1], 1), emb, cond, frames, temporal)
        out = self.out(silu(self.out_norm(h)))
        return frame_unmerge(out, frames)

    def temporal_parameters(self):
        for name, p in self.named_parameters():
            if ".temporal." in name:
                yield name, p

    def spatial_parameters(self):
        for name, p in self.named_parameters():
            if ".temporal." not in name:
                yield name, p


class ModelBundle(nn.Module):
    """Denoiser and text encoder, checkpointed together."""

    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.unet = UNet(self.cfg)
        self.text = TextEncoder(vocab, self.cfg.max_tokens, self.cfg.text_dim, self.cfg.text_layers)

    @property
    def vocab(self) -> Vocabulary:
        return self.text.vocab

    def base_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if ".lora_" not in k}

    def meta(self) -> dict:
        cfg = asdict(self.cfg)
        cfg["channels"] = list(cfg["channels"])
        return {"model": cfg, "vocab": self.vocab.to_json()}


def unet_forward(bundle: ModelBundle, z_t: torch.Tensor, t: torch.Tensor | int, cond: list,
                 layout: RegionLayout | None, use_sdca: bool, temporal: bool) -> torch.Tensor:
    """Predict noise for a batch of videos sharing one prompt set.

    ``cond`` lists ``[L, d]`` encodings: one (vanilla) or one per layout slot.
    """
    b = z_t.shape[0]
    if not cond:
        raise LayoutError("empty conditioning")
    if isinstance(t, int):
        t = torch.full((b,), t, dtype=torch.long)
    if use_sdca:
        if layout is None or layout.n_slots != len(cond):
            raise LayoutError(f"layout slots ({None if layout is None else layout.n_slots}) != prompts ({len(cond)})")
        texts = torch.stack(cond)[None].expand(b, -1, -1, -1)
        c = Conditioning(texts, [layout] * b)
    else:
        if len(cond) != 1:
            raise LayoutError("vanilla attention takes exactly one prompt")
        c = Conditioning(cond[0][None, None].expand(b, 1, -1, -1))
    return bundle.unet(z_t, t, c, temporal=temporal)


# ---------------------------------------------------------------- LoRA

LORA_TARGETS = ("q", "k", "v", "out", "text")


def attach_lora(bundle: ModelBundle, targets: Sequence[str] = LORA_TARGETS, rank: int = 16,
                alpha: float | None = None, seed: int = 0) -> list[LoRALinear]:
    """Attach adapters to U-Net attention projections and/or the text encoder.

    Freezes every base parameter; only adapter factors remain trainable.
    """
    unknown = set(targets) - set(LORA_TARGETS)
    if unknown:
        raise ValueError(f"unknown LoRA targets {sorted(unknown)}")
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    for p in bundle.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    proj = {t for t in targets if t != "text"}
    attached = []
    for name, layer in lora_layers(bundle.unet).items():
        if ".temporal." in name:
            continue
        if name.rsplit(".", 1)[-1] in proj:
            layer.attach(min(rank, layer.in_features, layer.out_features), alpha, gen)
            attached.append(layer)
    if "text" in targets:
        for layer in lora_layers(bundle.text).values():
            layer.attach(min(rank, layer.in_features, layer.out_features), alpha, gen)
            attached.append(layer)
    return attached


def lora_parameters(bundle: ModelBundle, part: str):
    module = bundle.text if part == "text" else bundle.unet
    for layer in lora_layers(module).values():
        if layer.has_adapter:
            yield layer.lora_A
            yield layer.lora_B


def merge_lora(bundle: ModelBundle, clear: bool = False) -> ModelBundle:
    for layer in lora_layers(bundle).values():
        layer.merge()
        if clear:
            layer.clear()
    return bundle


def clear_lora(bundle: ModelBundle) -> None:
    for layer in lora_layers(bundle).values():
        layer.clear()


def load_adapters(bundle: ModelBundle, state: dict[str, torch.Tensor], scale: float = 1.0) -> None:
    layers = lora_layers(bundle)
    for key, value in state.items():
        name, part = key.rsplit(".", 1)
        layer = layers[name]
        if not layer.has_adapter:
            layer.lora_A = nn.Parameter(torch.zeros(value.shape[0] if part == "lora_A" else value.shape[1],
                                                    layer.in_features))
            layer.lora_B = nn.Parameter(torch.zeros(layer.out_features, layer.lora_A.shape[0]))
            layer.scale = scale
        getattr(layer, part).data.copy_(value)


__all__ = [
    "ModelConfig", "ModelBundle", "UNet", "Conditioning", "TemporalModule", "frame_merge", "frame_unmerge",
    "unet_forward", "attach_lora", "merge_lora", "clear_lora", "load_adapters", "lora_parameters",
    "adapter_state",
]
