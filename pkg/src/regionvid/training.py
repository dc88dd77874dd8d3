"""Base-model pretraining: image backbone first, then temporal modules on a frozen backbone."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .attention import custom_layout, uniform_layout
from .diffusion import NoiseSchedule, diffusion_loss
from .generate import CondSpec, build_conditioning, routed_spec
from .numerics import Stream, ensure_finite
from .scenesynth.corpus import CorpusItem, from_uint8
from .videonet import ModelBundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    image_steps: int = 3000
    video_steps: int = 1500
    image_batch: int = 32
    video_batch: int = 4
    lr: float = 5e-4
    video_lr: float = 1e-3
    weight_decay: float = 0.0
    warmup: int = 100
    grad_clip: float = 1.0
    p_uncond: float = 0.1
    p_routed: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**d)


def item_condition(item: CorpusItem, stream: Stream, cfg: PretrainConfig) -> CondSpec:
    """Null (prompt dropout), whole-caption, or region-routed conditioning for one item."""
    if stream.random() < cfg.p_uncond:
        return CondSpec.null()
    if stream.random() >= cfg.p_routed:
        return CondSpec((item.caption,))
    n = len(item.caption.clauses)
    if n == 1:
        x0, y0, x1, y1 = item.boxes[0]
        pad = 0.5 / item.scene.size
        rect = (max(0.0, x0 - pad), max(0.0, y0 - pad), min(1.0, x1 + pad), min(1.0, y1 + pad))
        return routed_spec(item.caption, custom_layout([rect], background=True))
    return routed_spec(item.caption, uniform_layout(n))


def _lr_at(step: int, base: float, warmup: int) -> float:
    return base * min(1.0, (step + 1) / max(1, warmup))


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)


def stage_params(bundle: ModelBundle, stage: str) -> list[torch.nn.Parameter]:
    """Set ``requires_grad`` for a stage and return its trainable parameters, in a fixed order.

    The image stage trains everything but the temporal modules; the video
    stage trains only the temporal modules.
    """
    if stage not in ("image", "video"):
        raise ValueError(f"unknown stage {stage!r}")
    temporal = {id(p) for _, p in bundle.unet.temporal_parameters()}
    for p in bundle.parameters():
        p.requires_grad_((id(p) in temporal) == (stage == "video"))
    return [p for p in bundle.parameters() if p.requires_grad]


def stage_lr(cfg: PretrainConfig, stage: str) -> float:
    return cfg.lr if stage == "image" else cfg.video_lr


def train_stage(bundle: ModelBundle, stage: str, items: list[CorpusItem], pixels: np.ndarray,
                schedule: NoiseSchedule, cfg: PretrainConfig, seed: int, steps: int,
                optimizer: torch.optim.Optimizer | None = None, start: int = 0, log_fh=None):
    """Run ``steps`` optimisation steps of one stage; returns (optimizer, losses).

    Every step draws from ``Stream(seed, "pretrain", stage, step)`` so a run
    resumed at ``start`` replays exactly what an uninterrupted run would do.
    """
    params = stage_params(bundle, stage)
    batch = cfg.image_batch if stage == "image" else cfg.video_batch
    lr = stage_lr(cfg, stage)
    temporal = stage == "video"
    if optimizer is None:
        optimizer = make_optimizer(params, lr, cfg.weight_decay)
    bundle.train()
    losses = []
    for step in range(start, start + steps):
        s = Stream(seed, "pretrain", stage, step)
        idx = s.integers(0, len(items), size=batch)
        specs = [item_condition(items[i], s.child("cond", k), cfg) for k, i in enumerate(idx)]
        if stage == "image":
            z0 = torch.from_numpy(from_uint8(pixels[idx]))[:, None]
        else:
            z0 = torch.from_numpy(from_uint8(pixels[idx]))
        with torch.set_grad_enabled(stage == "image"):
            cond = build_conditioning(bundle, specs)
        cond.texts = cond.texts if stage == "image" else cond.texts.detach()
        model = lambda z, t, c: bundle.unet(z, t, c, temporal=temporal)
        loss = diffusion_loss(model, z0, cond, schedule, s.child("noise"))
        ensure_finite(loss.detach(), f"{stage} loss at step {step}")
        for g in optimizer.param_groups:
            g["lr"] = _lr_at(step, lr, cfg.warmup)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        gn = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()
        losses.append(float(loss.detach()))
        if log_fh is not None:
            log_fh.write(json.dumps({"stage": stage, "step": step, "loss": float(loss.detach()), "grad_norm": float(gn)}) + "\n")
        if step % 200 == 0:
            log.info("%s step %d loss %.4f", stage, step, float(loss.detach()))
    return optimizer, losses


def split_items(items: list[CorpusItem]):
    images = [it for it in items if it.kind == "image"]
    videos = [it for it in items if it.kind == "video"]
    return images, videos
