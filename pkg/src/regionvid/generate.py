"""Prompt/layout to conditioning, and batched video sampling from a model bundle."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .attention import LayoutError, RegionLayout
from .diffusion import NoiseSchedule, SamplerConfig, sample
from .numerics import Stream
from .textcond import PromptAST, parse_prompt, region_prompts
from .videonet import Conditioning, ModelBundle


@dataclass(frozen=True)
class CondSpec:
    """What one batch item is conditioned on: prompts in slot order and an optional layout."""

    prompts: tuple[PromptAST | None, ...]
    layout: RegionLayout | None = None

    @classmethod
    def null(cls) -> "CondSpec":
        return cls((None,))


def routed_spec(p: PromptAST, layout: RegionLayout) -> CondSpec:
    n_regions = len(layout.regions)
    if len(p.clauses) != n_regions:
        raise LayoutError(f"prompt has {len(p.clauses)} subject clauses but the layout has {n_regions} regions")
    # a background slot without a background phrase gets the null prompt
    prompts = region_prompts(p, layout.background_slot is not None)
    if len(prompts) != layout.n_slots:
        raise LayoutError(f"layout expects {layout.n_slots} prompt slots, prompt supplies {len(prompts)}")
    return CondSpec(tuple(prompts), layout)


def cond_spec(p: PromptAST, layout: RegionLayout | None, use_sdca: bool) -> CondSpec:
    if use_sdca and layout is not None:
        return routed_spec(p, layout)
    return CondSpec((p,))


def build_conditioning(bundle: ModelBundle, specs: list[CondSpec]) -> Conditioning:
    """Encode every distinct prompt once and pack ``[B, N, L, d]`` with null padding."""
    uniq: dict = {}
    for s in specs:
        for p in s.prompts:
            if p is not None and p not in uniq:
                uniq[p] = len(uniq)
    enc = bundle.text(list(uniq)) if uniq else None
    null = bundle.text.null_seq
    n = max(len(s.prompts) for s in specs)
    rows = []
    for s in specs:
        seqs = [null if p is None else enc[uniq[p]] for p in s.prompts]
        seqs += [null] * (n - len(seqs))
        rows.append(torch.stack(seqs))
    texts = torch.stack(rows)
    layouts = [s.layout if len(s.prompts) > 1 else None for s in specs] if n > 1 else None
    return Conditioning(texts, layouts)


def null_conditioning(bundle: ModelBundle, batch: int) -> Conditioning:
    return Conditioning(bundle.text.null_seq[None, None].expand(batch, 1, -1, -1))


def eps_model(bundle: ModelBundle, temporal: bool):
    def fn(z_t, t, cond):
        return bundle.unet(z_t, t, cond, temporal=temporal)
    return fn


@torch.no_grad()
def sample_batch(bundle: ModelBundle, specs: list[CondSpec], seeds: list[int], schedule: NoiseSchedule,
                 sampler: SamplerConfig, frames: int, temporal: bool = True) -> torch.Tensor:
    """Videos ``[B, F, C, H, W]``; item i's initial noise depends only on ``seeds[i]``.

    With ``sampler.frame_noise == "shared"`` all frames of an item start from
    one noise image, so frame-to-frame change comes from the temporal modules
    alone rather than from independent per-frame noise.
    """
    c = bundle.cfg
    shape = (frames, c.in_channels, c.image_size, c.image_size)
    if sampler.frame_noise == "shared":
        noise = torch.stack([Stream(s, "sample").normal(shape[1:]).expand(shape) for s in seeds]).contiguous()
    else:
        noise = torch.stack([Stream(s, "sample").normal(shape) for s in seeds])
    cond = build_conditioning(bundle, specs)
    null = null_conditioning(bundle, len(specs))
    return sample(eps_model(bundle, temporal), noise.shape, cond, schedule, sampler, null, noise=noise)


def sample_video(bundle: ModelBundle, prompt, layout: RegionLayout | None, sampler: SamplerConfig,
                 schedule: NoiseSchedule, frames: int, use_sdca: bool = True, temporal: bool = True) -> torch.Tensor:
    """One ``[F, C, H, W]`` video for a composite prompt, routed per layout when ``use_sdca``."""
    p = parse_prompt(prompt, bundle.vocab) if isinstance(prompt, str) else prompt
    spec = cond_spec(p, layout, use_sdca)
    was_training = bundle.training
    bundle.eval()
    try:
        return sample_batch(bundle, [spec], [sampler.seed], schedule, sampler, frames, temporal)[0]
    finally:
        bundle.train(was_training)
