"""Subject customization: finetuning objectives and the adapter training loop."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .adapters import adapter_state
from .attention import LayoutError, RegionLayout
from .diffusion import NoiseSchedule, default_schedule, q_sample, sample_timesteps
from .generate import CondSpec, build_conditioning
from .numerics import ContractError, Stream, ensure_finite
from .scenesynth.mix import MixSample, MotionSample, SubjectRefs
from .textcond import PromptAST, SubjectClause
from .videonet import ModelBundle, attach_lora, lora_parameters

log = logging.getLogger(__name__)

# (z_t [B, F, C, H, W], t [B], per-item conditioning) -> predicted noise
Denoiser = Callable[[torch.Tensor, torch.Tensor, list], torch.Tensor]

TERMS = ("naive", "multic", "masked", "motion")


class FinetuneConfigError(ValueError):
    pass


class BundleDenoiser:
    """Image-mode noise predictor on a bundle; text is encoded inside the call so text adapters get gradients."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle

    def __call__(self, z_t, t, specs: list[CondSpec]) -> torch.Tensor:
        cond = build_conditioning(self.bundle, specs)
        return self.bundle.unet(z_t, t, cond, temporal=False)


def _as_video(images: torch.Tensor) -> torch.Tensor:
    if images.dim() == 4:
        return images[:, None]
    if images.dim() == 5:
        return images
    raise ContractError(f"expected [B, C, H, W] images, got {tuple(images.shape)}")


def noised(z0: torch.Tensor, schedule: NoiseSchedule, stream: Stream):
    """(t, eps, z_t) drawn from ``stream``: timesteps first, then noise."""
    t = sample_timesteps(stream, z0.shape[0], schedule)
    eps = stream.normal(z0.shape)
    return t, eps, q_sample(z0, t.numpy(), eps, schedule)


def _mse(eps: torch.Tensor, pred: torch.Tensor, reduction: str) -> torch.Tensor:
    per_item = ((eps - pred) ** 2).flatten(1).mean(1)
    return per_item.mean() if reduction == "mean" else per_item.sum()


def _denoise(model: Denoiser, images: torch.Tensor, specs: list[CondSpec], schedule: NoiseSchedule,
             stream: Stream):
    z0 = _as_video(images)
    t, eps, z_t = noised(z0, schedule, stream)
    return eps, model(z_t, t, specs)


def subject_prompt(identity: str, shape: str) -> PromptAST:
    """The binding prompt for one customized subject, e.g. "a S1* circle"."""
    return PromptAST((SubjectClause(shape, None, identity),))


def routed(prompts: Sequence[PromptAST | None], layout: RegionLayout) -> CondSpec:
    """One prompt per layout region (``None`` = null prompt); the background slot, if any, gets null."""
    if len(prompts) != len(layout.regions):
        raise LayoutError(f"{len(prompts)} prompts for a layout with {len(layout.regions)} regions")
    tail = (None,) if layout.background_slot is not None else ()
    return CondSpec(tuple(prompts) + tail, layout)


# ---------------------------------------------------------------- loss terms

def loss_naive(model: Denoiser, subject_images: Sequence[torch.Tensor], prompts: Sequence[PromptAST],
               schedule: NoiseSchedule, stream: Stream, reduction: str = "mean") -> torch.Tensor:
    """Sum over subjects of the plain denoising loss on that subject's references, vanilla attention."""
    if not subject_images:
        raise ContractError("naive loss needs at least one subject")
    if len(subject_images) != len(prompts):
        raise ContractError("one prompt per subject required")
    total = None
    for i, (imgs, p) in enumerate(zip(subject_images, prompts)):
        if imgs.shape[0] == 0:
            raise ContractError(f"subject {i} has no images")
        eps, pred = _denoise(model, imgs, [CondSpec((p,))] * imgs.shape[0], schedule, stream.child("subject", i))
        term = _mse(eps, pred, reduction)
        total = term if total is None else total + term
    return total


def loss_cooccur(model: Denoiser, images: torch.Tensor, prompts: Sequence[PromptAST], layout: RegionLayout,
                 schedule: NoiseSchedule, stream: Stream, reduction: str = "mean") -> torch.Tensor:
    """Denoising loss on multi-subject composites with region-routed per-subject prompts."""
    spec = routed(prompts, layout)
    eps, pred = _denoise(model, images, [spec] * images.shape[0], schedule, stream)
    return _mse(eps, pred, reduction)


def latent_mask(mask: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Resample ``[..., H, W]`` masks to ``h x w``: area average, then keep cells at least half covered."""
    mask = mask.to(torch.float32)
    H, W = mask.shape[-2:]
    if (H, W) == (h, w):
        return mask > 0.5
    lead = mask.shape[:-2]
    m = torch.nn.functional.adaptive_avg_pool2d(mask.reshape(-1, 1, H, W), (h, w))
    return (m >= 0.5).reshape(*lead, h, w)


def masked_residual_loss(eps: torch.Tensor, pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared residual averaged over masked cells (all channels/frames of a cell count).

    ``mask`` is ``[B, H, W]`` against ``[B, F, C, H, W]`` noise; an empty mask
    gives zero with a warning.
    """
    if eps.shape != pred.shape:
        raise ContractError(f"noise {tuple(eps.shape)} vs prediction {tuple(pred.shape)}")
    m = mask.to(pred.dtype)[:, None, None].expand_as(pred)
    count = m.sum()
    sq = (eps - pred) ** 2 * m
    if float(count) == 0.0:
        warnings.warn("empty subject mask: masked loss is zero", RuntimeWarning, stacklevel=2)
        return sq.sum() * 0.0
    return sq.sum() / count


def masked_specs(i: int, prompts: Sequence[PromptAST], layout: RegionLayout) -> CondSpec:
    return routed([p if j == i else None for j, p in enumerate(prompts)], layout)


def loss_masked_single(model: Denoiser, images: torch.Tensor, i: int, prompts: Sequence[PromptAST],
                       layout: RegionLayout, masks: torch.Tensor, schedule: NoiseSchedule,
                       stream: Stream) -> torch.Tensor:
    """Subject i's denoising loss restricted to its mask; region i sees P_i, every other region the null prompt."""
    if not 0 <= i < len(prompts):
        raise ContractError(f"subject index {i} out of range")
    spec = masked_specs(i, prompts, layout)
    eps, pred = _denoise(model, images, [spec] * images.shape[0], schedule, stream)
    m = latent_mask(masks, pred.shape[-2], pred.shape[-1])
    return masked_residual_loss(eps, pred, m)


def check_motion_prompts(prompt_sets: Sequence[Sequence[PromptAST]]) -> None:
    for ps in prompt_sets:
        for p in ps:
            if p is not None and p.identities:
                raise ContractError(f"motion prompt carries identity tokens: {p}")


def loss_motion(model: Denoiser, images: torch.Tensor, prompt_sets: Sequence[Sequence[PromptAST]],
                layout: RegionLayout, schedule: NoiseSchedule, stream: Stream,
                reduction: str = "mean") -> torch.Tensor:
    """Routed denoising loss on motion-prior images with their category-level prompts (one set per image)."""
    if images.shape[0] == 0:
        raise ContractError("motion batch is empty")
    if len(prompt_sets) != images.shape[0]:
        raise ContractError("one prompt set per motion image required")
    check_motion_prompts(prompt_sets)
    specs = [routed(ps, layout) for ps in prompt_sets]
    eps, pred = _denoise(model, images, specs, schedule, stream)
    return _mse(eps, pred, reduction)


# ---------------------------------------------------------------- training loop

@dataclass(frozen=True)
class FinetuneConfig:
    iterations: int = 1000
    unet_lr: float = 1e-4
    text_lr: float = 2e-5
    rank: int = 16
    alpha: float | None = None  # None: alpha = rank
    weight_decay: float = 1e-2
    batch_naive: int = 4  # per subject
    batch_multic: int = 4
    batch_masked: int = 4
    batch_motion: int = 4
    seed: int = 0
    multic: bool = True
    masked: bool = True
    motion: bool = True
    sdca: bool = True  # routed generation; with every term off, falls back to the naive objective
    mix_count: int = 16
    motion_count: int = 200
    references: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)

    def terms(self) -> tuple[str, ...]:
        if self.iterations < 0:
            raise FinetuneConfigError("iterations must be >= 0")
        if self.unet_lr <= 0 or self.text_lr <= 0:
            raise FinetuneConfigError("learning rates must be positive")
        on = tuple(t for t, flag in (("multic", self.multic), ("masked", self.masked), ("motion", self.motion)) if flag)
        if on:
            return on
        if not self.sdca:
            return ("naive",)
        raise FinetuneConfigError("every finetuning term is disabled")


@dataclass
class CustomizationJob:
    bundle: ModelBundle
    subjects: list[SubjectRefs]
    layout: RegionLayout
    mix: list[MixSample] = field(default_factory=list)
    motion: list[MotionSample] = field(default_factory=list)
    schedule: NoiseSchedule = field(default_factory=default_schedule)

    def __post_init__(self):
        ids = [r.subject.identity for r in self.subjects]
        if any(i is None for i in ids) or len(set(ids)) != len(ids):
            raise ContractError(f"each subject needs its own identity token, got {ids}")
        for i in ids:
            if i not in self.bundle.vocab:
                raise ContractError(f"identity token {i} not in vocabulary")

    @property
    def prompts(self) -> list[PromptAST]:
        return [subject_prompt(r.subject.identity, r.subject.shape) for r in self.subjects]


@dataclass
class FinetuneResult:
    adapters: dict[str, torch.Tensor]
    log: list[dict]


def _check_data(job: CustomizationJob, terms) -> None:
    if ("multic" in terms or "masked" in terms) and not job.mix:
        raise ContractError("co-occurrence terms need composites")
    if "motion" in terms and not job.motion:
        raise ContractError("motion term needs motion-prior images")
    if "naive" in terms and any(len(r.images) == 0 for r in job.subjects):
        raise ContractError("naive term needs reference images")


def finetune(job: CustomizationJob, cfg: FinetuneConfig, log_fh=None) -> FinetuneResult:
    """Train LoRA adapters on the bundle of ``job`` (base and temporal weights stay frozen).

    Each enabled term draws its own minibatch and noise from
    ``Stream(seed, "finetune", term, step)``, so toggling one term leaves the
    random draws of the others untouched.
    """
    terms = cfg.terms()
    _check_data(job, terms)
    bundle = job.bundle
    attach_lora(bundle, rank=cfg.rank, alpha=cfg.alpha, seed=cfg.seed)
    unet_params = list(lora_parameters(bundle, "unet"))
    text_params = list(lora_parameters(bundle, "text"))
    opt = torch.optim.AdamW(
        [{"params": unet_params, "lr": cfg.unet_lr}, {"params": text_params, "lr": cfg.text_lr}],
        betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    params = unet_params + text_params
    model = BundleDenoiser(bundle)
    schedule = job.schedule
    prompts = job.prompts
    n = len(prompts)

    refs = [torch.from_numpy(r.rgb) for r in job.subjects]
    mix_img = torch.from_numpy(np.stack([m.image for m in job.mix])) if job.mix else None
    mix_mask = torch.from_numpy(np.stack([m.masks for m in job.mix])) if job.mix else None
    mot_img = torch.from_numpy(np.stack([m.image for m in job.motion])) if job.motion else None

    bundle.train()
    history = []
    for step in range(cfg.iterations):
        parts = {}
        for term in terms:
            s = Stream(cfg.seed, "finetune", term, step)
            if term == "naive":
                batch = [x[s.integers(0, len(x), size=cfg.batch_naive)] for x in refs]
                parts[term] = loss_naive(model, batch, prompts, schedule, s.child("noise"))
            elif term == "multic":
                idx = s.integers(0, len(mix_img), size=cfg.batch_multic)
                parts[term] = loss_cooccur(model, mix_img[idx], prompts, job.layout, schedule, s.child("noise"))
            elif term == "masked":
                i = step % n
                idx = s.integers(0, len(mix_img), size=cfg.batch_masked)
                parts[term] = loss_masked_single(model, mix_img[idx], i, prompts, job.layout,
                                                 mix_mask[idx, i], schedule, s.child("noise"))
            else:
                idx = s.integers(0, len(mot_img), size=cfg.batch_motion)
                sets = [job.motion[k].prompts for k in idx]
                parts[term] = loss_motion(model, mot_img[idx], sets, job.layout, schedule, s.child("noise"))
        total = sum(parts.values())
        ensure_finite(total.detach(), f"finetune loss at step {step}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        gn = torch.sqrt(sum((p.grad.detach() ** 2).sum() for p in params if p.grad is not None))
        opt.step()
        entry = {"step": step, "loss": float(total.detach()), "grad_norm": float(gn),
                 **{f"loss_{k}": float(v.detach()) for k, v in parts.items()}}
        history.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if step % 100 == 0:
            log.info("finetune step %d loss %.4f", step, entry["loss"])
    bundle.eval()
    return FinetuneResult(adapter_state(bundle), history)

