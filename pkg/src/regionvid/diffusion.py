"""Linear-beta noise schedule, closed-form forward noising, epsilon loss and DDIM sampling.

Timesteps are 1-based: ``t`` in ``1..T`` indexes ``alpha_bar[t - 1]`` and
``t = 0`` denotes the clean sample (``alpha_bar = 1``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .numerics import ContractError, Stream, ensure_finite


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64, [T]

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def abar(self, t) -> np.ndarray:
        """alpha_bar at 1-based step(s) t, with abar(0) = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ContractError(f"timestep out of range 0..{self.T}")
        table = np.concatenate([[1.0], self.alpha_bar])
        return table[t]


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ContractError("T must be positive")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def default_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas quoted for 1000 steps, rescaled so T steps reach similar noise."""
    scale = 1000.0 / T
    return make_schedule(T, beta_start * scale, min(beta_end * scale, 0.999))


def _bcast(v: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(v, dtype=np.float32))
    return v.reshape(-1, *([1] * (like.dim() - 1))) if v.dim() else v


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` scalar or one per batch item."""
    if eps.shape != z0.shape:
        raise ContractError("noise and clean sample differ in shape")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > s.T):
        raise ContractError(f"timestep {t} out of range 1..{s.T}")
    ab = s.abar(t_arr)
    return _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * eps


def q_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """One forward step q(z_t | z_{t-1}) = N(sqrt(1 - beta_t) z_{t-1}, beta_t I)."""
    beta = s.betas[t - 1]
    return float(np.sqrt(1.0 - beta)) * z_prev + float(np.sqrt(beta)) * eps


EpsModel = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


def sample_timesteps(stream: Stream, n: int, s: NoiseSchedule) -> torch.Tensor:
    return torch.from_numpy(stream.integers(1, s.T + 1, size=n).astype(np.int64))


def diffusion_loss(model: EpsModel, z0: torch.Tensor, cond, s: NoiseSchedule, stream: Stream,
                   reduction: str = "mean") -> torch.Tensor:
    """Epsilon-matching MSE at uniformly drawn timesteps.

    ``model(z_t, t, cond)``; per-item squared error is averaged over
    elements, then averaged (or summed) over the batch.
    """
    if z0.shape[0] == 0:
        raise ContractError("empty batch")
    t = sample_timesteps(stream, z0.shape[0], s)
    eps = stream.normal(z0.shape)
    z_t = q_sample(z0, t.numpy(), eps, s)
    pred = model(z_t, t, cond)
    per_item = ((eps - pred) ** 2).flatten(1).mean(1)
    return per_item.mean() if reduction == "mean" else per_item.sum()


# ---------------------------------------------------------------- sampling

@dataclass
class SamplerConfig:
    steps: int = 50
    eta: float = 0.0
    cfg_scale: float = 3.0
    seed: int = 0
    clip_denoised: bool = True
    # "shared": every frame of a video starts from the same noise image;
    # "independent": fresh noise per frame
    frame_noise: str = "shared"

    def __post_init__(self):
        if self.frame_noise not in ("shared", "independent"):
            raise ContractError(f"frame_noise must be 'shared' or 'independent', got {self.frame_noise!r}")


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending 1-based steps from T, ending with 0 (clean)."""
    if not 1 <= steps <= T:
        raise ContractError(f"sampling steps must be in 1..{T}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(v) for v in ts]


def guided_eps(model: EpsModel, z_t, t, cond, null_cond, cfg_scale: float) -> torch.Tensor:
    if cfg_scale == 1.0 or null_cond is None:
        return model(z_t, t, cond)
    if cfg_scale == 0.0:
        return model(z_t, t, null_cond)
    e_null = model(z_t, t, null_cond)
    e_cond = model(z_t, t, cond)
    return e_null + cfg_scale * (e_cond - e_null)


def denoise_step(model: EpsModel, z_t: torch.Tensor, t: int, t_prev: int, cond, s: NoiseSchedule,
                 null_cond=None, cfg_scale: float = 1.0, clip: bool = False) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from step t to t_prev."""
    if not s.T >= t > t_prev >= 0:
        raise ContractError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}, T={s.T}")
    tt = torch.full((z_t.shape[0],), t, dtype=torch.long)
    eps = guided_eps(model, z_t, tt, cond, null_cond, cfg_scale)
    ab, ab_prev = float(s.abar(t)), float(s.abar(t_prev))
    z0 = (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if clip:
        z0 = z0.clamp(-1.0, 1.0)
    if t_prev == 0:
        return z0
    return float(np.sqrt(ab_prev)) * z0 + float(np.sqrt(1.0 - ab_prev)) * eps


@torch.no_grad()
def sample(model: EpsModel, shape, cond, s: NoiseSchedule, cfg: SamplerConfig, null_cond=None,
           noise: torch.Tensor | None = None) -> torch.Tensor:
    if cfg.eta != 0.0:
        raise ContractError("only deterministic sampling (eta = 0) is supported")
    z = noise if noise is not None else Stream(cfg.seed, "sample").normal(shape)
    ts = ddim_timesteps(s.T, cfg.steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        z = denoise_step(model, z, t, t_prev, cond, s, null_cond, cfg.cfg_scale, cfg.clip_denoised)
    return ensure_finite(z.clamp(-1.0, 1.0), "sampled video")
