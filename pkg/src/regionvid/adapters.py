"""Linear layers with optional low-rank adapters (W + (alpha/r) B A)."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class LoRALinear(nn.Module):
    """``nn.Linear`` look-alike that can carry one low-rank adapter.

    The adapter's B factor starts at zero, so attaching it leaves the layer's
    output bit-identical until training moves B.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.lora_A: nn.Parameter | None = None
        self.lora_B: nn.Parameter | None = None
        self.scale = 1.0

    @property
    def has_adapter(self) -> bool:
        return self.lora_A is not None

    def attach(self, rank: int, alpha: float | None = None, generator: torch.Generator | None = None) -> None:
        if rank < 1 or rank > min(self.in_features, self.out_features):
            raise ValueError(f"rank {rank} invalid for a {self.out_features}x{self.in_features} weight")
        alpha = float(rank if alpha is None else alpha)
        a = torch.empty(rank, self.in_features)
        bound = 1.0 / math.sqrt(self.in_features)
        a.uniform_(-bound, bound, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank))
        self.scale = alpha / rank

    def delta(self) -> torch.Tensor:
        return self.scale * (self.lora_B @ self.lora_A)

    def merge(self) -> None:
        """Fold the adapter into the base weight. The adapter stays attached."""
        if self.has_adapter:
            with torch.no_grad():
                self.weight += self.delta()

    def clear(self) -> None:
        self.lora_A = None
        self.lora_B = None
        self.scale = 1.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(x, self.weight, self.bias)
        if self.lora_A is not None:
            out = out + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return out

    def extra_repr(self) -> str:
        rank = None if self.lora_A is None else self.lora_A.shape[0]
        return f"{self.in_features}->{self.out_features}, lora_rank={rank}"


def lora_layers(module: nn.Module) -> dict[str, LoRALinear]:
    return {name: m for name, m in module.named_modules() if isinstance(m, LoRALinear)}


def adapter_state(module: nn.Module) -> dict[str, torch.Tensor]:
    out = {}
    for name, layer in lora_layers(module).items():
        if layer.has_adapter:
            out[f"{name}.lora_A"] = layer.lora_A.detach().clone()
            out[f"{name}.lora_B"] = layer.lora_B.detach().clone()
    return out
