"""Tensor primitives, seeded random streams and the checkpoint archive.

Everything numeric in the package goes through torch float32 tensors; this
module adds the shape discipline (explicit broadcasting only), finiteness
checks and the few composite ops the models share.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32


class ShapeError(ValueError):
    """Operands have incompatible extents."""


class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class NumericalError(FloatingPointError):
    """A NaN or infinity appeared in a computed value."""


def ensure_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericalError(f"non-finite values in {what}")
    return x


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float32)).clone()
    return t.requires_grad_(requires_grad)


# ---------------------------------------------------------------- linear algebra

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last axis, stabilised by the row maximum."""
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax over an empty row")
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def broadcast_to(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    """Broadcast a scalar or prepend leading axes; nothing else is implicit."""
    shape = tuple(shape)
    if x.numel() == 1:
        return x.reshape(()).expand(shape)
    if tuple(x.shape) != shape[len(shape) - x.dim():]:
        raise ShapeError(f"cannot broadcast {tuple(x.shape)} to {shape}: only leading axes may be added")
    return x.expand(shape)


def concat(parts: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    return torch.cat(list(parts), dim=axis)


def split(x: torch.Tensor, sizes: Sequence[int], axis: int) -> list[torch.Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of extent {x.shape[axis]}")
    return list(torch.split(x, list(sizes), dim=axis))


# ---------------------------------------------------------------- image ops

def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    """3x3 (or 1x1) convolution with 'same' padding; stride 1 or 2."""
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    k = weight.shape[-1]
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    return F.conv2d(x, weight, bias, stride=stride, padding=k // 2)


def upsample_nearest(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    b, c, h, w = x.shape
    return x[:, :, :, None, :, None].expand(b, c, h, factor, w, factor).reshape(b, c, h * factor, w * factor)


def group_norm(x: torch.Tensor, groups: int, weight: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    if x.shape[1] % groups:
        raise ShapeError(f"{x.shape[1]} channels not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.dtype not in (torch.int64, torch.int32):
        raise ContractError("embedding ids must be integers")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError("embedding id out of range")
    return table[ids]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding [cos | sin] of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the cells where ``mask`` is set.

    ``mask`` broadcasts over leading axes of ``pred`` (e.g. channels). An
    empty mask gives an exact zero that still carries a (zero) gradient.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    m = broadcast_to(mask.to(pred.dtype), pred.shape)
    count = m.sum()
    sq = (pred - target) ** 2 * m
    if float(count) == 0.0:
        return sq.sum() * 0.0
    return sq.sum() / count


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` for every ancestor of a scalar loss; frees the tape."""
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    ensure_finite(loss.detach(), "loss")
    loss.backward()


# ---------------------------------------------------------------- random streams

def _key(seed: int, names: Iterable) -> list[int]:
    h = hashlib.sha256(repr((int(seed), *names)).encode()).digest()
    return [int.from_bytes(h[:8], "little"), int.from_bytes(h[8:16], "little")]


class Stream:
    """Counter-based (Philox) random stream keyed by a seed and a purpose path.

    ``child("noise", step)`` gives an independent stream whose values do not
    depend on how much of the parent has been consumed, so different loss
    terms or steps never perturb one another's draws.
    """

    def __init__(self, seed: int, *names):
        self.seed = int(seed)
        self.names = tuple(names)
        self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, self.names)))

    def child(self, *names) -> "Stream":
        return Stream(self.seed, *self.names, *names)

    def normal(self, shape: Sequence[int]) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape), dtype=np.float32))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, seq, size=None, replace: bool = True):
        idx = self._gen.choice(len(seq), size=size, replace=replace)
        if size is None:
            return seq[int(idx)]
        return [seq[int(i)] for i in np.atleast_1d(idx)]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())


# ---------------------------------------------------------------- checkpoint archive

_MAGIC = b"RVCKPT01"


def save_archive(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write ``magic | u64 manifest length | JSON manifest | f32 LE blobs``.

    Tensors are stored in sorted-name order so identical inputs produce
    identical bytes.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().to(torch.float32).contiguous().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True,
                          separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ContractError(f"{path} is not a checkpoint archive")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n])
    base = 16 + n
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise ContractError(f"unsupported dtype {e['dtype']}")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out, manifest["meta"]


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().contiguous().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
