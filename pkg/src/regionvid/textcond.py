"""Closed-vocabulary prompts: grammar, per-subject splitting and a toy text encoder.

Grammar::

    prompt  := clause (", and " clause)* (" on " background)?
    clause  := "a" [identity] shape [action]

A background-only prompt ``"on <background>"`` is also accepted; it is what
``split_composite`` hands to the background region of a layout.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapters import LoRALinear

SHAPES = ("circle", "square", "triangle", "star")
ACTIONS = ("slide-right", "bounce", "spin", "grow", "still", "slide-left")
BACKGROUNDS = ("grass", "beach", "sky", "plain")
IDENTITY_TOKENS = tuple(f"S{i}*" for i in range(1, 9))
FUNCTION_WORDS = ("a", "and", "on")
PAD, NULL = "<pad>", "<null>"

MAX_TOKENS = 16
TEXT_DIM = 64


class PromptError(ValueError):
    pass


class VocabularyError(PromptError):
    pass


class PromptParseError(PromptError):
    pass


class PromptTooLongError(PromptError):
    pass


@dataclass(frozen=True)
class SubjectClause:
    shape: str
    action: str | None = None
    identity: str | None = None

    def render(self) -> str:
        words = ["a"]
        if self.identity:
            words.append(self.identity)
        words.append(self.shape)
        if self.action:
            words.append(self.action)
        return " ".join(words)


@dataclass(frozen=True)
class PromptAST:
    clauses: tuple[SubjectClause, ...]
    background: str | None = None

    def __post_init__(self):
        ids = [c.identity for c in self.clauses if c.identity]
        if len(ids) != len(set(ids)):
            raise PromptParseError(f"identity tokens repeat within one prompt: {ids}")
        if not self.clauses and self.background is None:
            raise PromptParseError("prompt has neither a subject clause nor a background")

    @property
    def identities(self) -> tuple[str, ...]:
        return tuple(c.identity for c in self.clauses if c.identity)

    def render(self) -> str:
        body = ", and ".join(c.render() for c in self.clauses)
        if self.background:
            return f"{body} on {self.background}" if body else f"on {self.background}"
        return body

    def tokens(self) -> list[str]:
        out: list[str] = []
        for i, c in enumerate(self.clauses):
            if i:
                out.append("and")
            out.extend(c.render().split(" "))
        if self.background:
            out.extend(["on", self.background])
        return out

    def __str__(self) -> str:
        return self.render()


class Vocabulary:
    """Bijective token <-> id map over the closed word list."""

    def __init__(self, words: tuple[str, ...] | None = None):
        if words is None:
            words = (PAD, NULL, *FUNCTION_WORDS, *IDENTITY_TOKENS, *SHAPES, *ACTIONS, *BACKGROUNDS)
        if len(set(words)) != len(words):
            raise ValueError("vocabulary words must be unique")
        self.words = tuple(words)
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"unknown token {word!r}") from None

    def word(self, idx: int) -> str:
        return self.words[idx]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def null_id(self) -> int:
        return self._ids[NULL]

    def to_json(self) -> list[str]:
        return list(self.words)


_BG_RE = re.compile(r"^(?:(?P<body>.*) )?on (?P<bg>\S+)$")


def parse_prompt(text: str, vocab: Vocabulary | None = None) -> PromptAST:
    vocab = vocab or Vocabulary()
    text = (text or "").strip()
    if not text:
        raise PromptParseError("empty prompt")
    words = text.replace(",", " ").split()
    for w in words:
        if w not in vocab or w in (PAD, NULL):
            raise VocabularyError(f"unknown token {w!r}")

    background = None
    m = _BG_RE.match(text)
    if m:
        background = m.group("bg")
        if background not in BACKGROUNDS:
            raise PromptParseError(f"{background!r} is not a background")
        text = (m.group("body") or "").strip()
        if not text:
            return PromptAST((), background)

    clauses = []
    for raw in text.split(", and "):
        parts = raw.split()
        if not parts or parts[0] != "a":
            raise PromptParseError(f"clause must start with 'a': {raw!r}")
        parts = parts[1:]
        identity = None
        if parts and parts[0] in IDENTITY_TOKENS:
            identity = parts.pop(0)
        if not parts or parts[0] not in SHAPES:
            raise PromptParseError(f"clause lacks a shape word: {raw!r}")
        shape = parts.pop(0)
        action = None
        if parts and parts[0] in ACTIONS:
            action = parts.pop(0)
        if parts:
            raise PromptParseError(f"unexpected words {parts} in clause {raw!r}")
        clauses.append(SubjectClause(shape, action, identity))
    return PromptAST(tuple(clauses), background)


def split_composite(p: PromptAST) -> tuple[list[PromptAST], PromptAST | None]:
    """One single-clause prompt per subject, in order, plus the background prompt."""
    per_subject = [PromptAST((c,)) for c in p.clauses]
    background = PromptAST((), p.background) if p.background else None
    return per_subject, background


def region_prompts(p: PromptAST, has_background_slot: bool) -> list[PromptAST]:
    """Prompts in layout-slot order: subjects first, then the background slot.

    Without a background slot the background phrase rides along on every
    subject prompt so no region loses it.
    """
    per_subject, background = split_composite(p)
    if has_background_slot:
        return per_subject + [background]
    if background is None:
        return per_subject
    return [PromptAST(q.clauses, p.background) for q in per_subject]


# ---------------------------------------------------------------- encoder

class _EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.q = LoRALinear(d, d)
        self.k = LoRALinear(d, d)
        self.v = LoRALinear(d, d)
        self.out = LoRALinear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.norm1(x)
        q, k, v = (m(h).view(b, n, self.heads, d // self.heads).transpose(1, 2) for m in (self.q, self.k, self.v))
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        logits = logits.masked_fill(pad[:, None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1) @ v
        x = x + self.out(att.transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Token + position embeddings, two padded self-attention layers, learned null sequence."""

    def __init__(self, vocab: Vocabulary | None = None, max_tokens: int = MAX_TOKENS,
                 dim: int = TEXT_DIM, layers: int = 2, heads: int = 4):
        super().__init__()
        self.vocab = vocab or Vocabulary()
        self.max_tokens = max_tokens
        self.dim = dim
        self.token_emb = nn.Parameter(torch.randn(len(self.vocab), dim) * 0.5)
        self.pos_emb = nn.Parameter(torch.randn(max_tokens, dim) * 0.1)
        self.layers = nn.ModuleList(_EncoderLayer(dim, heads) for _ in range(layers))
        self.final_norm = nn.LayerNorm(dim)
        self.null_seq = nn.Parameter(torch.randn(max_tokens, dim) * 0.5)

    def token_ids(self, p: PromptAST) -> list[int]:
        toks = p.tokens()
        if len(toks) > self.max_tokens:
            raise PromptTooLongError(f"{len(toks)} tokens exceed the limit of {self.max_tokens}: {p.render()!r}")
        return [self.vocab.id(t) for t in toks]

    def forward(self, prompts: list[PromptAST | None]) -> torch.Tensor:
        """Encode a batch of prompts (``None`` = null prompt) to ``[B, L, d]``."""
        rows = [i for i, p in enumerate(prompts) if p is not None]
        out = [None] * len(prompts)
        if rows:
            ids = torch.full((len(rows), self.max_tokens), self.vocab.pad_id, dtype=torch.long)
            for r, i in enumerate(rows):
                t = self.token_ids(prompts[i])
                ids[r, : len(t)] = torch.tensor(t)
            pad = ids == self.vocab.pad_id
            x = self.token_emb[ids] + self.pos_emb[None]
            for layer in self.layers:
                x = layer(x, pad)
            x = self.final_norm(x)
            for r, i in enumerate(rows):
                out[i] = x[r]
        for i, p in enumerate(prompts):
            if p is None:
                out[i] = self.null_seq
        return torch.stack(out)


def encode_text(model: TextEncoder, p: PromptAST | None) -> torch.Tensor:
    return model([p])[0]
