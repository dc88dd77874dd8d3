"""Experiment configuration: one JSON document, dot-path overrides, and a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .customize import FinetuneConfig
from .diffusion import SamplerConfig, default_schedule
from .evalsuite import BenchSpec, BenchSubject, Calibration, Combination
from .scenesynth import CorpusConfig, WorldConfig
from .training import PretrainConfig
from .videonet import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return default_schedule(self.T, self.beta_start, self.beta_end)


def default_bench(prompts_per_combo: int = 8) -> BenchSpec:
    """Four held-out subjects, four two-subject pairings, prompts cycling actions and backgrounds."""
    subjects = [
        BenchSubject("S1*", "circle", "red", "yellow"),
        BenchSubject("S2*", "square", "navy", "cyan"),
        BenchSubject("S3*", "triangle", "lime", "magenta"),
        BenchSubject("S4*", "star", "orange", "purple"),
    ]
    pairs = [("S1*", "S2*"), ("S3*", "S4*"), ("S1*", "S3*"), ("S2*", "S4*")]
    action_pairs = [
        ("slide-right", "bounce"), ("bounce", "slide-left"), ("spin", "still"), ("grow", "spin"),
        ("still", "slide-right"), ("slide-left", "grow"), ("bounce", "spin"), ("slide-right", "still"),
    ]
    backgrounds = ["plain", "grass", "sky", "beach"]
    shape = {s.identity: s.shape for s in subjects}
    combos = []
    for a, b in pairs:
        prompts = []
        for k in range(prompts_per_combo):
            act_a, act_b = action_pairs[k % len(action_pairs)]
            bg = backgrounds[k % len(backgrounds)]
            prompts.append(f"a {a} {shape[a]} {act_a}, and a {b} {shape[b]} {act_b} on {bg}")
        combos.append(Combination(f"{a[:2]}-{b[:2]}", [a, b], prompts))
    return BenchSpec(subjects, combos, [0, 1])


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    calibration: Calibration | None = None  # None: derived from the renderer
    bench: BenchSpec = field(default_factory=default_bench)
    mix_background: str = "procedural"  # or "model"
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            out = cls(
                seed=int(d.get("seed", 0)),
                world=WorldConfig.from_dict(d.get("world", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                schedule=ScheduleConfig(**d.get("schedule", {})),
                sampler=SamplerConfig(**d.get("sampler", {})),
                corpus=CorpusConfig.from_dict(d.get("corpus", {})),
                pretrain=PretrainConfig.from_dict(d.get("pretrain", {})),
                finetune=FinetuneConfig.from_dict(d.get("finetune", {})),
                calibration=Calibration.from_dict(d["calibration"]) if d.get("calibration") else None,
                bench=BenchSpec.from_json(d["bench"]) if "bench" in d else default_bench(),
                mix_background=d.get("mix_background", "procedural"),
                out=d.get("out", "runs/default"),
            )
        except TypeError as e:
            raise ConfigError(str(e)) from None
        out.validate()
        return out

    def validate(self) -> None:
        if self.corpus.images < 0 or self.corpus.videos < 0 or self.corpus.images + self.corpus.videos < 1:
            raise ConfigError("corpus must contain at least one item")
        if self.corpus.videos < 1 and self.pretrain.video_steps > 0:
            raise ConfigError("video pretraining needs video items")
        if self.mix_background not in ("procedural", "model"):
            raise ConfigError("mix_background must be 'procedural' or 'model'")
        if self.sampler.steps < 1 or self.sampler.steps > self.schedule.T:
            raise ConfigError("sampler steps must lie in [1, T]")
        if self.world.image_size != self.model.image_size:
            raise ConfigError("world and model image sizes differ")
        try:
            self.finetune.terms()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def stamp(self) -> dict:
        """Provenance recorded in every artifact."""
        return {"config_hash": self.hash(), "code_version": __version__}


def config_hash(d: dict) -> str:
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[tuple[str, str]]) -> dict:
    """Set ``a.b.c = value`` for each pair; values parse as JSON when they can."""
    out = copy.deepcopy(d)
    for path, raw in overrides:
        keys = path.split(".")
        node = out
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                if k in node and node[k] is None:
                    node[k] = {}
                else:
                    raise ConfigError(f"override path {path!r} does not name a config section")
            node = node[k]
        node[keys[-1]] = _coerce(raw)
    return out


def parse_override_args(extra: list[str]) -> list[tuple[str, str]]:
    """``["--a.b", "1", "--c=x"]`` -> ``[("a.b", "1"), ("c", "x")]``."""
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} has no value")
            val = extra[i + 1]
            i += 2
        pairs.append((key, val))
    return pairs


def load_config(path: str | Path | None, overrides: list[tuple[str, str]] = ()) -> ExperimentConfig:
    if path is None:
        base = ExperimentConfig().to_dict()
    else:
        try:
            base = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        defaults = ExperimentConfig().to_dict()
        for k, v in defaults.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                base[k] = {**v, **base[k]}
            else:
                base.setdefault(k, v)
    return ExperimentConfig.from_dict(apply_overrides(base, list(overrides)))
