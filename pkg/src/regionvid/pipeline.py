"""End-to-end orchestration: corpus, base pretraining, per-combination customization, ablation arms, evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .attention import RegionLayout, uniform_layout
from .config import ExperimentConfig
from .customize import CustomizationJob, FinetuneConfig, FinetuneResult, finetune
from .diffusion import SamplerConfig
from .evalsuite import (
    BenchSpec,
    Calibration,
    Combination,
    MetricsReport,
    _reference_bank,
    calibrate,
    score_video,
)
from .generate import CondSpec, cond_spec, sample_batch
from .numerics import ContractError, Stream, load_archive, save_archive, state_hash
from .scenesynth import gen_corpus, render_corpus
from .scenesynth.corpus import CorpusItem
from .scenesynth.mix import gen_motion_prior, reference_set, synth_mix
from .textcond import Vocabulary, parse_prompt
from .training import make_optimizer, split_items, stage_lr, stage_params, train_stage
from .videonet import ModelBundle, ModelConfig, load_adapters

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- checkpoints

def new_bundle(cfg: ExperimentConfig) -> ModelBundle:
    torch.manual_seed(int(Stream(cfg.seed, "init").integers(0, 2 ** 31)))
    return ModelBundle(cfg.model)


def _opt_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"opt.{idx}.{k}"] = torch.as_tensor(v, dtype=torch.float32).reshape(-1) if k == "step" else v
    return tensors, {"param_groups": sd["param_groups"]}


def _opt_state(tensors: dict[str, torch.Tensor], meta: dict) -> dict:
    state: dict = {}
    for name, v in tensors.items():
        if not name.startswith("opt."):
            continue
        _, idx, k = name.split(".", 2)
        state.setdefault(int(idx), {})[k] = v.reshape(()) if k == "step" else v
    return {"state": state, "param_groups": meta["param_groups"]}


def save_base(path, bundle: ModelBundle, cfg: ExperimentConfig, extra: dict | None = None,
              optimizer: torch.optim.Optimizer | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in bundle.base_state().items()}
    meta = {"kind": "base", **bundle.meta(), **cfg.stamp(), **(extra or {})}
    if optimizer is not None:
        ot, om = _opt_tensors(optimizer)
        tensors.update(ot)
        meta["optimizer"] = om
    save_archive(path, tensors, meta)


def load_base(path) -> tuple[ModelBundle, dict, dict]:
    """(bundle, meta, raw tensors) from a base checkpoint."""
    tensors, meta = load_archive(path)
    if meta.get("kind") != "base":
        raise ContractError(f"{path} is not a base checkpoint")
    bundle = ModelBundle(ModelConfig.from_dict(meta["model"]), Vocabulary(tuple(meta["vocab"])))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    bundle.load_state_dict(state, strict=True)
    bundle.eval()
    return bundle, meta, tensors


def save_adapters(path, result: FinetuneResult, meta: dict) -> None:
    save_archive(path, result.adapters, {"kind": "adapters", **meta})


def load_customized(adapter_path, base_path=None) -> tuple[ModelBundle, dict]:
    tensors, meta = load_archive(adapter_path)
    if meta.get("kind") != "adapters":
        raise ContractError(f"{adapter_path} is not an adapter checkpoint")
    base = base_path or meta["base_path"]
    bundle, _, _ = load_base(base)
    if state_hash(bundle.base_state()) != meta["base_hash"]:
        raise ContractError(f"adapters in {adapter_path} were trained on a different base model")
    load_adapters(bundle, tensors, adapter_scale(meta.get("finetune", {})))
    bundle.eval()
    return bundle, meta


def adapter_scale(ft: dict) -> float:
    alpha, rank = ft.get("alpha"), ft.get("rank", 16)
    return 1.0 if alpha is None else float(alpha) / rank


def load_any(path, base_path=None) -> tuple[ModelBundle, dict]:
    _, meta = load_archive(path)
    if meta.get("kind") == "adapters":
        return load_customized(path, base_path)
    bundle, meta, _ = load_base(path)
    return bundle, meta


# ---------------------------------------------------------------- pretraining

def build_corpus(cfg: ExperimentConfig) -> tuple[list[CorpusItem], dict[str, np.ndarray]]:
    items = gen_corpus(cfg.corpus, cfg.world, cfg.seed, cfg.bench.held_out)
    return items, render_corpus(items)


STAGES = ("image", "video")


def pretrain(cfg: ExperimentConfig, items: list[CorpusItem], pixels: dict[str, np.ndarray], out_dir,
             checkpoint_every: int = 500, stop_after: int | None = None) -> Path:
    """Two-stage base training with resumable checkpoints; returns the final checkpoint path.

    ``out_dir/pretrain_state.ckpt`` holds model + optimizer state after every
    chunk of ``checkpoint_every`` steps; a rerun picks up from there.
    ``stop_after`` ends the run early after that many steps (for resume tests).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    final = out / "base.ckpt"
    state_path = out / "pretrain_state.ckpt"
    images, videos = split_items(items)
    data = {"image": (images, pixels.get("images")), "video": (videos, pixels.get("videos"))}
    steps = {"image": cfg.pretrain.image_steps, "video": cfg.pretrain.video_steps}
    schedule = cfg.schedule.build()

    stage, step, opt = "image", 0, None
    if state_path.exists():
        bundle, meta, tensors = load_base(state_path)
        stage, step = meta["stage"], meta["step"]
        if stage != "done":
            opt = make_optimizer(stage_params(bundle, stage), stage_lr(cfg.pretrain, stage), cfg.pretrain.weight_decay)
            opt.load_state_dict(_opt_state(tensors, meta["optimizer"]))
    else:
        bundle = new_bundle(cfg)
    log_path = out / "pretrain_log.jsonl"
    if step == 0 and stage == "image" and log_path.exists():
        log_path.unlink()
    done_now = 0
    with open(log_path, "a") as fh:
        while stage != "done":
            total = steps[stage]
            its, px = data[stage]
            if step < total and (not its or px is None):
                raise ContractError(f"{stage} stage needs {stage} items")
            while step < total:
                n = min(checkpoint_every, total - step)
                if stop_after is not None:
                    n = min(n, stop_after - done_now)
                    if n <= 0:
                        return state_path
                opt, _ = train_stage(bundle, stage, its, px, schedule, cfg.pretrain, cfg.seed, n,
                                     optimizer=opt, start=step, log_fh=fh)
                step += n
                done_now += n
                fh.flush()
                save_base(state_path, bundle, cfg, {"stage": stage, "step": step}, opt)
            nxt = STAGES.index(stage) + 1
            stage, step, opt = (STAGES[nxt], 0, None) if nxt < len(STAGES) else ("done", 0, None)
    for p in bundle.parameters():
        p.requires_grad_(False)
    save_base(final, bundle, cfg, {"stage": "done", "steps": steps})
    return final


# ---------------------------------------------------------------- customization

ARMS = {
    # name: (finetune toggles, routed generation)
    "full": ({}, True),
    "naive": ({"multic": False, "masked": False, "motion": False, "sdca": False}, False),
    "wo_sdca": ({}, False),
    "wo_motion": ({"motion": False}, True),
    "wo_multic": ({"multic": False}, True),
    "wo_masked": ({"masked": False}, True),
}
# arms that share adapters with another arm and only differ at generation time
SHARED_ADAPTERS = {"wo_sdca": "full"}


@dataclass
class CustomData:
    refs: list
    layout: RegionLayout
    mix: list
    motion: list


def combo_subjects(bench: BenchSpec, combo: Combination):
    return [bench.subject(i).spec() for i in combo.subjects]


def motion_sampler(cfg: ExperimentConfig) -> SamplerConfig:
    return replace(cfg.sampler, seed=cfg.seed)


def prepare_data(cfg: ExperimentConfig, base: ModelBundle, combo: Combination) -> CustomData:
    """References, composites and motion-prior images for one subject combination."""
    subjects = combo_subjects(cfg.bench, combo)
    ft = cfg.finetune
    refs = [reference_set(s, cfg.world, ft.references, Stream(cfg.seed, "refs", s.identity)) for s in subjects]
    layout = uniform_layout(len(subjects))
    background = None
    schedule = cfg.schedule.build()
    if cfg.mix_background == "model":
        def background(stream):
            seed = int(stream.integers(0, 2 ** 31))
            img = sample_batch(base, [CondSpec.null()], [seed], schedule, cfg.sampler, frames=1, temporal=False)
            return img[0, 0].numpy()
    mix = synth_mix(refs, layout, ft.mix_count, Stream(cfg.seed, "mix", combo.name), background)
    motion = []
    if ft.motion:
        shapes = [s.shape for s in subjects]
        motion = gen_motion_prior(base, shapes, layout, schedule, motion_sampler(cfg),
                                  int(Stream(cfg.seed, "motion", *shapes).integers(0, 2 ** 31)), ft.motion_count)
    return CustomData(refs, layout, mix, motion)


def arm_config(cfg: ExperimentConfig, arm: str) -> FinetuneConfig:
    toggles, _ = ARMS[arm]
    return replace(cfg.finetune, **toggles)


def run_finetune(cfg: ExperimentConfig, base_path, combo: Combination, ft: FinetuneConfig,
                 data: CustomData | None = None, log_fh=None) -> tuple[FinetuneResult, dict]:
    base, _, _ = load_base(base_path)
    if data is None:
        data = prepare_data(cfg, base, combo)
    job = CustomizationJob(base, data.refs, data.layout, data.mix, data.motion, cfg.schedule.build())
    base_hash = state_hash(base.base_state())
    result = finetune(job, ft, log_fh)
    meta = {
        "combination": combo.name, "subjects": combo.subjects, "layout": data.layout.to_json(),
        "finetune": json.loads(json.dumps(ft.__dict__)), "base_path": str(base_path), "base_hash": base_hash,
        "subject_specs": [r.subject.__dict__ for r in data.refs], **cfg.stamp(),
    }
    return result, meta


# ---------------------------------------------------------------- evaluation

def evaluate_bench(cfg: ExperimentConfig, bundles: dict[str, ModelBundle], arm: str, use_sdca: bool,
                   calibration: Calibration | None = None, batch: int = 8,
                   combos: list[Combination] | None = None) -> MetricsReport:
    """Sample every (combination, prompt, seed) video and score each subject inside its region."""
    cal = calibration or cfg.calibration or calibrate(cfg.world)
    schedule = cfg.schedule.build()
    combos = combos if combos is not None else cfg.bench.combinations
    rows = []
    for combo in combos:
        if combo.name not in bundles:
            raise ContractError(f"no checkpoint for combination {combo.name}")
        bundle = bundles[combo.name]
        subjects = combo_subjects(cfg.bench, combo)
        layout = uniform_layout(len(subjects))
        rects = [r.rect for r in layout.regions]
        refs = [list(_reference_bank(s, cfg.world, cfg.finetune.references, cfg.seed)) for s in subjects]
        cells = [(p, sd) for p in combo.prompts for sd in cfg.bench.seeds]
        for start in range(0, len(cells), batch):
            chunk = cells[start:start + batch]
            asts = [parse_prompt(p, bundle.vocab) for p, _ in chunk]
            specs = [cond_spec(a, layout, use_sdca) for a in asts]
            videos = sample_batch(bundle, specs, [sd for _, sd in chunk], schedule, cfg.sampler,
                                  cfg.world.frames, temporal=True).numpy()
            for (prompt, sd), ast, video in zip(chunk, asts, videos):
                row = {"arm": arm, "combination": combo.name, "prompt": prompt, "seed": sd}
                row.update(score_video(video, list(ast.clauses), rects, refs, cal))
                rows.append(row)
    return MetricsReport(arm, rows, {"calibration": cal.__dict__, "sdca": use_sdca, **cfg.stamp()})


def run_ablation(cfg: ExperimentConfig, base_path, arms=("full", "naive", "wo_sdca", "wo_motion", "wo_multic"),
                 out_dir=None) -> dict[str, MetricsReport]:
    """Finetune every needed arm per combination and evaluate all arms on the benchmark."""
    base, _, _ = load_base(base_path)
    out = Path(out_dir) if out_dir else None
    reports: dict[str, MetricsReport] = {}
    adapters: dict[tuple[str, str], dict] = {}
    for combo in cfg.bench.combinations:
        data = prepare_data(cfg, base, combo)
        for arm in arms:
            src = SHARED_ADAPTERS.get(arm, arm)
            if (src, combo.name) in adapters:
                continue
            ft = arm_config(cfg, src)
            fh = open(out / f"finetune_{src}_{combo.name}.jsonl", "w") if out else None
            try:
                result, meta = run_finetune(cfg, base_path, combo, ft, data, fh)
            finally:
                if fh:
                    fh.close()
            adapters[(src, combo.name)] = result.adapters
            if out:
                save_adapters(out / f"adapters_{src}_{combo.name}.ckpt", result, meta)
    for arm in arms:
        src = SHARED_ADAPTERS.get(arm, arm)
        bundles = {}
        for combo in cfg.bench.combinations:
            b, _, _ = load_base(base_path)
            load_adapters(b, adapters[(src, combo.name)], adapter_scale(arm_config(cfg, src).__dict__))
            b.eval()
            bundles[combo.name] = b
        reports[arm] = evaluate_bench(cfg, bundles, arm, ARMS[arm][1])
        if out:
            reports[arm].write(out / f"report_{arm}.json")
    return reports
