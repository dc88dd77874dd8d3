"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or config, 3 I/O failure, 4 numerical failure.
Config fields can be overridden after the command with ``--section.key value``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("regionvid")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"{out} exists and is not empty (use --force to overwrite)", EXIT_IO)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_synth_corpus(args, cfg):
    from .scenesynth import gen_corpus
    from .scenesynth.io import write_dataset

    out = _out_dir(args.out, args.force)
    items = gen_corpus(cfg.corpus, cfg.world, cfg.seed, cfg.bench.held_out)
    manifest = write_dataset(items, out, cfg.seed, {**cfg.stamp(), "config": cfg.to_dict()})
    print(json.dumps({"items": manifest["items"], "content_hash": manifest["content_hash"]}))


def cmd_pretrain(args, cfg):
    from .pipeline import pretrain
    from .scenesynth.io import read_dataset

    if not Path(args.data, "manifest.json").exists():
        raise CliError(f"no dataset at {args.data}", EXIT_IO)
    items, pixels = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = pretrain(cfg, items, pixels, out, checkpoint_every=args.checkpoint_every)
    losses = [json.loads(line)["loss"] for line in open(out / "pretrain_log.jsonl")]
    print(json.dumps({"checkpoint": str(path), "steps": len(losses)}))


def _subjects(arg: str, cfg):
    from .evalsuite import BenchSubject, Combination

    p = Path(arg)
    if p.suffix == ".json" and p.exists():
        subs = [BenchSubject(**d) for d in json.loads(p.read_text())]
        bench = replace(cfg.bench, subjects=subs)
        return replace(cfg, bench=bench), Combination("custom", [s.identity for s in subs], [])
    ids = [s.strip() for s in arg.split(",") if s.strip()]
    known = {s.identity for s in cfg.bench.subjects}
    bad = [i for i in ids if i not in known]
    if bad or not ids:
        raise CliError(f"unknown subject token(s) {bad or arg!r}; known: {sorted(known)}")
    for c in cfg.bench.combinations:
        if c.subjects == ids:
            return cfg, c
    return cfg, Combination("-".join(i.rstrip("*") for i in ids), ids, [])


def cmd_finetune(args, cfg):
    from .pipeline import ARMS, run_finetune, save_adapters

    toggles = {"sdca": not args.no_sdca, "motion": not args.no_motion,
               "multic": not args.no_multic, "masked": not args.no_masked}
    ft = replace(cfg.finetune, **toggles)
    cfg = replace(cfg, finetune=ft)
    cfg.validate()
    if not Path(args.base).exists():
        raise CliError(f"no base checkpoint at {args.base}", EXIT_IO)
    cfg, combo = _subjects(args.subjects, cfg)
    out = _out_dir(args.out, args.force)
    with open(out / "finetune_log.jsonl", "w") as fh:
        result, meta = run_finetune(cfg, args.base, combo, ft, log_fh=fh)
    meta["generation_sdca"] = ft.sdca
    save_adapters(out / "adapters.ckpt", result, meta)
    print(json.dumps({"adapters": str(out / "adapters.ckpt"), "iterations": len(result.log),
                      "terms": list(ft.terms())}))


def _load(checkpoint: str, base: str | None):
    from .pipeline import load_any

    if not Path(checkpoint).exists():
        raise CliError(f"no checkpoint at {checkpoint}", EXIT_IO)
    return load_any(checkpoint, base)


def _generate_one(bundle, cfg, prompt: str, layout_spec, seed: int, use_sdca: bool):
    from .attention import parse_layout, uniform_layout
    from .generate import cond_spec, sample_batch
    from .textcond import parse_prompt

    ast = parse_prompt(prompt, bundle.vocab)
    layout = parse_layout(layout_spec) if layout_spec is not None else uniform_layout(len(ast.clauses))
    spec = cond_spec(ast, layout, use_sdca)
    video = sample_batch(bundle, [spec], [seed], cfg.schedule.build(), cfg.sampler, cfg.world.frames)[0].numpy()
    return video, layout


def _save_video(out: Path, video: np.ndarray, sidecar: dict) -> None:
    from .plotting import filmstrip
    from .scenesynth.io import save_png

    out.mkdir(parents=True, exist_ok=True)
    for f, frame in enumerate(video):
        save_png(out / f"frame_{f}.png", frame)
    np.save(out / "video.npy", video.astype(np.float32))
    filmstrip(video, out / "filmstrip.png", sidecar["prompt"])
    _write_json(out / "sidecar.json", sidecar)


def cmd_generate(args, cfg):
    bundle, meta = _load(args.checkpoint, args.base)
    use_sdca = not args.no_sdca
    video, layout = _generate_one(bundle, cfg, args.prompt, args.layout, args.seed, use_sdca)
    out = _out_dir(args.out, args.force)
    _save_video(out, video, {"prompt": args.prompt, "layout": layout.to_json(), "seed": args.seed,
                             "sdca": use_sdca, "checkpoint": str(args.checkpoint), **cfg.stamp()})
    print(json.dumps({"out": str(out), "frames": int(video.shape[0])}))


def cmd_story(args, cfg):
    script = json.loads(Path(args.script).read_text())
    entries = script["entries"] if isinstance(script, dict) else script
    if not entries:
        raise CliError("story script has no entries")
    bundle, _ = _load(args.checkpoint, args.base)
    out = _out_dir(args.out, args.force)
    manifest = []
    for i, e in enumerate(entries):
        video, layout = _generate_one(bundle, cfg, e["prompt"], e.get("layout"), int(e.get("seed", cfg.seed)),
                                      not e.get("no_sdca", False))
        d = out / f"scene_{i:03d}"
        side = {"index": i, "prompt": e["prompt"], "layout": layout.to_json(), "seed": int(e.get("seed", cfg.seed)),
                **cfg.stamp()}
        _save_video(d, video, side)
        manifest.append({**side, "dir": d.name})
    _write_json(out / "story.json", {"entries": manifest, "checkpoint": str(args.checkpoint), **cfg.stamp()})
    print(json.dumps({"scenes": len(manifest)}))


def cmd_evaluate(args, cfg):
    from .pipeline import evaluate_bench

    bundles = {}
    for path in args.checkpoints:
        bundle, meta = _load(path, args.base)
        if meta.get("kind") != "adapters":
            raise CliError(f"{path} is not a customized checkpoint")
        bundles[meta["combination"]] = bundle
    combos = [c for c in cfg.bench.combinations if c.name in bundles]
    if not combos:
        raise CliError("no benchmark combination matches the given checkpoints")
    report = evaluate_bench(cfg, bundles, args.arm, not args.no_sdca, combos=combos)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.meta["checkpoints"] = [str(p) for p in args.checkpoints]
    report.write(out)
    print(json.dumps({"arm": args.arm, **report.aggregates}))


def cmd_report(args, cfg):
    from .evalsuite import MetricsReport, aggregate, write_table
    from .plotting import metric_bars

    reports = []
    for path in args.runs:
        try:
            reports.append(MetricsReport.from_json(json.loads(Path(path).read_text())))
        except (json.JSONDecodeError, KeyError) as e:
            raise CliError(f"{path}: not a metrics report ({e})") from None
    arms = [r.arm for r in reports]
    if len(set(arms)) != len(arms):
        raise CliError(f"duplicate arm names {arms}")
    for r in reports:
        stored = json.loads(Path(args.runs[reports.index(r)]).read_text()).get("aggregates")
        if stored is not None and set(stored) != set(aggregate(r.rows)):
            raise CliError(f"{r.arm}: aggregate schema mismatch")
    out = _out_dir(args.out, args.force)
    write_table(reports, out / "table.csv")
    _write_json(out / "table.json", {"arms": {r.arm: r.aggregates for r in reports},
                                     "n": {r.arm: len(r.rows) for r in reports}, **cfg.stamp()})
    metric_bars(reports, out / "metrics.png")
    sys.stdout.write((out / "table.csv").read_text())


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regionvid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="experiment config JSON")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth-corpus", cmd_synth_corpus, "render the pretraining dataset")
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "train the base model (image stage, then temporal stage)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint-every", type=int, default=500)

    sp = add("finetune", cmd_finetune, "customize the base model on a set of subjects")
    sp.add_argument("--base", required=True)
    sp.add_argument("--subjects", required=True, help="identity tokens (S1*,S2*) or a subjects JSON file")
    sp.add_argument("--out", required=True)
    for flag in ("sdca", "motion", "multic", "masked"):
        sp.add_argument(f"--no-{flag}", action="store_true")

    sp = add("generate", cmd_generate, "sample one video")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--base", default=None, help="base checkpoint (defaults to the one recorded in the adapters)")
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--layout", default=None, help="uniform:N or a JSON region list")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-sdca", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("story", cmd_story, "render a scripted sequence of scenes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--base", default=None)
    sp.add_argument("--script", required=True)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score customized checkpoints on the benchmark")
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp.add_argument("--base", default=None)
    sp.add_argument("--arm", default="full")
    sp.add_argument("--no-sdca", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "merge reports into a table and a figure")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    import torch

    from .attention import LayoutError
    from .config import ConfigError, load_config, parse_override_args
    from .numerics import ContractError, NumericalError, ShapeError
    from .scenesynth.render import SceneError
    from .textcond import PromptError

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, parse_override_args(extra))
        args.func(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, PromptError, LayoutError, ContractError, ShapeError, SceneError, KeyError,
            ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
