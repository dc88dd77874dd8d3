import json
import os

import numpy as np
import pytest
from PIL import Image

from regionvid.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from regionvid.config import ConfigError, ExperimentConfig, apply_overrides, default_bench, load_config, parse_override_args

TINY = {
    "seed": 0,
    "world": {"image_size": 16, "frames": 4},
    "model": {"image_size": 16, "channels": [16, 32], "text_dim": 32, "self_attn_max_res": 8, "max_frames": 8},
    "schedule": {"T": 20},
    "sampler": {"steps": 3},
    "corpus": {"images": 16, "videos": 4},
    "pretrain": {"image_steps": 3, "video_steps": 2, "image_batch": 4, "video_batch": 2, "warmup": 1},
    "finetune": {"iterations": 2, "rank": 2, "batch_naive": 2, "batch_multic": 2, "batch_masked": 2,
                 "batch_motion": 2, "mix_count": 2, "motion_count": 2, "references": 2},
}


def tiny_config(tmp_path):
    d = dict(TINY)
    bench = default_bench(prompts_per_combo=1).to_json()
    bench["combinations"] = bench["combinations"][:1]
    bench["seeds"] = [0]
    d["bench"] = bench
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return str(p)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A full pipeline on the tiny config: corpus, base, one customized pair."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(root)
    assert main(["synth-corpus", "--config", cfg, "--out", str(root / "data")]) == EXIT_OK
    assert main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "base")]) == EXIT_OK
    assert main(["finetune", "--config", cfg, "--base", str(root / "base" / "base.ckpt"), "--subjects", "S1*,S2*",
                 "--out", str(root / "ft")]) == EXIT_OK
    return root, cfg


def test_config_overrides_and_hash():
    cfg = load_config(None, parse_override_args(["--model.channels", "[32, 64]", "--seed=3"]))
    assert cfg.model.channels == (32, 64) and cfg.seed == 3
    assert ExperimentConfig.from_dict(cfg.to_dict()).hash() == cfg.hash()
    assert load_config(None).hash() != cfg.hash()
    with pytest.raises(ConfigError):
        apply_overrides({"a": 1}, [("a.b", "2")])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        parse_override_args(["--seed"])
    with pytest.raises(ConfigError):
        load_config(None, [("sampler.steps", "500")])


def test_synth_corpus_is_deterministic(run, tmp_path):
    root, cfg = run
    assert main(["synth-corpus", "--config", cfg, "--out", str(tmp_path / "again")]) == EXIT_OK
    a = json.loads((root / "data" / "manifest.json").read_text())
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert a["content_hash"] == b["content_hash"]


def test_pretrain_outputs(run):
    root, _ = run
    lines = (root / "base" / "pretrain_log.jsonl").read_text().splitlines()
    stages = [json.loads(l)["stage"] for l in lines]
    assert stages == ["image"] * 3 + ["video"] * 2


def test_pretrain_resume_is_identical(run, tmp_path):
    root, cfg = run
    from regionvid.config import load_config as lc
    from regionvid.pipeline import pretrain
    from regionvid.scenesynth.io import read_dataset
    c = lc(cfg)
    items, px = read_dataset(root / "data")
    pretrain(c, items, px, tmp_path / "a", checkpoint_every=1, stop_after=2)
    pretrain(c, items, px, tmp_path / "a", checkpoint_every=1)
    assert (tmp_path / "a" / "base.ckpt").read_bytes() == (root / "base" / "base.ckpt").read_bytes()


def test_generate_writes_frames_and_sidecar(run, tmp_path):
    root, cfg = run
    out = tmp_path / "gen"
    code = main(["generate", "--config", cfg, "--checkpoint", str(root / "ft" / "adapters.ckpt"),
                 "--prompt", "a S1* circle spin, and a S2* square still on sky", "--seed", "1", "--out", str(out)])
    assert code == EXIT_OK
    frames = sorted(out.glob("frame_*.png"))
    assert len(frames) == 4
    assert np.asarray(Image.open(frames[0])).shape == (16, 16, 3)
    assert (out / "filmstrip.png").exists()
    side = json.loads((out / "sidecar.json").read_text())
    assert side["seed"] == 1 and side["sdca"] is True and "config_hash" in side
    out2 = tmp_path / "gen2"
    main(["generate", "--config", cfg, "--checkpoint", str(root / "ft" / "adapters.ckpt"),
          "--prompt", "a S1* circle spin, and a S2* square still on sky", "--seed", "1", "--out", str(out2)])
    assert (out / "video.npy").read_bytes() == (out2 / "video.npy").read_bytes()


def test_story_order_follows_script(run, tmp_path):
    root, cfg = run
    prompts = ["a S1* circle spin on sky", "a S2* square still", "a S1* circle, and a S2* square bounce on grass"]
    (tmp_path / "s.json").write_text(json.dumps({"entries": [{"prompt": p, "seed": i} for i, p in enumerate(prompts)]}))
    code = main(["story", "--config", cfg, "--checkpoint", str(root / "ft" / "adapters.ckpt"),
                 "--script", str(tmp_path / "s.json"), "--out", str(tmp_path / "story")])
    assert code == EXIT_OK
    man = json.loads((tmp_path / "story" / "story.json").read_text())
    assert [e["prompt"] for e in man["entries"]] == prompts
    # a scene renders the same whether it comes first or last
    (tmp_path / "r.json").write_text(json.dumps([{"prompt": p, "seed": i} for i, p in reversed(list(enumerate(prompts)))]))
    main(["story", "--config", cfg, "--checkpoint", str(root / "ft" / "adapters.ckpt"),
          "--script", str(tmp_path / "r.json"), "--out", str(tmp_path / "rev")])
    a = np.load(tmp_path / "story" / "scene_000" / "video.npy")
    b = np.load(tmp_path / "rev" / "scene_002" / "video.npy")
    assert np.array_equal(a, b)


def test_evaluate_and_report(run, tmp_path):
    root, cfg = run
    ck = str(root / "ft" / "adapters.ckpt")
    assert main(["evaluate", "--config", cfg, "--checkpoints", ck, "--out", str(tmp_path / "full.json")]) == EXIT_OK
    assert main(["evaluate", "--config", cfg, "--checkpoints", ck, "--arm", "wo_sdca", "--no-sdca",
                 "--out", str(tmp_path / "wo.json")]) == EXIT_OK
    rep = json.loads((tmp_path / "full.json").read_text())
    assert len(rep["rows"]) == 1 and set(rep["aggregates"]) == {"dino", "clip_t", "t_cons", "dync", "missing"}
    code = main(["report", "--config", cfg, "--runs", str(tmp_path / "full.json"), str(tmp_path / "wo.json"),
                 "--out", str(tmp_path / "rep")])
    assert code == EXIT_OK
    rows = (tmp_path / "rep" / "table.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows] == ["arm", "full", "wo_sdca"]
    assert (tmp_path / "rep" / "metrics.png").stat().st_size > 0
    # duplicate arms are refused
    assert main(["report", "--runs", str(tmp_path / "full.json"), str(tmp_path / "full.json"),
                 "--out", str(tmp_path / "dup")]) == EXIT_VALIDATION


def test_exit_codes(run, tmp_path, capsys):
    root, cfg = run
    ck = str(root / "ft" / "adapters.ckpt")
    gen = ["generate", "--config", cfg, "--checkpoint", ck, "--out", str(tmp_path / "g")]
    assert main(gen + ["--prompt", "a S1* dragon"]) == EXIT_VALIDATION
    assert main(gen + ["--prompt", "a S1* circle", "--layout", "uniform:3"]) == EXIT_VALIDATION
    assert main(["generate", "--config", cfg, "--checkpoint", str(tmp_path / "nope.ckpt"), "--prompt", "a circle",
                 "--out", str(tmp_path / "g")]) == EXIT_IO
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "x").write_text("x")
    assert main(["synth-corpus", "--config", cfg, "--out", str(tmp_path / "full")]) == EXIT_IO
    assert main(["finetune", "--config", cfg, "--base", str(root / "base" / "base.ckpt"), "--subjects", "S9*",
                 "--out", str(tmp_path / "f")]) == EXIT_VALIDATION
    assert main(["finetune", "--config", cfg, "--base", str(root / "base" / "base.ckpt"), "--subjects", "S1*,S2*",
                 "--no-multic", "--no-masked", "--no-motion", "--out", str(tmp_path / "f2")]) == EXIT_VALIDATION
    (tmp_path / "empty.json").write_text("[]")
    assert main(["story", "--config", cfg, "--checkpoint", ck, "--script", str(tmp_path / "empty.json"),
                 "--out", str(tmp_path / "st")]) == EXIT_VALIDATION
    assert main(["synth-corpus", "--config", cfg, "--out", str(tmp_path / "c"), "--nonsense.key", "1"]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "error" in err or "invalid" in err
