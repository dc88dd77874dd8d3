import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionvid.attention import uniform_layout
from regionvid.numerics import Stream
from regionvid.scenesynth import (
    PALETTE,
    SHAPE_AREA,
    ActionSpec,
    CorpusConfig,
    PlacedSubject,
    SceneError,
    SceneSpec,
    SubjectSpec,
    WorldConfig,
    gen_corpus,
    render_corpus,
    render_frame,
    render_video,
    sprite_masks,
)
from regionvid.scenesynth.io import dataset_hash, read_dataset, write_dataset
from regionvid.scenesynth.mix import reference_set, segment_subject, synth_mix
from regionvid.textcond import ACTIONS, SHAPES

W = WorldConfig()


def centroid(mask):
    ys, xs = np.nonzero(mask)
    return xs.mean() + 0.5, ys.mean() + 0.5


def one(shape, action, start, theta0=None, frames=8, bg="plain"):
    ps = PlacedSubject(SubjectSpec(shape, "red", "yellow"), ActionSpec.default(action, W), start, theta0)
    return SceneSpec((ps,), bg, frames, 32, W)


@pytest.mark.parametrize("shape", SHAPES)
def test_sprite_area_matches_analytic(shape):
    r = 10.0
    body, _ = sprite_masks(shape, 32.0, 32.0, 90.0, r, 64, 64)
    assert body.sum() == pytest.approx(SHAPE_AREA[shape] * r * r, rel=0.05)


def test_slide_centroid_moves_one_pixel_per_frame():
    frames, masks = render_video(one("circle", "slide-right", (8.0, 16.0)))
    xs = [centroid(m[0])[0] for m in masks]
    assert np.allclose(np.diff(xs), W.slide_speed, atol=0.15)
    assert xs[0] == pytest.approx(8.0, abs=0.25)
    frames, masks = render_video(one("circle", "slide-left", (24.0, 16.0)))
    assert np.allclose(np.diff([centroid(m[0])[0] for m in masks]), -W.slide_speed, atol=0.15)


def test_bounce_height_follows_sine():
    _, masks = render_video(one("circle", "bounce", (16.0, 24.0)))
    ys = np.array([centroid(m[0])[1] for m in masks])
    expect = 24.0 - W.bounce_amplitude * np.abs(np.sin(np.pi * np.arange(8) / W.bounce_period))
    assert np.allclose(ys, expect, atol=0.3)


def test_grow_area_scales_quadratically():
    big = WorldConfig(image_size=96)
    ps = PlacedSubject(SubjectSpec("circle", "red", "yellow"), ActionSpec.default("grow", big), (48.0, 48.0))
    _, masks = render_video(SceneSpec((ps,), "plain", 8, 96, big))
    a = masks[:, 0].sum((1, 2))
    g0, g1 = big.grow_range
    scale = g0 + (g1 - g0) * np.arange(8) / 7
    assert np.allclose(a, math.pi * (big.radius * scale) ** 2, rtol=0.05)


def test_spin_rotates_accent():
    _, masks = render_video(one("square", "spin", (16.0, 16.0), theta0=0.0))
    img0, _ = render_frame(one("square", "spin", (16.0, 16.0), theta0=0.0), 0)
    img2, _ = render_frame(one("square", "spin", (16.0, 16.0), theta0=0.0), 2)
    yellow = lambda im: (im[1] > 0.6) & (im[2] < -0.6)
    cx0, cy0 = centroid(yellow(img0))
    cx2, cy2 = centroid(yellow(img2))
    # facing 0 deg puts the accent right of centre, 90 deg puts it above
    assert cx0 > 16 + 1.5 and abs(cy0 - 16) < 1
    assert cy2 < 16 - 1.5 and abs(cx2 - 16) < 1


def test_leaving_frame_is_an_error():
    with pytest.raises(SceneError):
        render_video(one("circle", "slide-right", (26.0, 16.0)))
    with pytest.raises(SceneError):
        SubjectSpec("hexagon", "red", "blue")
    with pytest.raises(SceneError):
        SubjectSpec("circle", "red", "red")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_corpus_scenes_render_and_boxes_contain_masks(seed):
    items = gen_corpus(CorpusConfig(images=3, videos=2), W, seed)
    for it in items:
        _, masks = render_video(it.scene)
        for i, (x0, y0, x1, y1) in enumerate(it.boxes):
            ys, xs = np.nonzero(masks[:, i].any(0))
            # pixel centres of the swept sprite lie inside its box
            assert x0 * 32 <= xs.min() + 0.5 and xs.max() + 0.5 <= x1 * 32
            assert y0 * 32 <= ys.min() + 0.5 and ys.max() + 0.5 <= y1 * 32


def test_corpus_excludes_held_out_and_balances_actions():
    held = {("circle", "red", "yellow"), ("square", "navy", "cyan")}
    items = gen_corpus(CorpusConfig(images=400, videos=200), W, 7, held_out=held)
    triples = [ps.subject.triple for it in items for ps in it.scene.subjects]
    assert not held & set(triples)
    counts = Counter(ps.action.action for it in items for ps in it.scene.subjects)
    expect = sum(counts.values()) / len(ACTIONS)
    assert set(counts) == set(ACTIONS)
    assert all(abs(c - expect) <= 0.1 * expect for c in counts.values())
    assert gen_corpus(CorpusConfig(images=5, videos=5), W, 7) == gen_corpus(CorpusConfig(images=5, videos=5), W, 7)


def test_reference_alpha_is_exact_segmentation():
    subj = SubjectSpec("star", "orange", "purple")
    refs = reference_set(subj, W, 4, Stream(0, "refs"))
    assert refs.images.shape == (4, 4, 32, 32)
    for rgba in refs.images:
        m = segment_subject(rgba)
        on = rgba[:3, m]
        assert m.any()
        # every masked pixel is the base or the accent colour
        base = np.array([1.0, 0.55, 0.0]) * 2 - 1
        accent = np.array([0.5, 0.1, 0.7]) * 2 - 1
        close = lambda c: np.abs(on - c[:, None]).max(0) < 0.02
        assert (close(base) | close(accent)).all()
    with pytest.raises(SceneError):
        segment_subject(refs.images[0, :3])


def test_compositor_is_exact_paste():
    subs = [SubjectSpec("circle", "red", "yellow"), SubjectSpec("square", "navy", "cyan")]
    refs = [reference_set(s, W, 3, Stream(1, "refs", i)) for i, s in enumerate(subs)]
    lay = uniform_layout(2)
    mixes = synth_mix(refs, lay, 6, Stream(2, "mix"))
    idx = lay.rasterize(32, 32)
    for mx in mixes:
        outside = ~mx.masks.any(0)
        assert np.array_equal(mx.image[:, outside], mx.background[:, outside])
        assert not (mx.masks[0] & mx.masks[1]).any()
        for i in range(2):
            assert (idx[mx.masks[i]] == i).all()
            on = mx.image[:, mx.masks[i]]
            base, accent = (np.asarray(PALETTE[c]) * 2 - 1 for c in (subs[i].base_color, subs[i].accent_color))
            near = lambda c: np.abs(on - c[:, None]).max(0) < 1e-6
            assert (near(base) | near(accent)).all()
            assert mx.masks[i].sum() == pytest.approx(SHAPE_AREA[subs[i].shape] * W.radius ** 2, rel=0.2)


def test_compositor_rejects_crowded_layout():
    refs = [reference_set(SubjectSpec("circle", "red", "yellow"), W, 1, Stream(0, "r"))] * 5
    with pytest.raises(SceneError):
        synth_mix(refs, uniform_layout(5), 1, Stream(0, "m"))
    with pytest.raises(SceneError):
        synth_mix(refs[:2], uniform_layout(1), 1, Stream(0, "m"))


def test_dataset_roundtrip(tmp_path):
    items = gen_corpus(CorpusConfig(images=3, videos=2), W, 3)
    manifest = write_dataset(items, tmp_path / "d", 3)
    assert manifest["images"] == 3 and manifest["videos"] == 2
    back, px = read_dataset(tmp_path / "d")
    assert [it.caption for it in back] == [it.caption for it in items]
    ref = render_corpus(items)
    assert np.array_equal(px["images"], ref["images"])
    assert np.array_equal(px["videos"], ref["videos"])
    write_dataset(items, tmp_path / "e", 3)
    assert dataset_hash(tmp_path / "d") == dataset_hash(tmp_path / "e")

