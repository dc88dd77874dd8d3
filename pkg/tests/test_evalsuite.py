import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.measure import moments_central, moments_hu, moments_normalized

from regionvid.evalsuite import (
    METRICS,
    BenchSpec,
    Calibration,
    Detection,
    MetricsReport,
    Track,
    background_estimate,
    calibrate,
    calibration_slide,
    classify_action,
    classify_shape,
    clip_t_proxy,
    detect_subject,
    dino_proxy,
    dync,
    features,
    hu_moments,
    reference_features,
    t_cons,
    track_subject,
    write_table,
)
from regionvid.config import default_bench
from regionvid.numerics import ContractError, Stream
from regionvid.scenesynth import (
    PALETTE,
    ActionSpec,
    PlacedSubject,
    SceneSpec,
    SubjectSpec,
    WorldConfig,
    render_background,
    render_frame,
    render_video,
    sprite_masks,
)
from regionvid.scenesynth.mix import reference_set
from regionvid.textcond import ACTIONS, SHAPES, SubjectClause

W = WorldConfig()
CAL = calibrate(W)
FULL = (0.0, 0.0, 1.0, 1.0)


def scene(shape, action, start=(16.0, 16.0), bg="plain", colors=("red", "yellow"), theta0=None, world=W):
    ps = PlacedSubject(SubjectSpec(shape, *colors), ActionSpec.default(action, world), start, theta0)
    return SceneSpec((ps,), bg, world.frames, world.image_size, world)


# ---------------------------------------------------------------- calibration

def test_calibration_frozen_values():
    assert CAL.tau == pytest.approx(0.2)
    assert CAL.a_min == 7
    assert CAL.kappa == pytest.approx(0.0296224, abs=1e-6)


def test_kappa_matches_pixel_count():
    """Flux of the calibration slide recounted from sprite masks and palette colours."""
    sc = calibration_slide(W)
    n = W.image_size
    bg = render_background("plain", n, n)[:, 0, 0]
    frames = []
    for f in range(W.frames):
        img = np.repeat(np.repeat(bg[:, None, None], n, 1), n, 2).copy()
        for ps in sc.subjects:
            cx, cy, th, _ = ps.state(f, W.frames)
            body, acc = sprite_masks(ps.subject.shape, cx, cy, th, W.radius, n, n)
            img[:, body] = (np.array(PALETTE[ps.subject.base_color]) * 2 - 1)[:, None]
            img[:, acc] = (np.array(PALETTE[ps.subject.accent_color]) * 2 - 1)[:, None]
        frames.append(img)
    d = np.abs(np.diff(np.array(frames, np.float64), axis=0))
    assert CAL.kappa == pytest.approx(d.mean(), rel=1e-6)


def test_background_estimate_exact_on_render():
    for bg in ("plain", "sky", "grass", "beach"):
        img, _ = render_frame(scene("star", "still", bg=bg), 0)
        assert np.allclose(background_estimate(img), render_background(bg, 32, 32), atol=1e-6)


# ---------------------------------------------------------------- detection

@settings(max_examples=40, deadline=None)
@given(st.sampled_from(SHAPES), st.floats(6, 26), st.floats(6, 26), st.sampled_from(["plain", "sky", "grass", "beach"]),
       st.sampled_from(sorted(PALETTE)))
def test_detection_matches_ground_truth(shape, x, y, bg, base):
    accent = "white" if base != "white" else "black"
    img, masks = render_frame(scene(shape, "still", (x, y), bg, (base, accent)), 0)
    det = detect_subject(img, FULL, CAL)
    assert det is not None
    assert np.array_equal(det.mask, masks[0])
    ys, xs = np.nonzero(masks[0])
    assert abs(det.centroid[0] - x) <= 1.0 and abs(det.centroid[1] - y) <= 1.0


def test_detection_respects_rect_and_area_floor():
    img, _ = render_frame(scene("circle", "still", (8.0, 16.0)), 0)
    assert detect_subject(img, (0.5, 0.0, 1.0, 1.0), CAL) is None
    assert detect_subject(img, (0.0, 0.0, 0.5, 1.0), CAL) is not None
    tiny = render_background("plain", 32, 32)
    tiny[:, 3:5, 3:5] = 1.0
    assert detect_subject(tiny, FULL, CAL) is None


def test_track_missing_rule():
    d = Detection(np.ones((2, 2), bool), (1.0, 1.0), 4, None)
    assert Track([d, None, None, d]).missing is False
    assert Track([d, None, None, None]).missing is True


# ---------------------------------------------------------------- features

@pytest.mark.parametrize("shape", SHAPES)
def test_hu_moments_match_independent_implementation(shape):
    body, _ = sprite_masks(shape, 20.3, 18.7, 33.0, 9.0, 40, 40)
    ref = moments_hu(moments_normalized(moments_central(body.astype(float)), 3))
    ours = hu_moments(body)
    # a transposed image flips the sign of the last (skew) invariant only
    assert np.allclose(ours[:6], ref[:6], rtol=1e-6, atol=1e-12)
    assert abs(ours[6]) == pytest.approx(abs(ref[6]), rel=1e-6, abs=1e-12)


def test_features_are_unit_and_self_similar():
    subj = SubjectSpec("circle", "red", "yellow")
    refs = reference_set(subj, W, 4, Stream(0, "r"))
    feats = reference_features(refs.images)
    assert all(np.linalg.norm(f) == pytest.approx(1.0) for f in feats)
    img, _ = render_frame(scene("circle", "still", colors=("red", "yellow")), 0)
    det = detect_subject(img, FULL, CAL)
    assert dino_proxy(img, det, feats) > 0.95
    other, _ = render_frame(scene("square", "still", colors=("navy", "cyan")), 0)
    assert dino_proxy(other, detect_subject(other, FULL, CAL), feats) < 0.3
    assert dino_proxy(img, None, feats) == 0.0
    with pytest.raises(ContractError):
        dino_proxy(img, det, [])


def test_features_ignore_background():
    a, _ = render_frame(scene("star", "still", bg="plain"), 0)
    b, _ = render_frame(scene("star", "still", bg="beach"), 0)
    da, db = detect_subject(a, FULL, CAL), detect_subject(b, FULL, CAL)
    assert np.allclose(features(a, da.mask), features(b, db.mask))


# ---------------------------------------------------------------- attributes

@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("theta", [0.0, 37.0, 90.0, 200.0])
def test_shape_classifier_on_renders(shape, theta):
    img, _ = render_frame(scene(shape, "still", theta0=theta), 0)
    assert classify_shape(Track([detect_subject(img, FULL, CAL)])) == shape


START = {"slide-right": (6.0, 16.0), "slide-left": (26.0, 16.0), "bounce": (16.0, 22.0)}


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("action", ACTIONS)
def test_action_classifier_on_renders(shape, action):
    video, _ = render_video(scene(shape, action, START.get(action, (16.0, 16.0))))
    assert classify_action(track_subject(video, FULL, CAL)) == action


def test_clip_t_values():
    video, _ = render_video(scene("square", "bounce", (16.0, 22.0)))
    tr = track_subject(video, FULL, CAL)
    assert clip_t_proxy(tr, SubjectClause("square", "bounce")) == 1.0
    assert clip_t_proxy(tr, SubjectClause("square", "spin")) == 0.5
    assert clip_t_proxy(tr, SubjectClause("circle", "bounce")) == 0.5
    assert clip_t_proxy(tr, SubjectClause("circle", "spin")) == 0.0
    assert clip_t_proxy(tr, SubjectClause("square")) == 1.0
    assert clip_t_proxy(None, SubjectClause("square")) == 0.0


# ---------------------------------------------------------------- video-level

def test_t_cons_extremes():
    v = np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 32))
    assert t_cons(np.concatenate([v, v])) == pytest.approx(1.0)
    assert t_cons(np.concatenate([v, -v])) == pytest.approx(0.0)
    with pytest.raises(ContractError):
        t_cons(v)


def test_dync_scales_with_speed():
    slow_world = WorldConfig(slide_speed=0.5)
    fast, _ = render_video(calibration_slide(W))
    slow, _ = render_video(calibration_slide(slow_world))
    assert dync(fast, CAL.kappa) == pytest.approx(1.0)
    assert dync(slow, CAL.kappa) == pytest.approx(0.5, abs=0.1)
    still = np.repeat(fast[:1], 8, 0)
    assert dync(still, CAL.kappa) == 0.0


# ---------------------------------------------------------------- bench and reports

def test_bench_roundtrip(tmp_path):
    bench = default_bench()
    p = tmp_path / "b.json"
    p.write_text(json.dumps(bench.to_json()))
    again = BenchSpec.load(p)
    assert again == bench
    assert ("circle", "red", "yellow") in bench.held_out
    with pytest.raises(KeyError):
        bench.subject("S9*")


def test_report_roundtrip_and_table(tmp_path):
    rows = [{m: float(i) for m in METRICS} for i in range(3)]
    rep = MetricsReport("full", rows, {"seed": 0})
    rep.write(tmp_path / "r.json")
    back = MetricsReport.from_json(json.loads((tmp_path / "r.json").read_text()))
    assert back.aggregates == {m: 1.0 for m in METRICS}
    write_table([back], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "arm" and lines[1].startswith("full,1.000000")
    with pytest.raises(ContractError):
        MetricsReport.from_json({"rows": []})
