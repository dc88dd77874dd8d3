import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from regionvid.attention import (
    CrossAttention,
    LayoutError,
    custom_layout,
    cross_attention,
    parse_layout,
    sdca,
    uniform_layout,
)


def test_uniform_strips_balanced():
    idx = uniform_layout(3).rasterize(4, 8)
    widths = [(idx[0] == s).sum() for s in range(3)]
    assert widths == [3, 3, 2]
    assert (idx == idx[0]).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 40), st.integers(1, 40))
def test_uniform_partition_covers_and_orders(n, h, w):
    if w < n:
        return
    idx = uniform_layout(n).rasterize(h, w)
    assert set(np.unique(idx)) == set(range(n))
    assert (np.diff(idx[0]) >= 0).all()
    counts = np.bincount(idx[0], minlength=n)
    assert counts.max() - counts.min() <= 1


def test_custom_layout_priority_and_background():
    # small rect inside a large one wins where they overlap
    lay = custom_layout([(0.0, 0.0, 1.0, 1.0), (0.25, 0.25, 0.5, 0.5)], background=False)
    idx = lay.rasterize(8, 8)
    assert idx[3, 3] == 1 and idx[0, 0] == 0
    lay = custom_layout([(0.0, 0.0, 0.5, 0.5)], background=True)
    idx = lay.rasterize(4, 4)
    assert idx[0, 0] == 0 and idx[3, 3] == 1
    with pytest.raises(LayoutError):
        custom_layout([(0.0, 0.0, 0.5, 0.5)], background=False).rasterize(4, 4)


def test_parse_layout_forms():
    assert parse_layout("uniform:2").uniform == 2
    lay = parse_layout('[[0, 0, 0.5, 1], [0.5, 0, 1, 1]]')
    assert lay.background_slot == 2 and len(lay.regions) == 2
    again = parse_layout(lay.to_json())
    assert np.array_equal(again.rasterize(8, 8), lay.rasterize(8, 8))
    for bad in ("uniform:x", "uniform:9", "nonsense", '[[0, 0, 0, 1]]'):
        with pytest.raises(LayoutError):
            parse_layout(bad)


def _setup(seed, h=4, w=6, n=3, dim=8, d=5, L=4):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    layer = CrossAttention(dim, d)
    feats = torch.randn(h, w, dim, generator=g)
    texts = [torch.randn(L, d, generator=g) for _ in range(n)]
    return layer, feats, texts


def test_single_prompt_equals_vanilla():
    layer, feats, texts = _setup(0, n=1)
    routed = sdca(feats, texts, uniform_layout(1), layer)
    plain = cross_attention(feats.reshape(-1, 8), texts[0], layer).reshape(feats.shape)
    assert torch.allclose(routed, plain, atol=1e-6)


def test_routing_uses_only_own_prompt():
    layer, feats, texts = _setup(1, n=2)
    lay = uniform_layout(2)
    out = sdca(feats, texts, lay, layer)
    idx = lay.rasterize(4, 6)
    left = torch.from_numpy(idx == 0)
    ref = cross_attention(feats[left], texts[0], layer)
    assert torch.allclose(out[left], ref, atol=1e-6)


def test_missing_prompt_is_error():
    layer, feats, texts = _setup(2, n=2)
    with pytest.raises(LayoutError):
        sdca(feats, texts[:1], uniform_layout(2), layer)
    with pytest.raises(LayoutError):
        layer(feats.reshape(1, -1, 8), torch.stack(texts)[None], None)
