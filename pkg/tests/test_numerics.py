import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from regionvid import numerics as nx
from regionvid.numerics import ContractError, NumericalError, ShapeError, Stream

from oracles import check_grad, projection

TOL = 1e-4


def rnd(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ---------------------------------------------------------------- finite differences per primitive

def test_matmul_grad():
    b = rnd(4, 3, seed=1)
    p = projection((5, 3))
    assert check_grad(lambda a: (nx.matmul(a, b) * p).sum(), rnd(5, 4)) <= TOL
    a = rnd(5, 4, seed=2)
    assert check_grad(lambda bb: (nx.matmul(a, bb) * p).sum(), b) <= TOL


def test_softmax_rows_grad():
    p = projection((3, 6))
    assert check_grad(lambda x: (nx.softmax_rows(x) * p).sum(), rnd(3, 6) * 3) <= TOL


def test_broadcast_concat_split_grads():
    p = projection((2, 3, 4))
    assert check_grad(lambda x: (nx.broadcast_to(x, (2, 3, 4)) * p).sum(), rnd(3, 4)) <= TOL
    q = projection((3, 7))
    other = rnd(3, 3, seed=5)
    assert check_grad(lambda x: (nx.concat([x, other], 1) * q).sum(), rnd(3, 4)) <= TOL
    assert check_grad(lambda x: (nx.split(x, [2, 5], 1)[1] * q[:, :5]).sum(), rnd(3, 7)) <= TOL


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_grad(stride):
    w = rnd(3, 2, 3, 3, seed=3) * 0.5
    bias = rnd(3, seed=4)
    x = rnd(1, 2, 6, 6)
    out_hw = 6 // stride
    p = projection((1, 3, out_hw, out_hw))
    assert check_grad(lambda v: (nx.conv2d(v, w, bias, stride) * p).sum(), x) <= TOL
    assert check_grad(lambda ww: (nx.conv2d(x, ww, bias, stride) * p).sum(), w) <= TOL


def test_upsample_group_norm_grads():
    p = projection((1, 4, 6, 6))
    assert check_grad(lambda x: (nx.upsample_nearest(x) * p).sum(), rnd(1, 4, 3, 3)) <= TOL
    q = projection((2, 4, 3, 3))
    gw, gb = rnd(4, seed=7), rnd(4, seed=8)
    assert check_grad(lambda x: (nx.group_norm(x, 2, gw, gb) * q).sum(), rnd(2, 4, 3, 3)) <= TOL


@pytest.mark.parametrize("fn", [nx.silu, nx.gelu])
def test_activation_grads(fn):
    p = projection((10,))
    assert check_grad(lambda x: (fn(x) * p).sum(), rnd(10) * 2) <= TOL


def test_embedding_grad():
    ids = torch.tensor([0, 2, 2, 4])
    p = projection((4, 3))
    assert check_grad(lambda table: (nx.embedding(ids, table) * p).sum(), rnd(5, 3)) <= TOL


def test_masked_mse_grad():
    target = rnd(2, 5, seed=9)
    mask = torch.tensor([1, 0, 1, 1, 0], dtype=torch.bool)
    assert check_grad(lambda x: nx.masked_mse(x, target, mask), rnd(2, 5)) <= TOL


def test_random_three_layer_composite():
    """linear -> gelu -> conv -> group norm -> silu -> softmax, checked end to end."""
    w1 = rnd(8, 4, seed=11) * 0.5
    k = rnd(2, 2, 3, 3, seed=12) * 0.4
    p = projection((1, 2, 2, 4), seed=13)

    def f(x):
        h = nx.gelu(nx.matmul(x, w1.T))  # [4, 8]
        h = nx.conv2d(h.reshape(1, 2, 4, 4)[:, :, :2], k)  # [1, 2, 2, 4]
        h = nx.silu(nx.group_norm(h, 1))
        return (nx.softmax_rows(h) * p).sum()

    assert check_grad(f, rnd(4, 4)) <= TOL


# ---------------------------------------------------------------- contracts

def test_shape_errors():
    with pytest.raises(ShapeError):
        nx.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(ShapeError):
        nx.broadcast_to(torch.zeros(3, 2), (3, 4))
    with pytest.raises(ShapeError):
        nx.split(torch.zeros(5), [2, 2], 0)
    with pytest.raises(ShapeError):
        nx.embedding(torch.tensor([5]), torch.zeros(3, 2))
    with pytest.raises(ContractError):
        nx.conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3), stride=3)


def test_softmax_is_stable_for_huge_logits():
    x = torch.tensor([[1e4, 1e4 - 1, -1e4]])
    s = nx.softmax_rows(x)
    assert torch.isfinite(s).all()
    assert float(s.sum()) == pytest.approx(1.0)
    assert float(s[0, 0] / s[0, 1]) == pytest.approx(math.e, rel=1e-4)


def test_masked_mse_empty_mask_is_zero_with_grad():
    x = torch.randn(3, requires_grad=True)
    loss = nx.masked_mse(x, torch.zeros(3), torch.zeros(3, dtype=torch.bool))
    loss.backward()
    assert float(loss.detach()) == 0.0
    assert torch.equal(x.grad, torch.zeros(3))


def test_backward_rejects_nonscalar_and_nan():
    x = torch.ones(2, requires_grad=True)
    with pytest.raises(ContractError):
        nx.backward(x * 2)
    with pytest.raises(NumericalError):
        nx.backward((x * float("nan")).sum())


def test_timestep_embedding_layout():
    e = nx.timestep_embedding(torch.tensor([0, 5]), 8)
    assert e.shape == (2, 8)
    assert torch.equal(e[0, :4], torch.ones(4))
    assert torch.equal(e[0, 4:], torch.zeros(4))
    assert float(e[1, 0]) == pytest.approx(math.cos(5.0), abs=1e-6)


# ---------------------------------------------------------------- streams

def test_stream_children_are_independent_of_parent_consumption():
    a = Stream(3, "x")
    a.normal((100,))
    b = Stream(3, "x")
    assert torch.equal(a.child("k", 1).normal((4,)), b.child("k", 1).normal((4,)))
    assert not torch.equal(Stream(3, "x", 1).normal((4,)), Stream(3, "x", 2).normal((4,)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.text(max_size=5))
def test_stream_reproducible(seed, name):
    assert np.array_equal(Stream(seed, name).uniform(size=5), Stream(seed, name).uniform(size=5))


# ---------------------------------------------------------------- archive

def test_archive_roundtrip_and_byte_determinism(tmp_path):
    t = {"b": torch.arange(6, dtype=torch.float32).reshape(2, 3), "a": torch.tensor([1.5, -2.0])}
    nx.save_archive(tmp_path / "x.ckpt", t, {"k": 1})
    nx.save_archive(tmp_path / "y.ckpt", dict(reversed(list(t.items()))), {"k": 1})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    back, meta = nx.load_archive(tmp_path / "x.ckpt")
    assert meta == {"k": 1}
    assert set(back) == {"a", "b"}
    assert torch.equal(back["b"], t["b"])
    data = (tmp_path / "x.ckpt").read_bytes()
    assert data[:8] == b"RVCKPT01"


def test_archive_rejects_foreign_file(tmp_path):
    (tmp_path / "z").write_bytes(b"not an archive")
    with pytest.raises(ContractError):
        nx.load_archive(tmp_path / "z")


def test_state_hash_detects_change():
    t = {"w": torch.zeros(3)}
    h = nx.state_hash(t)
    t["w"][1] = 1e-7
    assert nx.state_hash(t) != h
