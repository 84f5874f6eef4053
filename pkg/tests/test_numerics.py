from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moe_planner import numerics as nm

finite = st.floats(-50, 50, allow_nan=False)


def t(x, grad=False):
    return nm.tensor(x, requires_grad=grad)


# matmul


def test_matmul_examples():
    a = t(np.random.default_rng(0).normal(size=(2, 2)))
    assert torch.equal(nm.matmul(torch.eye(2, dtype=nm.DTYPE), a), a)
    assert nm.matmul(t([[1, 2], [3, 4]]), t([[0], [1]])).tolist() == [[2.0], [4.0]]
    assert torch.count_nonzero(nm.matmul(torch.zeros(2, 3, dtype=nm.DTYPE), t(np.ones((3, 4))))) == 0


def test_matmul_shape_error():
    with pytest.raises(nm.ShapeError):
        nm.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_associative(m, k, n, p, seed):
    g = np.random.default_rng(seed)
    a, b, c = (t(g.normal(size=s)) for s in [(m, k), (k, n), (n, p)])
    lhs = nm.matmul(nm.matmul(a, b), c)
    rhs = nm.matmul(a, nm.matmul(b, c))
    scale = nm.matmul(nm.matmul(a.abs(), b.abs()), c.abs())
    assert torch.all((lhs - rhs).abs() <= 1e-9 * torch.clamp_min(scale, 1e-300))


# softmax


def test_softmax_examples():
    assert torch.allclose(nm.softmax(t([0.0, 0.0, 0.0])), t([1 / 3] * 3), atol=1e-15)
    for c in (-700.0, 3.0, 800.0):
        assert nm.softmax(t([c, c])).tolist() == [0.5, 0.5]
    assert torch.allclose(nm.softmax(t([math.log(1), math.log(3)])), t([0.25, 0.75]), atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one(x):
    p = nm.softmax(t(x), dim=-1)
    assert torch.all(p >= 0) and torch.all(p <= 1)
    assert torch.all((p.sum(-1) - 1).abs() <= 1e-12)


# smooth_l1


def test_smooth_l1_examples():
    z = t([1.0, -2.0, 3.0])
    assert nm.smooth_l1(z, z).item() == 0.0
    assert nm.smooth_l1(t([2.0]), t([0.0]), 1.0).item() == 1.5
    assert nm.smooth_l1(t([0.5]), t([0.0]), 1.0).item() == 0.125


def test_smooth_l1_c1_at_beta():
    beta = 1.0
    lo, hi = t([beta - 1e-7], True), t([beta + 1e-7], True)
    vlo, vhi = nm.smooth_l1(lo, t([0.0]), beta), nm.smooth_l1(hi, t([0.0]), beta)
    assert abs(vlo.item() - vhi.item()) < 1e-6
    vlo.backward()
    vhi.backward()
    assert abs(lo.grad.item() - hi.grad.item()) < 1e-6


def test_smooth_l1_errors():
    with pytest.raises(nm.ShapeError):
        nm.smooth_l1(t([1.0, 2.0]), t([1.0]))
    with pytest.raises(ValueError):
        nm.smooth_l1(t([1.0]), t([1.0]), beta=0.0)


def test_masked_smooth_l1_all_false():
    x = t([[1.0, 2.0]], True)
    v = nm.masked_smooth_l1(x, t([[0.0, 0.0]]), torch.zeros(1, 2, dtype=torch.bool))
    v.backward()
    assert v.item() == 0.0 and torch.count_nonzero(x.grad) == 0


# cross_entropy


def test_cross_entropy_examples():
    assert nm.cross_entropy(t([0.3] * 4), 2).item() == pytest.approx(math.log(4), abs=1e-15)
    v = nm.cross_entropy(t([10.0, -10.0]), 0).item()
    assert v == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert v == pytest.approx(2.06e-9, rel=1e-2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=finite), st.integers(0, 4), finite)
def test_cross_entropy_shift_invariant(x, k, c):
    a = nm.cross_entropy(t(x), k).item()
    b = nm.cross_entropy(t(x + c), k).item()
    assert a == pytest.approx(b, abs=1e-11)


def test_cross_entropy_index_range():
    with pytest.raises(IndexError):
        nm.cross_entropy(t([1.0, 2.0]), 2)
    with pytest.raises(IndexError):
        nm.cross_entropy(t([1.0, 2.0]), -1)


# layer_norm


def test_layer_norm_examples():
    one, zero = torch.ones(2, dtype=nm.DTYPE), torch.zeros(2, dtype=nm.DTYPE)
    assert torch.count_nonzero(nm.layer_norm(t([[3.0, 3.0]]), one, zero)) == 0
    y = nm.layer_norm(t([[-1.0, 1.0]]), one, zero)
    assert torch.allclose(y, t([[-1.0, 1.0]]) / math.sqrt(1 + nm.LN_EPS), atol=1e-15)
    x = t(np.random.default_rng(1).normal(size=(4, 6)))
    bias = t(np.arange(6.0))
    y = nm.layer_norm(x, torch.ones(6, dtype=nm.DTYPE), bias)
    # normalised part has zero row mean, so each row mean equals the mean of the bias
    assert torch.allclose(y.mean(-1), bias.mean().expand(4), atol=1e-12)


# attention


def _attn_params(d, g):
    names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    return {n: t(g.normal(size=(d, d) if n.startswith("w") else (d,))) for n in names}


def test_attention_single_key():
    g = np.random.default_rng(2)
    p = _attn_params(4, g)
    kv = t(g.normal(size=(1, 4)))
    expect = nm.linear(nm.linear(kv, p["wv"], p["bv"]), p["wo"], p["bo"])
    for _ in range(3):
        out = nm.multi_head_attention(t(g.normal(size=(3, 4))), kv, kv, p, 2)
        assert torch.allclose(out, expect.expand(3, 4), atol=1e-12)


def test_attention_identical_keys_uniform():
    g = np.random.default_rng(3)
    k = t(np.tile(g.normal(size=(1, 4)), (5, 1)))
    w = nm.attention_weights(t(g.normal(size=(2, 4))), k)
    assert torch.allclose(w, torch.full((2, 5), 0.2, dtype=nm.DTYPE), atol=1e-15)


def test_attention_two_token_oracle():
    # one head, hand-set projections
    d = 2
    p = {
        "wq": t([[1.0, 0.0], [0.0, 2.0]]), "bq": t([0.0, 0.0]),
        "wk": t([[0.5, 0.0], [0.0, 1.0]]), "bk": t([0.0, 0.0]),
        "wv": t([[1.0, 1.0], [0.0, 1.0]]), "bv": t([0.1, -0.1]),
        "wo": t([[1.0, 0.0], [0.0, 1.0]]), "bo": t([0.0, 0.0]),
    }
    q_in = np.array([[1.0, -1.0]])
    kv_in = np.array([[2.0, 0.5], [-1.0, 1.0]])
    out = nm.multi_head_attention(t(q_in), t(kv_in), t(kv_in), p, 1).numpy()
    q = q_in @ p["wq"].numpy()
    k = kv_in @ p["wk"].numpy()
    v = kv_in @ p["wv"].numpy() + p["bv"].numpy()
    s = q @ k.T / math.sqrt(d)
    w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(out, w @ v, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 7), st.integers(0, 10_000))
def test_attention_weights_rows_and_mask(lq, lk, seed):
    g = np.random.default_rng(seed)
    mask = torch.tensor(g.uniform(size=lk) < 0.6)
    mask[int(g.integers(lk))] = True
    w = nm.attention_weights(t(g.normal(size=(lq, 3))), t(g.normal(size=(lk, 3))), mask)
    assert torch.all((w.sum(-1) - 1).abs() <= 1e-12)
    assert torch.all(w[:, ~mask] == 0)


def test_attention_indivisible_width():
    with pytest.raises(nm.ShapeError):
        nm.MultiHeadAttention(6, 4)


# mlp2


def test_mlp2_examples():
    x = t(np.random.default_rng(4).uniform(0.1, 1.0, size=(3, 2)))
    z = torch.zeros
    assert torch.count_nonzero(nm.mlp2(x, z(2, 4, dtype=nm.DTYPE), z(4, dtype=nm.DTYPE), z(4, 2, dtype=nm.DTYPE), z(2, dtype=nm.DTYPE))) == 0
    eye = torch.eye(2, dtype=nm.DTYPE)
    assert torch.equal(nm.mlp2(x, eye, None, eye, None), x)


def test_mlp2_hand_composed():
    g = np.random.default_rng(5)
    x, w1, b1, w2, b2 = g.normal(size=(2, 3)), g.normal(size=(3, 4)), g.normal(size=4), g.normal(size=(4, 2)), g.normal(size=2)
    expect = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    np.testing.assert_allclose(nm.mlp2(t(x), t(w1), t(b1), t(w2), t(b2)).numpy(), expect, atol=1e-14)


# grad_check


def test_grad_check_sum_of_squares():
    x = t([1.0, 2.0], True)
    loss = lambda: (x * x).sum()  # noqa: E731
    loss().backward()
    assert x.grad.tolist() == [2.0, 4.0]
    assert nm.grad_check(loss, [x]) < 1e-7


def test_grad_check_constant():
    x = t([1.0, 2.0], True)
    assert nm.grad_check(lambda: (x * 0).sum() + 3.0, [x]) == 0.0


def test_grad_check_non_finite():
    x = t([-1.0], True)
    with pytest.raises(nm.NonFiniteLossError):
        nm.grad_check(lambda: torch.log(x).sum(), [x])


PRIMITIVES = {
    "matmul": lambda a, b: nm.matmul(a, b.T).sum(),
    "softmax": lambda a, b: (nm.softmax(a) * b).sum(),
    "smooth_l1": lambda a, b: nm.smooth_l1(a * 3, b),
    "cross_entropy": lambda a, b: nm.cross_entropy(a, [0, 2, 1]),
    "layer_norm": lambda a, b: (nm.layer_norm(a, b[0], b[1]) * b[2]).sum(),
    "mlp2": lambda a, b: nm.mlp2(a, b.T, b[0], b, b[1, :3]).pow(2).sum(),
    "attention": lambda a, b: nm.multi_head_attention(
        a, b, b, {"wq": a[:, :3], "bq": None, "wk": b[:, :3], "bk": None, "wv": a[:, :3], "bv": b[0],
                  "wo": b[:, :3], "bo": None}, 1).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check(name):
    g = np.random.default_rng(6)
    a, b = t(g.normal(size=(3, 3)), True), t(g.normal(size=(3, 3)), True)
    assert nm.grad_check(lambda: PRIMITIVES[name](a, b), [a, b]) <= 1e-6


# init and checkpoints


def test_init_parameters_bounds_and_determinism():
    m1, m2 = nm.MLP2(9, 5, 3), nm.MLP2(9, 5, 3)
    nm.init_parameters(m1, 3)
    nm.init_parameters(m2, 3)
    assert all(torch.equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))
    assert m1.fc1.weight.abs().max() <= 1 / 3 and m1.fc2.weight.abs().max() <= 1 / math.sqrt(5)


def test_checkpoint_round_trip(tmp_path):
    state = {"a": t(np.arange(6.0).reshape(2, 3)), "b": t([1.5])}
    nm.save_checkpoint(tmp_path / "c.ckpt", state, {"k": 1})
    back, meta = nm.load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"k": 1} and all(torch.equal(state[k], back[k]) for k in state)
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-8])
    with pytest.raises(nm.CheckpointError):
        nm.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "bad2.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(nm.CheckpointError):
        nm.load_checkpoint(tmp_path / "bad2.ckpt")
