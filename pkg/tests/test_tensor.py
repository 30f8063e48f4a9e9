import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vqt import tensor as vt
from vqt.gradcheck import check_grads
from vqt.optim import AdamW, adamw_step
from vqt.tensor import ContractError, NonFiniteError, ShapeError, Tensor


def _matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def _bilinear_loops(grid, off):
    g = grid.shape[0]
    out = np.zeros_like(grid)
    for i in range(g):
        for j in range(g):
            r = min(max(i + off[i, j, 0], 0.0), g - 1.0)
            c = min(max(j + off[i, j, 1], 0.0), g - 1.0)
            r0, c0 = int(math.floor(r)), int(math.floor(c))
            r1, c1 = min(r0 + 1, g - 1), min(c0 + 1, g - 1)
            fr, fc = r - r0, c - c0
            out[i, j] = ((1 - fr) * (1 - fc) * grid[r0, c0] + (1 - fr) * fc * grid[r0, c1]
                         + fr * (1 - fc) * grid[r1, c0] + fr * fc * grid[r1, c1])
    return out


# ----------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


def test_matmul_hand_2x2():
    out = vt.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(vt.matmul(Tensor(a), Tensor(b)).data, _matmul_loops(a, b),
                               atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
        vt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))


# ----------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(vt.softmax(Tensor(np.full(4, 2.5))).data, [0.25] * 4)


def test_softmax_closed_form():
    np.testing.assert_allclose(vt.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_shift_invariant(x):
    y = vt.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
    shifted = vt.softmax(Tensor(x + 1000.0), axis=-1).data
    np.testing.assert_allclose(shifted, y, rtol=1e-9, atol=1e-12)


def test_softmax_bad_axis():
    with pytest.raises(ContractError):
        vt.softmax(Tensor(np.ones((2, 2))), axis=3)


# -------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_maps_to_zero():
    out = vt.layer_norm(Tensor(np.full((1, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_two_values():
    out = vt.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -1.0, 2.0])
    out = vt.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))),
                        Tensor(np.zeros(3)), Tensor(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (4, 3)))


# ----------------------------------------------------------------- bilinear


def test_bilinear_zero_offsets_is_identity():
    grid = np.random.default_rng(2).normal(size=(2, 4, 4, 3))
    out = vt.bilinear_sample(Tensor(grid), Tensor(np.zeros((2, 4, 4, 2))))
    np.testing.assert_array_equal(out.data, grid)


def test_bilinear_midpoint():
    grid = np.array([[[1.0], [3.0]], [[5.0], [7.0]]])  # 2x2x1
    off = np.zeros((2, 2, 2))
    off[0, 0] = (0.5, 0.0)
    out = vt.bilinear_sample(Tensor(grid), Tensor(off)).data
    assert out[0, 0, 0] == pytest.approx((1.0 + 5.0) / 2)


def test_bilinear_matches_loop_oracle():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(4, 4, 5))
    off = rng.uniform(-1.5, 1.5, size=(4, 4, 2))
    out = vt.bilinear_sample(Tensor(grid), Tensor(off)).data
    np.testing.assert_allclose(out, _bilinear_loops(grid, off), atol=1e-12, rtol=0)


def test_bilinear_out_of_bounds_clamps():
    grid = np.arange(9.0).reshape(3, 3, 1)
    off = np.full((3, 3, 2), 10.0)
    out = vt.bilinear_sample(Tensor(grid), Tensor(off)).data
    np.testing.assert_array_equal(out, np.full((3, 3, 1), 8.0))


# ----------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    vt.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_half_square_gives_x():
    x = Tensor(np.random.default_rng(1).normal(size=5), requires_grad=True)
    vt.scale(vt.sum(x * x), 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_accumulates_across_fanout_and_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    vt.sum(x + x + x).backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])
    vt.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_non_finite_is_reported():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        vt.mul(Tensor([1e308]), Tensor([1e308]))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with vt.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(6, 7)), rng.normal(size=(7, 5))
    y1 = vt.softmax(vt.matmul(Tensor(a), Tensor(b)))
    y2 = vt.softmax(vt.matmul(Tensor(a), Tensor(b)))
    assert y1.data.tobytes() == y2.data.tobytes()


# ------------------------------------------------ finite-difference checks


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _projector(rng, shape):
    w = Tensor(rng.normal(size=shape))
    return lambda y: vt.sum(y * w)


OPS = {
    "add": lambda r: ((_rand(r, 3, 4), _rand(r, 4)), lambda a, b: vt.add(a, b)),
    "sub": lambda r: ((_rand(r, 3, 4), _rand(r, 3, 1)), lambda a, b: vt.sub(a, b)),
    "mul": lambda r: ((_rand(r, 3, 4), _rand(r, 3, 4)), lambda a, b: vt.mul(a, b)),
    "scale": lambda r: ((_rand(r, 2, 3),), lambda a: vt.scale(a, -1.7)),
    "matmul": lambda r: ((_rand(r, 2, 3, 4), _rand(r, 4, 5)), lambda a, b: vt.matmul(a, b)),
    "sum_axis": lambda r: ((_rand(r, 3, 4, 2),), lambda a: vt.sum(a, axis=1, keepdims=True)),
    "mean_axis": lambda r: ((_rand(r, 3, 4),), lambda a: vt.mean(a, axis=0)),
    "reshape": lambda r: ((_rand(r, 3, 4),), lambda a: vt.reshape(a, (2, 6))),
    "transpose": lambda r: ((_rand(r, 2, 3, 4),), lambda a: vt.transpose(a, (2, 0, 1))),
    "concat": lambda r: ((_rand(r, 2, 3), _rand(r, 1, 3)), lambda a, b: vt.concat([a, b], 0)),
    "take": lambda r: ((_rand(r, 5, 3),), lambda a: vt.take(a, [4, 0, 4], axis=0)),
    "embedding": lambda r: ((_rand(r, 6, 3),), lambda a: vt.embedding(a, [1, 1, 5])),
    "broadcast_to": lambda r: ((_rand(r, 1, 3),), lambda a: vt.broadcast_to(a, (4, 3))),
    "abs": lambda r: ((_rand(r, 7),), lambda a: vt.abs(a)),
    "where": lambda r: ((_rand(r, 4), _rand(r, 4)),
                        lambda a, b: vt.where(np.array([1, 0, 1, 0], bool), a, b)),
    "softmax": lambda r: ((_rand(r, 3, 5),), lambda a: vt.softmax(a, axis=0)),
    "layer_norm": lambda r: ((_rand(r, 3, 6), _rand(r, 6), _rand(r, 6)),
                             lambda x, g, b: vt.layer_norm(x, g, b)),
    "gelu": lambda r: ((_rand(r, 10),), lambda a: vt.gelu(a)),
    "attention": lambda r: ((_rand(r, 2, 3, 4), _rand(r, 2, 5, 4), _rand(r, 2, 5, 3)),
                            lambda q, k, v: vt.attention(q, k, v, 0.5)),
    "bilinear": lambda r: ((_rand(r, 2, 3, 3, 2),
                            Tensor(r.uniform(-0.9, 0.9, size=(2, 3, 3, 2)), requires_grad=True)),
                           lambda g, o: vt.bilinear_sample(g, o)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_difference_gradients(name):
    for trial in range(20):
        rng = np.random.default_rng(1000 * trial + len(name))
        inputs, fn = OPS[name](rng)
        out_shape = fn(*inputs).shape
        proj = _projector(rng, out_shape)
        params = {f"in{i}": t for i, t in enumerate(inputs)}
        errors = check_grads(lambda: proj(fn(*inputs)), params, h=1e-5)
        assert max(errors.values()) < 1e-4, (name, trial, errors)


# -------------------------------------------------------------------- AdamW


def test_adamw_zero_grad_no_decay_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_descends_on_square():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    vt.sum(w * w).backward()
    adamw_step(opt)
    assert w.data[0] < 1.0


def test_adamw_converges_on_quadratic():
    # f(w) = (w0 - 3)^2 + 2 (w1 + 1)^2, minimum at (3, -1)
    w = Tensor(np.zeros(2), requires_grad=True)
    target = np.array([3.0, -1.0])
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    for step in range(200):
        opt.zero_grad()
        d = w - target
        vt.sum(d * d * np.array([1.0, 2.0])).backward()
        opt.lr = 0.1 if step < 150 else 0.01
        opt.step()
    np.testing.assert_allclose(w.data, target, atol=1e-3)


def test_adamw_missing_grad_names_parameter():
    opt = AdamW({"blocks.0.w_q": Tensor(np.ones(2), requires_grad=True)})
    with pytest.raises(ContractError, match="blocks.0.w_q"):
        opt.step()


def test_adamw_decoupled_decay_and_exclusions():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"a": a, "b": b}, lr=0.1, weight_decay=0.5, no_decay=["b"])
    a.grad, b.grad = np.zeros(1), np.zeros(1)
    opt.step()
    assert a.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert b.data[0] == 2.0
