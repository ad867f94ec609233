import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ovclip import numkit as nk
from ovclip.errors import InvalidArgument


def T(x, grad=True):
    return nk.tensor(np.asarray(x, dtype=nk.compute_dtype()), requires_grad=grad)


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(nk.softmax_lastdim(T([0.0, 0.0])).data, [0.5, 0.5])

    def test_uniform_triple(self):
        np.testing.assert_allclose(nk.softmax_lastdim(T([1.0, 1.0, 1.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_closed_form(self):
        np.testing.assert_allclose(nk.softmax_lastdim(T([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgument):
            nk.softmax_lastdim(T(np.zeros((2, 0))))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one_even_for_large_inputs(self, x):
        with nk.precision("float64"):
            out = nk.softmax_lastdim(T(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestAttention:
    def test_single_key_returns_value(self, rng):
        q, k, v = rng.normal(size=(4, 8)), rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
        out = nk.scaled_attention(T(q), T(k), T(v)).data
        np.testing.assert_allclose(out, np.repeat(v, 4, axis=0).astype(np.float32), rtol=1e-6)

    def test_duplicated_keys_do_not_change_output(self, rng):
        q, k, v = rng.normal(size=(5, 6)), rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        base = nk.scaled_attention(T(q), T(k), T(v)).data
        dup = nk.scaled_attention(T(q), T(np.tile(k, (3, 1))), T(np.tile(v, (3, 1)))).data
        np.testing.assert_allclose(dup, base, atol=1e-6)

    def test_hand_evaluated_case(self):
        q = np.array([[1.0, 0.0]])
        eye = np.eye(2)
        # logits [1, 0] / sqrt(2)
        a = math.exp(1 / math.sqrt(2))
        expected = np.array([[a / (a + 1), 1 / (a + 1)]])
        np.testing.assert_allclose(nk.scaled_attention(T(q), T(eye), T(eye)).data, expected, rtol=1e-6)

    def test_dim_mismatch(self, rng):
        with pytest.raises(InvalidArgument):
            nk.scaled_attention(T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 4))), T(rng.normal(size=(2, 4))))

    def test_mask_blocks_keys(self, rng):
        q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        mask = np.array([[0.0, -np.inf, -np.inf], [0.0, 0.0, -np.inf]])
        out = nk.scaled_attention(T(q), T(k), T(v), mask).data
        np.testing.assert_allclose(out[0], v[0].astype(np.float32), rtol=1e-6)
        ref = nk.scaled_attention(T(q[1:]), T(k[:2]), T(v[:2])).data
        np.testing.assert_allclose(out[1:], ref, rtol=1e-6)


class TestBackward:
    def test_square(self):
        x = T(3.0)
        assert nk.backward(nk.square(x), [x])[x] == pytest.approx(6.0)

    def test_sum_gives_ones(self, rng):
        x = T(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(nk.backward(nk.tsum(x), {"x": x})["x"], np.ones((3, 4)))

    def test_unused_parameter_gets_zero(self):
        x, y = T([1.0, 2.0]), T([[1.0], [2.0]])
        g = nk.backward(nk.tsum(nk.square(x)), {"x": x, "y": y})
        np.testing.assert_array_equal(g["y"], np.zeros((2, 1)))
        assert g["y"].shape == y.shape

    def test_non_scalar_loss(self):
        x = T([1.0, 2.0])
        with pytest.raises(InvalidArgument):
            nk.backward(nk.square(x), [x])

    def test_shared_node_accumulates(self):
        x = T(2.0)
        y = nk.mul(x, x)
        loss = nk.add(y, y)  # 2 x^2
        assert nk.backward(loss, [x])[x] == pytest.approx(8.0)

    def test_deterministic(self, rng):
        w = rng.normal(size=(4, 3))
        grads = []
        for _ in range(2):
            p = T(w)
            grads.append(nk.backward(nk.tsum(nk.gelu(nk.matmul(p, nk.swap_last(p)))), [p])[p])
        np.testing.assert_array_equal(grads[0], grads[1])


def _two_layer(seed):
    r = np.random.default_rng(seed)
    return {"w1": r.normal(size=(5, 8)) * 0.5, "b1": r.normal(size=(8,)) * 0.1,
            "g": 1 + 0.1 * r.normal(size=(8,)), "beta": 0.1 * r.normal(size=(8,)),
            "w2": r.normal(size=(8, 3)) * 0.5}, r.normal(size=(6, 5))


def _two_layer_loss(P, x):
    h = nk.gelu(nk.add(nk.matmul(nk.tensor(x), P["w1"]), P["b1"]))
    h = nk.layer_norm(h, P["g"], P["beta"])
    out = nk.log_softmax_lastdim(nk.matmul(h, P["w2"]))
    return nk.mean(nk.mul(out, nk.tensor(np.eye(3)[[0, 1, 2, 0, 1, 2]])))


@pytest.mark.parametrize("mode, tol", [("float32", 1e-3), ("float64", 1e-6)])
def test_two_layer_network_matches_finite_differences(mode, tol):
    theta, x = _two_layer(7)

    def f(th):
        with nk.precision("float64"):
            P = {k: nk.tensor(v) for k, v in th.items()}
            return float(_two_layer_loss(P, x).data)

    with nk.precision(mode):
        th = {k: v.astype(nk.compute_dtype()) for k, v in theta.items()}
        P = {k: nk.tensor(v, requires_grad=True) for k, v in th.items()}
        g = nk.backward(_two_layer_loss(P, x), P)
    fd = nk.finite_diff_grad(f, {k: v.astype(np.float64) for k, v in th.items()}, eps=1e-5)
    for k in theta:
        err = np.linalg.norm(g[k] - fd[k]) / max(np.linalg.norm(fd[k]), 1e-12)
        assert err <= tol, (k, err)


class TestFiniteDiff:
    def test_quadratic(self):
        g = nk.finite_diff_grad(lambda th: float(th["x"] ** 2), {"x": np.array(3.0)}, eps=1e-3)
        assert abs(g["x"] - 6.0) <= 1e-6

    def test_constant(self):
        g = nk.finite_diff_grad(lambda th: 4.0, {"x": np.ones(3)})
        np.testing.assert_array_equal(g["x"], 0.0)

    def test_sine(self):
        g = nk.finite_diff_grad(lambda th: float(np.sin(th["x"])), {"x": np.array(0.0)}, eps=1e-3)
        assert abs(g["x"] - 1.0) <= 1e-6

    def test_bad_eps(self):
        with pytest.raises(InvalidArgument):
            nk.finite_diff_grad(lambda th: 0.0, {"x": np.ones(1)}, eps=0.0)

    def test_unprobed_coordinates_are_nan(self):
        g = nk.finite_diff_grad(lambda th: float(th["x"].sum()), {"x": np.zeros(4)}, coords={"x": [1]})
        assert g["x"][1] == pytest.approx(1.0)
        assert np.isnan(g["x"][[0, 2, 3]]).all()


@pytest.mark.parametrize("op", [nk.exp, nk.tanh, nk.sin, nk.gelu, nk.square])
def test_unary_ops_match_finite_differences(op, rng):
    x0 = rng.normal(size=(3, 2))
    with nk.precision("float64"):
        x = T(x0)
        g = nk.backward(nk.tsum(op(x)), [x])[x]
        fd = nk.finite_diff_grad(lambda th: float(nk.tsum(op(nk.tensor(th["x"]))).data), {"x": x0}, eps=1e-6)
    np.testing.assert_allclose(g, fd["x"], rtol=1e-6, atol=1e-8)


def test_broadcast_gradients_reduce_to_shape(rng):
    with nk.precision("float64"):
        a, b = T(rng.normal(size=(4, 3))), T(rng.normal(size=(3,)))
        g = nk.backward(nk.tsum(nk.mul(nk.add(a, b), b)), {"a": a, "b": b})
    assert g["b"].shape == (3,)
    np.testing.assert_allclose(g["b"], (a.data + 2 * b.data).sum(axis=0))


def test_take_rows_scatter_adds(rng):
    table = T(rng.normal(size=(5, 2)))
    ids = np.array([[0, 2], [2, 4]])
    g = nk.backward(nk.tsum(nk.take_rows(table, ids)), [table])[table]
    np.testing.assert_array_equal(g[:, 0], [1, 0, 2, 0, 1])


def test_reductions_accumulate_in_float64():
    x = T(np.full(10_000_001, 0.1, dtype=np.float32), grad=False)
    assert float(nk.tsum(x).data) == pytest.approx(1_000_000.1, rel=1e-6)


def test_clip_gradient_is_zero_outside():
    x = T([0.5, 2.0, 150.0])
    g = nk.backward(nk.tsum(nk.clip(x, 1.0, 100.0)), [x])[x]
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_precision_rejects_unknown():
    with pytest.raises(InvalidArgument):
        with nk.precision("float16"):
            pass
