import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvcqa import diffmath as dm
from oracles import random_net

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


# -- affine / tanh


def test_affine_identity_and_zero():
    assert np.allclose(dm.affine([3.0, -1.0], np.eye(2), np.zeros(2)).value, [3, -1])
    assert np.allclose(dm.affine([5.0, 7.0], np.zeros((2, 2)), [1.0, 2.0]).value, [1, 2])


def test_affine_arithmetic():
    out = dm.affine([1.0, 1.0], np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2)).value
    assert out.tolist() == [3.0, 7.0]


def test_affine_shape_mismatch():
    with pytest.raises(dm.ShapeError):
        dm.affine(np.ones(3), np.eye(2), np.zeros(2))


def test_tanh_values():
    assert dm.tanh_act([0.0, 0.0]).value.tolist() == [0.0, 0.0]
    assert abs(dm.tanh_act([50.0]).value[0] - 1.0) < 1e-9
    assert dm.tanh_act([1.0]).value[0] == pytest.approx(0.7615941559557649, abs=1e-12)


# -- softmax / cross-entropy / JS


def test_softmax_examples():
    assert np.allclose(dm.softmax(np.zeros(4)).value, 0.25)
    assert np.allclose(dm.softmax([7.5, 7.5, 7.5]).value, 1 / 3)
    out = dm.softmax(np.log([1.0, 2.0, 3.0])).value
    assert np.allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_overflow_safe():
    out = dm.softmax([1000.0, 1000.0, -1000.0]).value
    assert np.all(np.isfinite(out)) and np.allclose(out, [0.5, 0.5, 0.0])


@given(arrays(np.float64, st.integers(1, 8), elements=finite), finite)
def test_softmax_simplex_and_shift(z, c):
    p = dm.softmax(z).value
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p, dm.softmax(z + c).value, atol=1e-9)


def test_cross_entropy_examples():
    assert dm.cross_entropy(np.full(4, 0.25), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    assert dm.cross_entropy(np.array([0.0, 1.0, 0.0]), 1).item() == 0.0
    assert dm.cross_entropy(np.array([0.7, 0.2, 0.1]), 0).item() == pytest.approx(0.356675, abs=1e-6)


def test_cross_entropy_floor():
    assert dm.cross_entropy(np.array([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))


def test_js_examples():
    assert dm.js_divergence([0.3, 0.7], [0.3, 0.7]).item() == pytest.approx(0.0, abs=1e-15)
    assert dm.js_divergence([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert dm.js_divergence([0.5, 0.5], [1.0, 0.0]).item() == pytest.approx(0.215762, abs=1e-6)


def test_js_length_mismatch():
    with pytest.raises(dm.ShapeError):
        dm.js_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


@given(st.integers(2, 6).flatmap(lambda k: st.tuples(
    arrays(np.float64, k, elements=st.floats(0, 1)), arrays(np.float64, k, elements=st.floats(0, 1)))))
def test_js_symmetric_and_bounded(pair):
    p, q = pair
    if p.sum() == 0 or q.sum() == 0:
        return
    p, q = p / p.sum(), q / q.sum()
    a, b = dm.js_divergence(p, q).item(), dm.js_divergence(q, p).item()
    assert abs(a - b) < 1e-12
    assert -1e-12 <= a <= math.log(2) + 1e-12


# -- gradients


def _grads(fn, **params):
    _, g, diag = dm.value_and_grads(fn, params)
    return g, diag


def test_grad_sum_and_square():
    g, _ = _grads(lambda p: dm.sum_all(p["x"]), x=np.array([1.0, -2.0, 5.0]))
    assert g["x"].tolist() == [1.0, 1.0, 1.0]
    g, _ = _grads(lambda p: dm.dot(p["x"], p["x"]), x=np.array([2.0]))
    assert g["x"].tolist() == [4.0]


def test_grad_ce_softmax_matches_closed_form():
    z = np.array([0.3, -1.2, 2.0, 0.1])
    g, _ = _grads(lambda p: dm.cross_entropy(dm.softmax(p["z"]), 2), z=z)
    expected = dm.softmax(z).value - np.eye(4)[2]
    assert np.allclose(g["z"], expected, atol=1e-12)
    num = dm.finite_difference_grads(lambda a: dm.cross_entropy(dm.softmax(a["z"]), 2).item(), {"z": z})
    assert dm.max_relative_error(g, num) < 1e-6


def test_untouched_param_is_flagged():
    g, diag = _grads(lambda p: dm.sum_all(p["a"]), a=np.ones(2), unused=np.ones(3))
    assert g["unused"].tolist() == [0.0, 0.0, 0.0]
    assert diag == ["unused"]


def test_grad_shapes_match():
    rng = np.random.default_rng(0)
    params = {"W": rng.normal(size=(3, 4)), "b": rng.normal(size=3), "x": rng.normal(size=(5, 4))}
    g, _ = _grads(lambda p: dm.mean_all(dm.tanh_act(dm.affine(p["x"], p["W"], p["b"]))), **params)
    assert all(g[k].shape == params[k].shape for k in params)


@pytest.mark.parametrize("seed", range(100))
def test_finite_difference_agreement(seed):
    fn, params = random_net(seed)
    assert sum(v.size for v in params.values()) <= 200
    assert dm.gradient_check(fn, params, eps=1e-5) <= 1e-4


def test_embed_mean_gradient_and_null_row():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(6, 3))
    table[0] = 0.0
    ids = np.array([[2, 3, 0], [1, 1, 5]])
    lengths = np.array([2, 3])
    fn = lambda p: dm.sum_all(dm.tanh_act(dm.embed_mean(p["t"], ids, lengths)))
    _, g, _ = dm.value_and_grads(fn, {"t": table})
    assert np.all(g["t"][0] == 0.0)
    assert dm.gradient_check(lambda p: dm.sum_all(dm.tanh_act(dm.embed_mean(p["t"], ids, lengths, None))),
                             {"t": table}) < 1e-6


# -- update rules


def test_param_step_rules():
    out = dm.param_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, 0.1)
    assert out["w"][0] == pytest.approx(0.95)
    same = dm.param_step({"w": np.array([1.0, 2.0])}, {"w": np.zeros(2)}, 0.1)
    assert same["w"].tolist() == [1.0, 2.0]


def test_param_step_skips_non_finite():
    incidents = []
    out = dm.param_step({"w": np.array([1.0])}, {"w": np.array([np.nan])}, 0.1, incidents)
    assert out["w"].tolist() == [1.0] and len(incidents) == 1


def test_gradient_descent_converges_on_quadratic():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -2.0])
    target = np.linalg.solve(A, b)
    params = {"x": np.zeros(2)}
    for _ in range(2000):
        _, g, _ = dm.value_and_grads(
            lambda p: dm.sub(dm.scale(dm.dot(p["x"], dm.affine(p["x"], A, np.zeros(2))), 0.5), dm.dot(p["x"], b)),
            params)
        params = dm.param_step(params, g, 0.2)
    assert np.max(np.abs(params["x"] - target)) < 1e-6


def test_adam_reduces_loss():
    params = {"x": np.array([3.0, -4.0])}
    opt = dm.Adam(0.1)
    for _ in range(300):
        _, g, _ = dm.value_and_grads(lambda p: dm.dot(p["x"], p["x"]), params)
        params = opt.step(params, g)
    assert np.linalg.norm(params["x"]) < 1e-2
