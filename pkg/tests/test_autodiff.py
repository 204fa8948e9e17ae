import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sfmnet import autodiff as ad
from sfmnet.gradcheck import check_pipeline, check_primitives

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_sum_of_squares():
    value, grad = ad.value_and_grad(lambda p: ad.sum_(p["x"] * p["x"]), {"x": np.array([1.0, 2.0, 3.0])})
    assert value == 14.0
    np.testing.assert_array_equal(grad["x"], [2.0, 4.0, 6.0])


def test_constant_loss_has_zero_gradient():
    value, grad = ad.value_and_grad(lambda p: 5.0, {"x": np.ones(3), "y": np.ones((2, 2))})
    assert value == 5.0
    assert set(grad) == {"x", "y"}
    assert not grad["x"].any() and grad["y"].shape == (2, 2) and not grad["y"].any()


def test_finite_diff_examples():
    g = ad.finite_diff_grad(lambda p: p["x"] * p["x"], {"x": np.array(3.0)}, 1e-4)
    assert abs(g["x"] - 6.0) < 1e-7
    g = ad.finite_diff_grad(lambda p: 7.0, {"x": np.ones(4)}, 1e-4)
    assert not g["x"].any()
    g = ad.finite_diff_grad(lambda p: ad.sin(p["x"]), {"x": np.array(0.0)}, 1e-4)
    assert abs(g["x"] - 1.0) < 1e-8


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda p: p["x"], {"x": np.zeros(1)}, 0.0)


def test_unregistered_primitive_rejected():
    x = ad.Tensor(np.ones(3))
    with pytest.raises(ad.UnregisteredPrimitiveError, match="cosh"):
        np.cosh(x)
    with pytest.raises(ad.UnregisteredPrimitiveError):
        ad.lookup("no_such_op")


def test_registered_ufuncs_dispatch():
    _, g = ad.value_and_grad(lambda p: ad.sum_(np.exp(p["x"])), {"x": np.array([0.0, 1.0])})
    np.testing.assert_allclose(g["x"], np.exp([0.0, 1.0]))


def test_non_finite_names_primitive():
    with pytest.raises(ad.NonFiniteError, match="log"):
        ad.value_and_grad(lambda p: ad.sum_(ad.log(p["x"])), {"x": np.array([1.0, 0.0])})
    with pytest.raises(ad.NonFiniteError):
        ad.value_and_grad(lambda p: ad.sum_(p["x"]), {"x": np.array([np.nan])})


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        ad.value_and_grad(lambda p: p["x"] * 2.0, {"x": np.ones(3)})


def test_l1_subgradient_zero_at_kink():
    _, g = ad.value_and_grad(lambda p: ad.sum_(ad.abs_(p["x"])), {"x": np.array([-2.0, 0.0, 3.0])})
    np.testing.assert_array_equal(g["x"], [-1.0, 0.0, 1.0])


def test_minimum_tie_goes_to_first_argument():
    _, g = ad.value_and_grad(lambda p: ad.minimum(p["a"], p["b"]), {"a": np.array(1.0), "b": np.array(1.0)})
    assert (g["a"], g["b"]) == (1.0, 0.0)


def test_fancy_index_accumulates():
    _, g = ad.value_and_grad(lambda p: ad.sum_(p["x"][np.array([0, 0, 2])]), {"x": np.zeros(3)})
    np.testing.assert_array_equal(g["x"], [2.0, 0.0, 1.0])


def test_broadcast_gradient_reduces():
    _, g = ad.value_and_grad(lambda p: ad.sum_(p["a"] * np.ones((4, 3))), {"a": np.ones(3)})
    np.testing.assert_array_equal(g["a"], [4.0, 4.0, 4.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_composite_matches_finite_differences(x, y):
    def loss(p):
        a, b = p["x"], p["y"]
        return ad.sum_(ad.tanh(a) * ad.exp(0.3 * b) + ad.softplus(a - b) + ad.square(ad.sin(b)) / (1.0 + a * a))

    _, g = ad.value_and_grad(loss, {"x": x, "y": y})
    fd = ad.finite_diff_grad(loss, {"x": x, "y": y}, 1e-6)
    for k in g:
        np.testing.assert_allclose(g[k], fd[k], rtol=1e-6, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=finite))
def test_gradient_is_linear(x):
    f1 = lambda p: ad.sum_(ad.sigmoid(p["x"]) * 3.0)  # noqa: E731
    f2 = lambda p: ad.sum_(ad.square(p["x"]) - p["x"])  # noqa: E731
    _, g1 = ad.value_and_grad(f1, {"x": x})
    _, g2 = ad.value_and_grad(f2, {"x": x})
    _, g12 = ad.value_and_grad(lambda p: f1(p) + f2(p), {"x": x})
    np.testing.assert_allclose(g12["x"], g1["x"] + g2["x"], rtol=1e-12, atol=1e-14)


def test_every_primitive_matches_finite_differences():
    results = check_primitives(seed=3, points=100)
    assert {r.name for r in results} == set(ad.PRIMITIVES)
    bad = {r.name: r.failures for r in results if not r.ok}
    assert not bad
    assert max(r.max_rel_error for r in results) < 1e-6


def test_pipeline_gradient_on_8x8():
    results = check_pipeline(seed=11, problems=3, size=8, k=3)
    assert all(r.ok for r in results), [r.failures for r in results]
    assert all(r.checked - r.kinks > r.checked // 2 for r in results)


def test_evaluation_is_bit_identical(rng):
    x = rng.normal(size=(6, 6))

    def loss(p):
        return ad.mean(ad.abs_(p["x"][:, 1:] - p["x"][:, :-1])) + ad.sum_(ad.sigmoid(p["x"]))

    v1, g1 = ad.value_and_grad(loss, {"x": x})
    v2, g2 = ad.value_and_grad(loss, {"x": x})
    assert v1 == v2 and np.array_equal(g1["x"], g2["x"])


def test_branch_trace_sees_kinks():
    with ad.branch_trace() as a:
        ad.abs_(np.array([-1.0, 2.0]))
    with ad.branch_trace() as b:
        ad.abs_(np.array([1.0, 2.0]))
    assert len(a) == len(b) == 1 and not np.array_equal(a[0], b[0])
    # outside a trace block nothing is recorded
    ad.abs_(np.array([1.0]))


def test_concurrent_evaluations_independent(rng):
    xs = [rng.normal(size=8) for _ in range(4)]
    expected = [ad.value_and_grad(lambda p: ad.sum_(ad.abs_(p["x"]) * p["x"]), {"x": x}) for x in xs]
    out = [None] * 4

    def work(i):
        with ad.branch_trace():
            out[i] = ad.value_and_grad(lambda p: ad.sum_(ad.abs_(p["x"]) * p["x"]), {"x": xs[i]})

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for (v, g), (ve, ge) in zip(out, expected):
        assert v == ve and np.array_equal(g["x"], ge["x"])
