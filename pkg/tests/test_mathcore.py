import mpmath
import numpy as np
import pytest

from diffstack import mathcore as mc
from diffstack.mathcore import GradTape, RngStream


mpmath.mp.dps = 40


def test_scaled_tanh_fixed_points():
    assert mc.scaled_tanh(0.0) == 0.0
    assert abs(mc.scaled_tanh(50.0) - 1.7519) < 1e-9
    assert np.all(np.abs(mc.scaled_tanh(np.linspace(-40, 40, 101))) <= 1.7519)


def test_scaled_tanh_high_precision():
    ref = float(mpmath.mpf("1.7519") * mpmath.tanh(mpmath.mpf(1)))
    assert mc.scaled_tanh(1.5) == pytest.approx(ref, rel=1e-14)


def test_softmax_cases():
    np.testing.assert_allclose(mc.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=1e-15)
    p = mc.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300
    e = [mpmath.e ** k for k in (1, 2, 3)]
    ref = [float(x / sum(e)) for x in e]
    np.testing.assert_allclose(mc.softmax([1.0, 2.0, 3.0]), ref, rtol=1e-14)
    with pytest.raises(ValueError):
        mc.softmax([])


def test_softmax_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = mc.softmax(rng.normal(scale=20, size=7))
        assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


def test_logistic():
    assert mc.logistic(np.array([0.0]))[0] == 0.5
    x = np.linspace(-30, 30, 61)
    np.testing.assert_allclose(mc.logistic(-x), 1 - mc.logistic(x), atol=1e-15)
    ref = float(1 / (1 + mpmath.e ** -2))
    assert mc.logistic(np.array([2.0]))[0] == pytest.approx(ref, rel=1e-15)
    assert np.all(np.isfinite(mc.logistic(np.array([-1000.0, 1000.0]))))


def test_backward_constant_loss_is_zero():
    tape = GradTape()
    W = tape.param("W", np.ones((2, 2)))
    loss = tape.const(3.0)
    g = mc.backward(tape, loss)
    assert np.all(g["W"] == 0)


def test_backward_empty_tape():
    tape = GradTape()
    assert len(tape) == 0
    assert mc.backward(tape, tape.const(1.0)) == {}


def test_backward_half_squared_norm():
    rng = np.random.default_rng(1)
    Wv, x = rng.normal(size=(3, 4)), rng.normal(size=4)
    tape = GradTape()
    W = tape.param("W", Wv)
    y = mc.matvec(W, tape.const(x))
    loss = mc.total(mc.square(y)) * 0.5
    g = mc.backward(tape, loss)
    np.testing.assert_allclose(g["W"], np.outer(Wv @ x, x), rtol=1e-13)


def test_backward_nonfinite_names_tensor():
    tape = GradTape()
    W = tape.param("W", np.array([1.0]))
    loss = mc.total(W * np.inf)
    with pytest.raises(mc.NonFiniteError, match="W"):
        mc.backward(tape, loss)


def test_primitives_against_finite_differences():
    rng = np.random.default_rng(2)
    vals = {"a": rng.normal(size=5), "b": rng.normal(size=5), "W": rng.normal(size=(5, 5))}

    def build(tape, p):
        a, b, W = p["a"], p["b"], p["W"]
        h = mc.tanh_scaled(mc.matvec(W, a) + b)
        s = mc.sigmoid(h * a)
        q = mc.softmax_v(mc.concat([mc.index(s, slice(0, 2)), mc.index(h, slice(1, 3))]))
        st = mc.shift_down(mc.shift_up(b), mc.index(s, 0))
        return mc.total(mc.square(q)) + mc.dot(st, a) - mc.index(mc.log_softmax_v(h), 2) + mc.total(mc.column(W, 3))

    def f(p):
        tape = GradTape()
        return float(build(tape, {k: tape.param(k, v) for k, v in p.items()}).value)

    tape = GradTape()
    loss = build(tape, {k: tape.param(k, v) for k, v in vals.items()})
    g = mc.backward(tape, loss)
    num = mc.numerical_gradient(f, {k: v.copy() for k, v in vals.items()})
    assert mc.max_relative_error(g, num) < 1e-7


def test_max_relative_error_key_mismatch():
    with pytest.raises(KeyError):
        mc.max_relative_error({"a": np.zeros(1)}, {"b": np.zeros(1)})


def test_gaussian():
    rng = RngStream(3)
    np.testing.assert_array_equal(mc.gaussian(rng, 0.0, 0.0, 5), np.zeros(5))
    np.testing.assert_array_equal(mc.gaussian(rng, 2.5, 0.0, 3), np.full(3, 2.5))
    draws = mc.gaussian(RngStream(4), 0.0, 1.0, 10**6)
    assert abs(draws.mean()) < 0.01
    assert abs(draws.var() - 1.0) < 0.01
    with pytest.raises(ValueError):
        mc.gaussian(rng, 0.0, -1.0, 2)


def test_rng_determinism_and_spawn():
    a, b = RngStream(9), RngStream(9)
    assert mc.gaussian(a, 0, 1, 1)[0] == mc.gaussian(b, 0, 1, 1)[0]
    c1, c2 = RngStream(9).spawn(1), RngStream(9).spawn(2)
    assert c1.random() != c2.random()
    assert RngStream(9).spawn(1).random() == RngStream(9).spawn(1).random()


def test_uniform_init_bounds():
    W = mc.uniform_init(RngStream(0), 50, 16)
    assert W.shape == (50, 16) and np.all(np.abs(W) <= 0.25)
