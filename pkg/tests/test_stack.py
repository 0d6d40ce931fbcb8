import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffstack import stack as sk
from diffstack.mathcore import softmax
from diffstack.stack import NOOP, POP, PUSH, DiscreteStack, StackState


def S(*cells):
    return StackState(np.array(cells, dtype=float))


def padded(state, n):
    return [state[i] for i in range(n)]


def test_pure_push():
    out = sk.stack_step(S(0.2, 0.5), [1, 0, 0], 0.7)
    assert padded(out, 4) == [0.7, 0.2, 0.5, 0.0]


def test_pure_pop():
    out = sk.stack_step(S(0.2, 0.5, 0.9), [0, 1, 0], 0.3)
    assert padded(out, 4) == [0.5, 0.9, 0.0, 0.0]


def test_pure_noop_is_identity():
    prev = S(0.2, 0.5, 0.9)
    out = sk.stack_step(prev, [0, 0, 1], 0.3)
    assert padded(out, 5) == padded(prev, 5)


def test_literal_depth_rule_zeroes_lower_cells():
    # scripted trace of the literal equations: only the top keeps a NoOP term
    out = sk.stack_step(S(0.2, 0.5, 0.9), [0, 0, 1], 0.3, noop_identity=False)
    assert padded(out, 4) == [0.2, 0.0, 0.0, 0.0]


def test_blended_step_by_hand():
    a = np.array([0.5, 0.3, 0.2])
    out = sk.stack_step(S(0.4, 0.8), a, 0.6)
    expect = [
        0.5 * 0.6 + 0.3 * 0.8 + 0.2 * 0.4,
        0.5 * 0.4 + 0.3 * 0.0 + 0.2 * 0.8,
        0.5 * 0.8 + 0.0 + 0.0,
    ]
    np.testing.assert_allclose(out.cells, expect, rtol=1e-15)
    assert out.depth == 3


def test_read_topk():
    assert list(sk.read_topk(StackState())) == [0, 0, 0]
    assert list(sk.read_topk(S(0.4))) == [0.4, 0, 0]
    assert list(sk.read_topk(S(1, 2, 3, 4, 5))) == [1, 2, 3]
    with pytest.raises(ValueError):
        sk.read_topk(S(1.0), k=0)


def test_action_dist_and_push_value():
    z = np.array([0.3, -0.2])
    np.testing.assert_allclose(sk.action_dist(z, np.zeros((3, 2))), [1 / 3] * 3)
    p = sk.action_dist(np.array([1.0]), np.array([[0.0], [50.0], [0.0]]))
    assert p[POP] == pytest.approx(1.0, abs=1e-20)
    A = np.array([[0.1, 0.2], [-0.3, 0.4], [0.5, 0.6]])
    np.testing.assert_allclose(sk.action_dist(z, A), softmax(A @ z), rtol=1e-15)
    assert sk.push_value(z, np.zeros(2)) == 0.5
    assert sk.push_value(np.array([1.0]), np.array([[60.0]])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sk.action_dist(z, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        sk.push_value(z, np.zeros(3))


def test_noop_counter():
    assert sk.noop_counter_update(0, [0.1, 0.1, 0.8]) == 1
    assert sk.noop_counter_update(5, [0.8, 0.1, 0.1]) == 0
    assert sk.noop_counter_update(2, [0.45, 0.1, 0.45]) == 0
    with pytest.raises(ValueError):
        sk.noop_counter_update(-1, [0, 0, 1])


def test_one_hot_actions_match_discrete_stack():
    rng = np.random.default_rng(0)
    eye = np.eye(3)
    for _ in range(10_000):
        n = int(rng.integers(1, 12))
        cont, ref = StackState(), DiscreteStack()
        for act in rng.integers(0, 3, size=n):
            v = float(rng.random())
            cont = sk.stack_step(cont, eye[act], v)
            ref.apply(int(act), v)
        depth = len(ref.items)
        assert padded(cont, depth + 3) == ref.top(depth + 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0.001, 0.999)), max_size=25))
def test_cells_stay_in_unit_interval(steps):
    s = StackState()
    for raw, v in steps:
        raw = np.array(raw) + 1e-9
        s = sk.stack_step(s, raw / raw.sum(), v)
        assert np.all(s.cells >= 0) and np.all(s.cells <= 1 + 1e-12)
        assert s.depth <= len(steps) + 1


def test_stack_step_gradient():
    from diffstack import mathcore as mc
    from diffstack.cells.reference import stack_step_tape

    rng = np.random.default_rng(3)
    vals = {"s": rng.random(6), "a": rng.random(3), "v": rng.random(1), "w": rng.normal(size=6)}

    def build(p):
        tape = mc.GradTape()
        W = {k: tape.param(k, v) for k, v in p.items()}
        out = stack_step_tape(W["s"], mc.softmax_v(W["a"]), mc.index(W["v"], 0))
        return tape, mc.dot(out, W["w"])

    tape, loss = build(vals)
    g = mc.backward(tape, loss)
    num = mc.numerical_gradient(lambda p: float(build(p)[1].value), {k: v.copy() for k, v in vals.items()})
    assert mc.max_relative_error(g, num) < 1e-4


def test_trace_export(tmp_path):
    path = tmp_path / "trace.csv"
    sk.write_trace(path, [(0, 0.2, 0.3, 0.5, 0.9, 0.9, 0.0, 0.0)])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("t,a_push") and lines[1].startswith("0,0.2")
