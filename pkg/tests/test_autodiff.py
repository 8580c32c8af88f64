import numpy as np
import pytest

from tcts.autodiff import OPS, Tape, grad_check
from tcts.errors import NonFinite, ShapeMismatch


def _params(rng, **shapes):
    return {k: rng.normal(size=s) for k, s in shapes.items()}


@pytest.mark.parametrize("build", [
    lambda t, P: t.sum(t.matmul(P["a"], P["b"])),
    lambda t, P: t.sum(t.tanh(t.matmul(t.reshape(P["c"], (2, 3, 4)), P["b"]))),
    lambda t, P: t.sum(t.mul(t.add(P["a"], P["row"]), P["a"])),
    lambda t, P: t.sum(t.sigmoid(t.concat(P["a"], P["a"], axis=1))),
    lambda t, P: t.sum(t.mul(t.softmax(P["a"]), t.const(np.arange(4.0)))),
    lambda t, P: t.sum(t.log(t.softmax(P["a"]))),
    lambda t, P: t.sum(t.glu(t.concat(P["a"], P["a"]))),
    lambda t, P: t.sum(t.mul(t.gather_row(P["a"], [[0, 2], [2, 2]]), t.const(np.ones(4)))),
    lambda t, P: t.scale(t.sum(t.sum(P["c"], axis=1)), 3.0),
    lambda t, P: t.sum(t.tanh(t.bmm(t.reshape(P["c"], (2, 3, 4)),
                                     t.reshape(P["c"], (2, 3, 4)), transpose_b=True))),
    lambda t, P: t.sum(t.tanh(t.bmm(t.reshape(P["c"], (2, 3, 4)), t.reshape(P["d"], (2, 4, 2))))),
    lambda t, P: t.sum(t.mul(t.take(t.reshape(P["c"], (2, 3, 4)), 1, axis=1), P["row"])),
])
def test_each_op_matches_finite_differences(build, rng):
    P = _params(rng, a=(3, 4), b=(4, 5), row=(4,), c=(6, 4), d=(16,))
    assert grad_check(build, P, eps=1e-6) < 1e-7


def test_op_inventory():
    assert set(OPS) == {"matmul", "bmm", "add", "mul", "concat", "sigmoid", "tanh", "softmax",
                        "log", "glu", "gather_row", "take", "sum", "scale", "reshape"}


def test_repeated_take_accumulates(rng):
    def f(t, P):
        x = t.reshape(P["x"], (2, 3, 2))
        return t.sum(t.mul(t.take(x, 0, axis=1), t.take(x, 0, axis=1)))
    P = {"x": rng.normal(size=12)}
    tape = Tape()
    x = tape.param("x", P["x"])
    grads = tape.backward(f(tape, {"x": x}))
    expected = np.zeros((2, 3, 2))
    expected[:, 0] = 2 * P["x"].reshape(2, 3, 2)[:, 0]
    np.testing.assert_allclose(grads["x"], expected.ravel())


def test_unreachable_param_gets_zero_gradient():
    tape = Tape()
    a = tape.param("a", np.ones(3))
    tape.param("b", np.ones(2))
    grads = tape.backward(tape.sum(a))
    np.testing.assert_array_equal(grads["b"], np.zeros(2))
    np.testing.assert_array_equal(grads["a"], np.ones(3))


def test_non_finite_forward_reports_node():
    tape = Tape()
    x = tape.const(np.array([1e308]))
    with pytest.raises(NonFinite) as info:
        tape.scale(x, 10.0)
    assert info.value.node_id == 1


def test_log_floor_bounds_value():
    tape = Tape()
    out = tape.log(tape.const(np.array([0.0, 1.0])))
    assert out.data[0] == pytest.approx(np.log(1e-12))


def test_sigmoid_is_overflow_free():
    tape = Tape()
    out = tape.sigmoid(tape.const(np.array([-1000.0, 0.0, 1000.0])))
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])


def test_shape_errors():
    tape = Tape()
    with pytest.raises(ShapeMismatch):
        tape.matmul(tape.const(np.ones((2, 3))), tape.const(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        tape.add(tape.const(np.ones(3)), tape.const(np.ones(4)))
    with pytest.raises(ShapeMismatch):
        tape.backward(tape.const(np.ones(2)))


def test_inference_tape_has_no_backward():
    tape = Tape(record=False)
    x = tape.const(np.ones(2))
    with pytest.raises(RuntimeError):
        tape.backward(tape.sum(x))


def test_values_are_read_only():
    tape = Tape()
    x = tape.const(np.ones(2))
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_mixing_tapes_is_rejected():
    a, b = Tape(), Tape()
    with pytest.raises(ValueError):
        a.add(a.const(np.ones(2)), b.const(np.ones(2)))


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda t, P: t.sum(P["x"]), {"x": np.ones(2)}, eps=1.0)
