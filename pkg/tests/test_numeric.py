import math

import numpy as np
import pytest

from psgkit import numeric as nx
from psgkit.numeric import ContractError, DimensionError, NonDeterministicError, Tape, Tensor


def grads_of(fn, *params):
    with Tape() as tape:
        out = fn()
    return tape.backward(out, list(params))


def test_matmul_examples():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nx.matmul(np.eye(3), m).data, m)
    assert np.array_equal(nx.matmul([[1.0, 2], [3, 4]], [[1.0], [1]]).data, [[3], [7]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 1\)"):
        nx.matmul(np.ones((2, 3)), np.ones((4, 1)))


def test_matmul_grad_closed_form(rng):
    a = nx.parameter(rng.standard_normal((4, 5)))
    b = rng.standard_normal((5, 2))
    (g,) = grads_of(lambda: nx.sum_(nx.matmul(a, b)), a)
    np.testing.assert_allclose(g, np.ones((4, 2)) @ b.T, rtol=1e-12)
    rep = nx.grad_check(lambda: nx.sum_(nx.matmul(a, b)), {"a": a}, rtol=1e-4)
    assert rep.passed


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(np.zeros(3)).data, [1 / 3] * 3)
    out = nx.softmax(np.array([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_gradcheck(rng):
    x = nx.parameter(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    rep = nx.grad_check(lambda: nx.sum_(nx.mul(nx.softmax(x, axis=-1), w)), {"x": x}, rtol=1e-4)
    assert rep.passed, rep.worst()


def test_layer_norm_examples():
    out = nx.layer_norm(np.full((1, 4), 7.0), np.ones(4), np.zeros(4)).data
    np.testing.assert_array_equal(out, np.zeros((1, 4)))
    out = nx.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-3)


def test_layer_norm_gradcheck(rng):
    x = nx.parameter(rng.standard_normal((2, 6)))
    g = nx.parameter(rng.standard_normal(6))
    b = nx.parameter(rng.standard_normal(6))
    w = rng.standard_normal((2, 6))
    rep = nx.grad_check(lambda: nx.sum_(nx.mul(nx.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b}, rtol=1e-4)
    assert rep.passed, rep.worst()


@pytest.mark.parametrize("op", ["exp", "tanh", "sigmoid", "softplus", "log_sigmoid", "gelu"])
def test_unary_ops_gradcheck(op, rng):
    x = nx.parameter(rng.standard_normal(7))
    w = rng.standard_normal(7)
    f = getattr(nx, op)
    assert nx.grad_check(lambda: nx.sum_(nx.mul(f(x), w)), {"x": x}, rtol=1e-5).passed


def test_broadcast_and_shape_ops_gradcheck(rng):
    a = nx.parameter(rng.standard_normal((2, 3, 4)))
    b = nx.parameter(rng.standard_normal(4))
    tbl = nx.parameter(rng.standard_normal((5, 4)))
    w = rng.standard_normal((3, 3, 4))

    def f():
        y = nx.add(nx.mul(a, b), nx.div(a, nx.add(nx.exp(b), 1.0)))
        y = nx.transpose(y, (1, 0, 2))
        y = nx.concat([y, nx.reshape(nx.take_rows(tbl, [0, 2, 2]), (3, 1, 4))], axis=1)
        return nx.add(nx.sum_(nx.mul(y, w)),
                      nx.mean(nx.power(nx.swapaxes(a, 0, 2), 2)))

    rep = nx.grad_check(f, {"a": a, "b": b, "tbl": tbl}, rtol=1e-5)
    assert rep.passed, rep.worst()


def test_backward_examples():
    w = nx.parameter(np.array([1.0, 2.0]))
    (g,) = grads_of(lambda: nx.sum_(w), w)
    np.testing.assert_array_equal(g, [1.0, 1.0])
    (g,) = grads_of(lambda: nx.sum_(nx.mul(w, w)), w)
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_backward_contracts():
    w = nx.parameter(np.ones(3))
    with Tape() as tape:
        out = nx.mul(w, 2.0)
    with pytest.raises(ContractError):
        tape.backward(out, [w])
    with Tape() as tape:
        out = nx.sum_(w)
    tape.backward(out, [w])
    with pytest.raises(ContractError):
        tape.backward(out, [w])


def test_unreached_param_gets_zero_and_no_tape_records_nothing():
    w, u = nx.parameter(np.ones(2)), nx.parameter(np.ones(3))
    g = grads_of(lambda: nx.sum_(w), w, u)
    np.testing.assert_array_equal(g[1], np.zeros(3))
    out = nx.mul(w, 3.0)  # no active tape
    assert not out.requires_grad


def test_tape_replays_in_reverse_order():
    w = nx.parameter(np.array(2.0))
    seen = []
    with Tape() as tape:
        a = nx.mul(w, 3.0)
        b = nx.exp(a)
        c = nx.sum_(b)
    ids = [id(r[0]) for r in tape.records]
    assert ids == [id(a), id(b), id(c)]
    original = [r[2] for r in tape.records]
    tape.records = [(o, i, (lambda f, k: (lambda g: (seen.append(k), f(g))[1]))(fn, k))
                    for k, ((o, i, _), fn) in enumerate(zip(tape.records, original))]
    tape.backward(c, [w])
    assert seen == [2, 1, 0]


def test_grad_check_controls():
    w = nx.parameter(np.array([0.5, -1.5, 2.0]))
    f = lambda: nx.sum_(nx.mul(w, w))  # noqa: E731
    assert nx.grad_check(f, {"w": w}).passed
    bad = {"w": 2 * w.data * 1.10}
    rep = nx.grad_check(f, {"w": w}, analytic=bad)
    assert not rep.passed and rep.worst(1)[0].name == "w"


def test_grad_check_flags_nondeterminism():
    w = nx.parameter(np.ones(2))
    state = iter(range(100))
    with pytest.raises(NonDeterministicError):
        nx.grad_check(lambda: nx.sum_(nx.mul(w, float(next(state)))), {"w": w})


def test_forward_stays_finite_on_extremes():
    x = Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
    for f in (nx.sigmoid, nx.softplus, nx.log_sigmoid, nx.gelu, nx.tanh):
        assert np.isfinite(f(x).data).all(), f.__name__
    assert math.isclose(nx.softplus(Tensor(np.array(0.0))).item(), math.log(2.0))


def test_tapes_are_thread_confined():
    import threading
    w = nx.parameter(np.ones(2))
    seen = []
    with Tape():
        t = threading.Thread(target=lambda: seen.append(nx.active_tape()))
        t.start()
        t.join()
        assert nx.active_tape() is not None
    assert seen == [None]
    del w
