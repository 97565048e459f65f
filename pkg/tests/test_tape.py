import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from risnoma import tape as tp
from risnoma.errors import NonFiniteValue, SingularMatrix
from risnoma.tape import ComplexVar, Tape, backward, backward_as_graph, record, solve_on_tape


def central_diff(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def close(a, b, rtol):
    return abs(a - b) <= rtol * max(1.0, abs(b))


# -- record -----------------------------------------------------------------

def test_record_mul():
    t = Tape()
    x = t.constant(3.0)
    assert record(t, "mul", (x, x)).value == 9.0


def test_record_exp_zero():
    t = Tape()
    assert record(t, "exp", (t.constant(0.0),)).value == 1.0


def test_record_div_by_zero_raises():
    t = Tape()
    one, zero = t.constant(1.0), t.constant(0.0)
    n = len(t)
    with pytest.raises(NonFiniteValue):
        record(t, "div", (one, zero))
    assert len(t) == n


def test_record_rejects_bad_operand():
    t = Tape()
    t.constant(1.0)
    with pytest.raises(IndexError):
        record(t, "neg", (5,))


def test_operands_precede_node():
    t = Tape()
    x, y = t.constant(1.0), t.constant(2.0)
    z = tp.exp(x * y) + tp.sin(y)
    backward_as_graph(z, [x, y])
    for i, node in enumerate(t.nodes):
        assert all(o < i for o in node.operands)


# -- backward -----------------------------------------------------------------

def test_backward_square():
    t = Tape()
    x = t.constant(3.0)
    assert backward(x * x, [x])[0] == 6.0


def test_backward_exp_plus():
    t = Tape()
    x, y = t.constant(0.0), t.constant(5.0)
    gx, gy = backward(tp.exp(x) + y, [x, y])
    assert (gx, gy) == (1.0, 1.0)


def test_backward_tanh_fd():
    t = Tape()
    x = t.constant(0.5)
    g = backward(tp.tanh(x), [x])[0]
    fd = central_diff(np.tanh, 0.5)
    assert abs(g - fd) <= 1e-7 * abs(fd)


def test_backward_leaves_tape_unchanged():
    t = Tape()
    x = t.constant(1.3)
    f = tp.sin(x) * tp.exp(x)
    n = len(t)
    backward(f, [x])
    assert len(t) == n


def test_hinge_subgradient_zero_at_kink():
    t = Tape()
    x = t.constant(0.0)
    assert backward(tp.relu(x), [x])[0] == 0.0
    x = t.constant(2.0)
    assert backward(tp.relu(x), [x])[0] == 1.0


def test_unreached_wrt_gets_zero():
    t = Tape()
    x, y = t.constant(1.0), t.constant(2.0)
    assert backward(x * 3.0, [x, y])[1] == 0.0


# -- backward_as_graph --------------------------------------------------------

def test_second_derivative_cube():
    t = Tape()
    x = t.constant(2.0)
    (g,) = backward_as_graph(x * x * x, [x])
    assert g.value == 12.0
    assert backward(g, [x])[0] == 12.0


def test_cross_partial():
    t = Tape()
    x, y = t.constant(2.0), t.constant(3.0)
    (gx,) = backward_as_graph(x * y, [x])
    assert backward(gx, [y])[0] == 1.0


def _tiny_net_loss(w1, w2, x=0.7, target=0.2):
    h = tp.tanh(w1 * x)
    out = w2 * h
    d = out - target
    return d * d


def test_second_order_tiny_network_vs_fd():
    def first_grad(a, b):
        t = Tape()
        w1, w2 = t.constant(a), t.constant(b)
        return backward(_tiny_net_loss(w1, w2), [w1])[0]

    t = Tape()
    w1, w2 = t.constant(0.4), t.constant(-1.1)
    (g,) = backward_as_graph(_tiny_net_loss(w1, w2), [w1])
    d11, d12 = backward(g, [w1, w2])
    fd11 = central_diff(lambda a: first_grad(a, -1.1), 0.4)
    fd12 = central_diff(lambda b: first_grad(0.4, b), -1.1)
    assert abs(d11 - fd11) <= 1e-5 * abs(fd11)
    assert abs(d12 - fd12) <= 1e-5 * abs(fd12)


def test_graph_mode_grows_tape():
    t = Tape()
    x = t.constant(0.3)
    f = tp.cos(x) * x
    n = len(t)
    backward_as_graph(f, [x])
    assert len(t) > n


# -- tensor ops ----------------------------------------------------------------

def test_tensor_ops_gradients_match_fd():
    rng = np.random.default_rng(3)
    A0 = rng.normal(size=(2, 3, 4))
    B0 = rng.normal(size=(4, 2))
    c0 = rng.normal(size=(2,))

    def f(A, B, c):
        M = tp.matmul(A, B) + c
        M = tp.concat([M, tp.sin(M[:, :1, :])], axis=1)
        s = tp.stack([M, M * M], axis=-1).sum(axis=(1, 3))
        return (tp.tanh(s) * tp.exp(tp.reshape(s, (4,)) / 10.0).reshape((2, 2))).sum()

    t = Tape()
    A, B, c = t.constant(A0), t.constant(B0), t.constant(c0)
    grads = backward(f(A, B, c), [A, B, c])
    for arr, g, which in ((A0, grads[0], 0), (B0, grads[1], 1), (c0, grads[2], 2)):
        for idx in np.ndindex(arr.shape):
            def shifted(h):
                args = [A0.copy(), B0.copy(), c0.copy()]
                args[which][idx] += h
                return float(f(*args))
            fd = (shifted(1e-6) - shifted(-1e-6)) / 2e-6
            assert close(g[idx], fd, 1e-5)


def test_advanced_index_scatter_accumulates():
    t = Tape()
    x = t.constant(np.arange(4.0))
    y = x[np.array([0, 0, 2])]
    g = backward(y.sum(), [x])[0]
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0, 0.0])


# -- solve ---------------------------------------------------------------------

def test_solve_identity():
    b = np.array([1 + 0j, 0 + 2j])
    x = solve_on_tape(np.eye(2, dtype=complex), b)
    np.testing.assert_allclose(x.value, b, atol=0)


def test_solve_diag():
    x = solve_on_tape(np.diag([2.0, 4.0]).astype(complex), np.array([2.0, 4.0], dtype=complex))
    np.testing.assert_allclose(x.value, [1.0, 1.0])


def _hpd(rng, n):
    Z = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return Z @ Z.conj().T + 0.1 * np.eye(n)


def test_solve_random_hpd_residual_and_gradient():
    rng = np.random.default_rng(11)
    A = _hpd(rng, 3)
    b = rng.normal(size=3) + 1j * rng.normal(size=3)

    t = Tape()
    Ar, Ai = t.constant(A.real), t.constant(A.imag)
    x = solve_on_tape(ComplexVar(Ar, Ai), b)
    assert np.linalg.norm(A @ x.value - b) < 1e-10
    objective = x.abs2().sum() + x.re[0]
    gr, gi = backward(objective, [Ar, Ai])

    def f(Am):
        xs = np.linalg.solve(Am, b)
        return float(np.sum(np.abs(xs) ** 2) + xs[0].real)

    for (i, j) in [(0, 0), (0, 1), (2, 1)]:
        E = np.zeros((3, 3))
        E[i, j] = 1.0
        fd_r = (f(A + 1e-6 * E) - f(A - 1e-6 * E)) / 2e-6
        fd_i = (f(A + 1e-6j * E) - f(A - 1e-6j * E)) / 2e-6
        assert close(gr[i, j], fd_r, 1e-5)
        assert close(gi[i, j], fd_i, 1e-5)


def test_solve_needs_pivoting_and_batches():
    A = np.array([[[0, 1], [1, 0]], [[2, 0], [0, 3]]], dtype=complex)
    b = np.array([[1, 2], [4, 9]], dtype=complex)
    x = solve_on_tape(A, b)
    np.testing.assert_allclose(x.value, [[2, 1], [2, 3]])


def test_solve_singular():
    with pytest.raises(SingularMatrix):
        solve_on_tape(np.zeros((2, 2), complex), np.ones(2, complex))


def test_solve_second_order_through_tape():
    # d^2/da^2 of 1/a for the 1x1 system a x = 1, at a = 2: 2/a^3
    t = Tape()
    a = t.constant(np.array([[2.0]]))
    x = solve_on_tape(ComplexVar(a, np.zeros((1, 1))), np.array([1.0 + 0j]))
    (g,) = backward_as_graph(x.re.sum(), [a])
    assert np.isclose(backward(g.sum(), [a])[0][0, 0], 2 / 8)


# -- properties ----------------------------------------------------------------

def composite(x, y):
    return (tp.sin(x) * tp.exp(y / 3.0) + tp.tanh(x * y) + tp.sqrt(x * x + 1.0)
            + tp.log(y * y + 2.0) + (x - y) / (y * y + 1.5) + (x * x + 0.5) ** 1.5)


finite = st.floats(-3.0, 3.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(finite, finite)
def test_backward_matches_fd_property(x0, y0):
    t = Tape()
    x, y = t.constant(x0), t.constant(y0)
    gx, gy = backward(composite(x, y), [x, y])
    hx = 1e-6 * max(1.0, abs(x0))
    hy = 1e-6 * max(1.0, abs(y0))
    fdx = (float(composite(x0 + hx, y0)) - float(composite(x0 - hx, y0))) / (2 * hx)
    fdy = (float(composite(x0, y0 + hy)) - float(composite(x0, y0 - hy))) / (2 * hy)
    assert close(gx, fdx, 1e-5)
    assert close(gy, fdy, 1e-5)


@settings(max_examples=40, deadline=None)
@given(finite, finite)
def test_double_backward_matches_fd_of_backward(x0, y0):
    def grad_x(a, b):
        t = Tape()
        x, y = t.constant(a), t.constant(b)
        return float(backward(composite(x, y), [x])[0])

    t = Tape()
    x, y = t.constant(x0), t.constant(y0)
    f = composite(x, y)
    n = len(t)
    (gx,) = backward_as_graph(f, [x])
    assert len(t) > n
    hxx, hxy = backward(gx, [x, y])
    h = 1e-5 * max(1.0, abs(x0))
    fd_xx = (grad_x(x0 + h, y0) - grad_x(x0 - h, y0)) / (2 * h)
    hy = 1e-5 * max(1.0, abs(y0))
    fd_xy = (grad_x(x0, y0 + hy) - grad_x(x0, y0 - hy)) / (2 * hy)
    assert close(hxx, fd_xx, 1e-4)
    assert close(hxy, fd_xy, 1e-4)


@settings(max_examples=20, deadline=None)
@given(finite, finite)
def test_replay_is_bit_exact(x0, y0):
    t = Tape()
    x, y = t.constant(x0), t.constant(y0)
    backward_as_graph(composite(x, y), [x, y])
    replayed = t.replay()
    for node, v in zip(t.nodes, replayed):
        assert np.array_equal(node.value, v)
