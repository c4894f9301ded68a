import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff, rel_err
from spdyn import diffcore as dc
from spdyn.errors import ContractError, NonFiniteGradientError, ShapeError


def grad_of(fn, *values):
    tape = dc.Tape()
    xs = [tape.var(v) for v in values]
    out = fn(*xs)
    return float(out.value), tape.gradient(out, xs)


# --------------------------------------------------------------------------
# forward

def test_zero_net_tanh_gives_zero():
    net = dc.DenseNet.init([3, 4, 2], ["tanh", "tanh"], np.random.default_rng(0), scale=0.0)
    assert np.array_equal(net.forward(np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_layer():
    net = dc.DenseNet([dc.Layer(np.eye(2), np.zeros(2), "identity")])
    assert np.array_equal(net.forward(np.array([1.0, 2.0])), [1.0, 2.0])


def test_forward_reproducible():
    outs = []
    for _ in range(2):
        net = dc.DenseNet.init([5, 7, 7, 3], ["tanh", "relu", "identity"], np.random.default_rng(42))
        outs.append(net.forward(np.linspace(-1, 1, 5)))
    assert np.array_equal(outs[0], outs[1])


def test_forward_batch_matches_rows():
    rng = np.random.default_rng(1)
    net = dc.DenseNet.init([4, 6, 2], ["tanh", "identity"], rng)
    X = rng.normal(size=(5, 4))
    batch = net.forward(X)
    for i in range(5):
        np.testing.assert_allclose(batch[i], net.forward(X[i]), rtol=0, atol=1e-15)


def test_forward_shape_error():
    net = dc.DenseNet.init([3, 2], ["identity"], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net.forward(np.ones(4))


def test_layer_dims_checked():
    with pytest.raises(ShapeError):
        dc.DenseNet([dc.Layer(np.ones((3, 2)), np.zeros(3), "tanh"),
                     dc.Layer(np.ones((1, 4)), np.zeros(1), "identity")])


def test_bad_activation():
    with pytest.raises(ContractError):
        dc.Layer(np.ones((1, 1)), np.zeros(1), "sigmoid")


def test_flat_roundtrip():
    net = dc.DenseNet.init([3, 4, 2], ["tanh", "identity"], np.random.default_rng(3))
    flat = net.get_flat()
    other = net.copy()
    other.set_flat(np.zeros_like(flat))
    other.set_flat(flat)
    assert np.array_equal(other.get_flat(), flat)
    assert flat.size == net.n_params == 3 * 4 + 4 + 4 * 2 + 2


# --------------------------------------------------------------------------
# gradients

def test_square_gradient():
    v, (g,) = grad_of(lambda x: dc.square(x), 3.0)
    assert v == 9.0 and g == 6.0


def test_constant_output_zero_gradient():
    tape = dc.Tape()
    x = tape.var(np.ones(3))
    y = tape.var(2.0)
    out = dc.mul(y, 5.0)
    (g,) = tape.gradient(out, [x])
    assert np.array_equal(g, np.zeros(3))


def test_non_scalar_output_rejected():
    tape = dc.Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ContractError):
        tape.gradient(dc.mul(x, 2.0), [x])


def test_relu_gradient_at_zero_is_zero():
    _, (g,) = grad_of(lambda x: dc.vsum(dc.relu(x)), np.array([0.0, 1.0, -1.0]))
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_broadcast_gradient_reduces():
    _, (ga, gb) = grad_of(lambda a, b: dc.vsum(dc.mul(a, b)), np.ones((3, 2)), np.array([2.0, 5.0]))
    assert np.array_equal(ga, np.tile([2.0, 5.0], (3, 1)))
    assert np.array_equal(gb, [3.0, 3.0])


def test_densenet_loss_matches_finite_differences():
    rng = np.random.default_rng(7)
    net = dc.DenseNet.init([4, 6, 5, 3], ["tanh", "tanh", "identity"], rng)
    X = rng.normal(size=(8, 4))
    Y = rng.normal(size=(8, 3))

    def loss(flat, tape=None):
        n = net.copy()
        n.set_flat(flat)
        return float(dc.vsum(dc.square(dc.sub(n.forward(X), Y))))

    tape = dc.Tape()
    leaves = net.leaves(tape)
    out = dc.vsum(dc.square(dc.sub(net.forward(X, leaves), Y)))
    g = dc.flat_gradient(out, [v for pair in leaves for v in pair])
    fd = central_diff(loss, net.get_flat(), h=1e-5)
    assert rel_err(g, fd) < 1e-5


def test_gradients_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=5)
    results = [grad_of(lambda a: dc.vsum(dc.tanh(dc.mul(a, a))), x)[1][0] for _ in range(2)]
    assert np.array_equal(results[0], results[1])


UNARY = {
    "exp": (dc.exp, lambda x: x),
    "log": (dc.log, lambda x: np.abs(x) + 0.5),
    "tanh": (dc.tanh, lambda x: x),
    "relu": (dc.relu, lambda x: np.where(np.abs(x) < 1e-3, x + 0.01, x)),
    "sqrt": (dc.sqrt, lambda x: np.abs(x) + 0.5),
    "sinh": (dc.sinh, lambda x: x),
    "cosh": (dc.cosh, lambda x: x),
    "sin": (dc.sin, lambda x: x),
    "cos": (dc.cos, lambda x: x),
    "square": (dc.square, lambda x: x),
    "neg": (dc.neg, lambda x: x),
}

BINARY = {
    "add": (dc.add, lambda x: x),
    "sub": (dc.sub, lambda x: x),
    "mul": (dc.mul, lambda x: x),
    "div": (dc.div, lambda x: np.where(np.abs(x) < 0.5, np.sign(x) + (x == 0) + x, x)),
}

finite = arrays(np.float64, 4, elements=st.floats(-2, 2))


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=finite)
def test_unary_primitive_matches_fd(name, x):
    op, domain = UNARY[name]
    x = domain(x)
    w = np.arange(1.0, 5.0)
    _, (g,) = grad_of(lambda a: dc.vsum(dc.mul(op(a), w)), x)
    fd = central_diff(lambda v: float(np.sum(op(v) * w)), x, h=1e-6)
    assert rel_err(g, fd, floor=1e-4) < 1e-5


@pytest.mark.parametrize("name", sorted(BINARY))
@given(x=finite, y=finite)
def test_binary_primitive_matches_fd(name, x, y):
    op, domain = BINARY[name]
    y = domain(y)
    _, (gx, gy) = grad_of(lambda a, b: dc.vsum(op(a, b)), x, y)
    fdx = central_diff(lambda v: float(np.sum(op(v, y))), x, h=1e-6)
    fdy = central_diff(lambda v: float(np.sum(op(x, v))), y, h=1e-6)
    assert rel_err(gx, fdx, floor=1e-4) < 1e-5
    assert rel_err(gy, fdy, floor=1e-4) < 1e-5


@given(m=arrays(np.float64, (3, 4), elements=st.floats(-2, 2)),
       v=arrays(np.float64, 4, elements=st.floats(-2, 2)))
def test_matvec_and_dot_match_fd(m, v):
    w = np.array([1.0, -2.0, 0.5])
    _, (gm, gv) = grad_of(lambda a, b: dc.dot(dc.matvec(a, b), w), m, v)
    fdm = central_diff(lambda x: float((x @ v) @ w), m, h=1e-6)
    fdv = central_diff(lambda x: float((m @ x) @ w), v, h=1e-6)
    assert rel_err(gm, fdm, floor=1e-4) < 1e-5
    assert rel_err(gv, fdv, floor=1e-4) < 1e-5


@given(x=arrays(np.float64, 6, elements=st.floats(-50, 50)))
def test_activation_ranges(x):
    t = dc.tanh(x)
    assert np.all(np.abs(t) <= 1.0)
    assert np.all(np.abs(t[np.abs(x) < 15]) < 1.0)
    assert np.all(dc.relu(x) >= 0)


def test_where_masks_gradient():
    mask = np.array([True, False, True])
    _, (ga, gb) = grad_of(lambda a, b: dc.vsum(dc.where(mask, a, b)), np.ones(3), np.ones(3))
    assert np.array_equal(ga, [1, 0, 1]) and np.array_equal(gb, [0, 1, 0])


def test_getitem_and_stack_gradients():
    x = np.arange(4.0)
    _, (g,) = grad_of(lambda a: dc.vsum(dc.stack([dc.getitem(a, 1), dc.getitem(a, 1),
                                                   dc.getitem(a, 3)])), x)
    assert np.array_equal(g, [0, 2, 0, 1])


# --------------------------------------------------------------------------
# Adam

def test_adam_zero_grad_keeps_params():
    p = np.array([1.0, -2.0])
    st_ = dc.AdamState.fresh(2, lr=0.1)
    new, _ = dc.adam_step(st_, p, np.zeros(2))
    assert np.array_equal(new, p)


def test_adam_zero_lr_keeps_params():
    p = np.array([1.0, -2.0])
    new, state = dc.adam_step(dc.AdamState.fresh(2, lr=0.0), p, np.array([3.0, -1.0]))
    assert np.array_equal(new, p) and state.step == 1


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.2, 1e-3])
    new, _ = dc.adam_step(dc.AdamState.fresh(3, lr=0.01, eps=0.0), np.zeros(3), g)
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-12)


def test_adam_hand_two_steps():
    b1, b2, lr, eps = 0.9, 0.999, 0.1, 1e-8
    g1, g2 = 2.0, -1.0
    m = (1 - b1) * g1
    v = (1 - b2) * g1 ** 2
    x = 1.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 ** 2
    x = x - lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
    state = dc.AdamState.fresh(1, lr=lr)
    p, state = dc.adam_step(state, np.array([1.0]), np.array([g1]))
    p, state = dc.adam_step(state, p, np.array([g2]))
    assert p[0] == pytest.approx(x, rel=1e-14) and state.step == 2


def test_adam_rejects_nonfinite():
    with pytest.raises(NonFiniteGradientError):
        dc.adam_step(dc.AdamState.fresh(2), np.zeros(2), np.array([1.0, np.nan]))


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        dc.adam_step(dc.AdamState.fresh(2), np.zeros(2), np.zeros(3))


def test_adam_minimizes_quadratic():
    state = dc.AdamState.fresh(2, lr=0.05)
    p = np.array([3.0, -4.0])
    for _ in range(2000):
        p, state = dc.adam_step(state, p, 2 * p)
    assert np.all(np.abs(p) < 1e-2)
