import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from occufield import autodiff as ad
from occufield.exceptions import NumericError, TapeStateError

finite = st.floats(-3.0, 3.0, allow_nan=False)


def _scalar_grad(fn, x0):
    tape = ad.Tape()
    x = tape.parameter(np.float64(x0))
    return float(tape.backward(fn(x))[0])


def test_sin_at_zero():
    assert _scalar_grad(ad.sin, 0.0) == 1.0


def test_square_at_three():
    assert _scalar_grad(lambda x: x * x, 3.0) == 6.0


def test_identity_input_gradient():
    tape = ad.Tape()
    xs = [tape.variable(v) for v in (0.3, -0.1, 0.7)]
    g = ad.grad_wrt_input(tape, xs[0] + 0.0 * xs[1], xs)
    assert np.array_equal(g, [1.0, 0.0, 0.0])


def test_logistic_input_gradient():
    tape = ad.Tape()
    xs = [tape.variable(v) for v in (0.4, 1.0, -2.0)]
    g = ad.grad_wrt_input(tape, ad.logistic(xs[0]), xs)
    s = 1.0 / (1.0 + np.exp(-0.4))
    assert g[0] == pytest.approx(s * (1 - s), rel=1e-15)
    assert g[1] == 0.0 and g[2] == 0.0


PRIMITIVES = {
    "add": lambda x: x + 0.7 * x,
    "mul": lambda x: x * ad.sin(x),
    "sub": lambda x: 2.0 - x * x,
    "div": lambda x: ad.div(x, 2.5 + x * x),
    "sin": ad.sin,
    "cos": ad.cos,
    "exp": ad.exp,
    "logistic": ad.logistic,
    "softplus": ad.softplus,
    "leaky_relu": lambda x: ad.leaky_relu(x - 0.1),
    "square": ad.square,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@given(x0=finite)
def test_primitive_matches_central_difference(name, x0):
    fn = PRIMITIVES[name]
    if name == "leaky_relu" and abs(x0 - 0.1) < 1e-4:
        return
    h = 1e-6
    fd = (float(fn(np.float64(x0 + h))) - float(fn(np.float64(x0 - h)))) / (2 * h)
    g = _scalar_grad(fn, x0)
    assert abs(g - fd) <= 1e-6 * max(abs(g), abs(fd), 1.0)


def test_affine_matches_central_difference(rng):
    x0 = rng.standard_normal((4, 3))
    w0 = rng.standard_normal((2, 3))
    b0 = rng.standard_normal(2)
    weights = rng.standard_normal((4, 2))

    def f(x, w, b):
        return ad.sum(ad.sin(ad.affine(x, w, b)) * weights)

    tape = ad.Tape()
    gx, gw, gb = tape.backward(f(tape.parameter(x0), tape.parameter(w0), tape.parameter(b0)))
    h = 1e-6
    for base, grad, which in ((x0, gx, 0), (w0, gw, 1), (b0, gb, 2)):
        for idx in np.ndindex(base.shape):
            args = [x0, w0, b0]
            up, down = base.copy(), base.copy()
            up[idx] += h
            down[idx] -= h
            args[which] = up
            fu = float(f(*args))
            args[which] = down
            fd_ = float(f(*args))
            assert grad[idx] == pytest.approx((fu - fd_) / (2 * h), rel=1e-6, abs=1e-9)


@given(a=arrays(np.float64, (5,), elements=finite), b=arrays(np.float64, (5,), elements=finite))
def test_gradient_is_linear(a, b):
    def f(x):
        return ad.sum(ad.sin(x) * a)

    def g(x):
        return ad.sum(ad.logistic(x) * b)

    x0 = np.linspace(-1, 1, 5)
    grads = []
    for fn in (f, g, lambda x: f(x) + g(x)):
        tape = ad.Tape()
        grads.append(tape.backward(fn(tape.parameter(x0)))[0])
    assert np.allclose(grads[0] + grads[1], grads[2], rtol=1e-12, atol=1e-12)


def test_exclusive_cumprod_gradient(rng):
    a0 = rng.uniform(0.2, 0.9, (3, 5))
    wts = rng.standard_normal((3, 5))
    tape = ad.Tape()
    g = tape.backward(ad.sum(ad.exclusive_cumprod(tape.parameter(a0)) * wts))[0]
    h = 1e-6
    for idx in np.ndindex(a0.shape):
        up, down = a0.copy(), a0.copy()
        up[idx] += h
        down[idx] -= h
        fd = (np.sum(ad.exclusive_cumprod(up) * wts) - np.sum(ad.exclusive_cumprod(down) * wts)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_backward_twice_is_rejected():
    tape = ad.Tape()
    y = ad.sin(tape.parameter(1.0))
    tape.backward(y)
    with pytest.raises(TapeStateError):
        tape.backward(y)
    with pytest.raises(TapeStateError):
        tape.parameter(2.0)


def test_backward_needs_scalar():
    tape = ad.Tape()
    with pytest.raises(ValueError):
        tape.backward(ad.sin(tape.parameter(np.ones(3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_primal_raises():
    tape = ad.Tape()
    y = ad.log(tape.parameter(np.array([0.0])))
    with pytest.raises(NumericError):
        tape.backward(ad.sum(y))


def test_plain_arrays_short_circuit():
    x = np.array([0.1, 0.2])
    assert np.array_equal(ad.sin(x), np.sin(x))
    assert ad.value_of(x) is x


def test_sgd_step_examples():
    assert np.allclose(ad.sgd_step([1.0], [2.0], 0.1), [0.8])
    p = np.array([1.0, -2.0])
    assert np.array_equal(ad.sgd_step(p, np.zeros(2), 0.1), p)
    with pytest.raises(NumericError):
        ad.sgd_step(p, [np.nan, 0.0], 0.1)
    with pytest.raises(ValueError):
        ad.sgd_step(p, [0.0], 0.1)


def test_sgd_converges_on_quadratic():
    # minimise (x - 3)^2 from 0
    x = np.array([0.0])
    for step in range(200):
        tape = ad.Tape()
        v = tape.parameter(x)
        g = tape.backward(ad.sum((v - 3.0) * (v - 3.0)))[0]
        x = ad.sgd_step(x, g, 0.1)
    assert abs(x[0] - 3.0) < 1e-6
    assert step < 200


def test_adam_first_step_has_learning_rate_magnitude():
    opt = ad.Adam(0.01)
    out = opt.step(np.array([1.0, 1.0]), np.array([5.0, -0.01]))
    assert np.allclose(out, [0.99, 1.01], atol=1e-6)
    with pytest.raises(NumericError):
        opt.step(out, np.array([np.inf, 0.0]))


def test_momentum_sgd_converges():
    opt = ad.SGD(0.05, momentum=0.9)
    x = np.array([5.0])
    for _ in range(300):
        x = opt.step(x, 2 * (x - 1.0))
    assert abs(x[0] - 1.0) < 1e-6


def test_accumulate_gradients_sums_in_order():
    total = ad.accumulate_gradients([[np.ones(2)], [np.full(2, 2.0)], [np.full(2, 0.5)]])
    assert np.array_equal(total[0], [3.5, 3.5])


def test_network_tape_is_compact(tiny_net):
    tape = ad.Tape()
    net = tiny_net.network(np.zeros(4), tape)
    net.alpha(np.zeros((10, 3)))
    # one affine node per layer, independent of the number of weights
    assert len(tape) < 80
