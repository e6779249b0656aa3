import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from occufield import autodiff as ad
from occufield.exceptions import NumericError
from occufield.field import AnalyticField, ConstantField, PlaneRampField
from occufield.loss import (
    LossWeights,
    gan_softplus,
    generator_loss,
    normal_term,
    normal_regularizer,
    opacity_regularizer,
    origin_loss,
    r1_penalty,
    random_offsets,
    reconstruction_loss,
    total_loss,
)


def test_gan_softplus_values():
    assert float(gan_softplus(0.0)) == pytest.approx(-math.log(2.0), abs=1e-15)
    assert float(gan_softplus(50.0)) > -1e-20
    assert float(gan_softplus(50.0)) < 0.0
    # -log(1 + e^50) = -50 - log1p(e^-50)
    assert float(gan_softplus(-50.0)) == pytest.approx(-50.0 - math.log1p(math.exp(-50.0)), abs=1e-9)
    assert np.isfinite(gan_softplus(-1e4))


def test_gan_softplus_shape_properties():
    u = np.linspace(-30, 30, 6001)
    f = gan_softplus(u)
    assert np.all(np.diff(f) > 0)
    assert np.all(np.diff(f, 2) <= 1e-13)
    nz = u[u != 0]
    assert np.all(gan_softplus(nz) + gan_softplus(-nz) < 0)


def test_origin_and_generator_losses():
    assert float(origin_loss([0.0], [0.0])) == pytest.approx(-2 * math.log(2.0))
    assert float(origin_loss([1.0, 2.0], [0.5], r1=0.25)) == pytest.approx(
        np.mean(gan_softplus(np.array([1.0, 2.0]))) + float(gan_softplus(-0.5)) + 0.25)
    assert float(generator_loss([0.0])) == pytest.approx(math.log(2.0))


def test_r1_linear_stub(rng):
    w = rng.standard_normal(6)
    assert r1_penalty(lambda x: ad.sum(x * w), np.zeros(6), lam=10.0) == pytest.approx(10.0 * w @ w, rel=1e-14)


def test_r1_constant_stub():
    assert r1_penalty(lambda x: 3.0, np.ones(4)) == 0.0


def test_r1_quadratic_stub(rng):
    i0 = rng.standard_normal((2, 3))
    assert r1_penalty(lambda x: 0.5 * ad.sum(x * x), i0, lam=2.0) == pytest.approx(2.0 * np.sum(i0 ** 2), rel=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_r1_non_finite_raises():
    with pytest.raises(NumericError):
        r1_penalty(lambda x: ad.sum(ad.log(x)), np.zeros(2))


def test_normal_term_zero_on_plane(rng):
    plane = PlaneRampField(slope=(0.3, -0.2, 2.0), offset=0.1)
    pts = rng.uniform(-0.1, 0.1, (50, 3))
    assert abs(normal_regularizer(plane, pts, rng=rng)) <= 1e-9


def test_normal_term_sphere_chord_bound(rng):
    sphere = AnalyticField.sphere(radius=1.0, sharpness=10.0)
    u = rng.standard_normal((300, 3))
    pts = u / np.linalg.norm(u, axis=1, keepdims=True)
    offs = random_offsets(rng, 300)
    assert np.allclose(np.linalg.norm(offs, axis=1), 0.01)
    # the normal at x + eps turns by at most asin(0.01) from the one at x
    bound = 2.0 * math.sin(math.asin(0.01) / 2.0)
    assert bound == pytest.approx(2.0 * math.sin(0.005), abs=1e-6)
    for p, e in zip(pts, offs):
        val = normal_regularizer(sphere, p[None, :], offsets=e[None, :])
        assert val <= bound + 1e-12


def test_normal_term_empty_and_degenerate():
    sphere = AnalyticField.sphere(radius=1.0, sharpness=10.0)
    assert normal_regularizer(sphere, np.zeros((0, 3))) == 0.0
    term = normal_term(ConstantField(0.4), np.zeros((5, 3)))
    assert term.value == 0.0 and term.used == 0 and term.skipped == 5


def test_opacity_examples():
    assert float(opacity_regularizer(np.full(8, 0.5))) == pytest.approx(2 * math.log(0.5), abs=1e-12)
    # ln(0.01) + ln(0.99) = -4.605170 - 0.010050
    assert float(opacity_regularizer([0.01])) == pytest.approx(-4.615221, abs=1e-6)
    v = float(opacity_regularizer([0.0]))
    assert np.isfinite(v) and v == pytest.approx(math.log(1e-7), abs=1e-6)
    assert float(opacity_regularizer([1.0])) == pytest.approx(math.log(1e-7), abs=1e-6)


@given(a=arrays(np.float64, (9,), elements=st.floats(0.0, 1.0)))
def test_opacity_is_symmetric_and_peaks_at_half(a):
    assert float(opacity_regularizer(a)) == pytest.approx(float(opacity_regularizer(1.0 - a)), abs=1e-9)
    assert float(opacity_regularizer(a)) <= 2 * math.log(0.5) + 1e-12


def test_lambda_schedule_examples():
    w = LossWeights(0.002, 0.1, 4.0e-5)
    assert w.lambda_opacity(0) == 0.1
    n = math.log(100.0) / 4e-5
    assert n == pytest.approx(115_129.25, abs=0.01)
    assert w.lambda_opacity(math.ceil(n)) == 10.0
    assert w.lambda_opacity(10**12) == 10.0
    assert w.lambda_opacity(50_000) == pytest.approx(0.1 * math.exp(2.0))
    with pytest.raises(ValueError):
        w.lambda_opacity(-1)


@given(n1=st.integers(0, 10**7), n2=st.integers(0, 10**7),
       init=st.floats(0.0, 5.0), gamma=st.floats(0.0, 1e-3))
def test_lambda_schedule_monotone_and_capped(n1, n2, init, gamma):
    w = LossWeights(0.0, init, gamma)
    lo, hi = sorted((n1, n2))
    assert w.lambda_opacity(lo) <= w.lambda_opacity(hi) <= 10.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_normal=-1.0)
    with pytest.raises(ValueError):
        LossWeights(gamma_opac=float("nan"))


def test_total_loss():
    zero = LossWeights(0.0, 0.0, 0.0)
    assert total_loss(1.5, 3.0, -2.0, zero, 100) == 1.5
    w = LossWeights(0.5, 0.1, 0.0)
    assert total_loss(1.0, 2.0, -1.0, w, 7) == pytest.approx(1.0 + 1.0 - 0.1)


def test_reconstruction_examples():
    img = np.random.default_rng(0).random((4, 4, 3))
    assert reconstruction_loss(img, img) == 0.0
    assert reconstruction_loss(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == 1.0
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)[..., None].repeat(3, axis=2)
    assert reconstruction_loss(board, 1.0 - board) == 1.0
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_reconstruction_on_tape_matches_plain(rng):
    a, b = rng.random((3, 3, 3)), rng.random((3, 3, 3))
    tape = ad.Tape()
    v = tape.parameter(a)
    loss = reconstruction_loss(v, b)
    assert float(ad.value_of(loss)) == pytest.approx(reconstruction_loss(a, b), rel=1e-15)
    g = tape.backward(loss)[0]
    assert np.allclose(g, 2 * (a - b) / a.size)
