import numpy as np
import pytest

from deepfbsde.errors import ConfigError
from deepfbsde.optim import (
    SGD,
    Adam,
    Momentum,
    adam_step,
    make_optimizer,
    momentum_step,
    sgd_step,
)


def test_sgd_zero_gradient():
    theta = np.array([1.0, -2.0])
    assert np.array_equal(sgd_step(theta, np.zeros(2), 0.1), theta)


def test_sgd_step_value():
    assert sgd_step(np.array([1.0]), np.array([2.0]), 0.1)[0] == pytest.approx(0.8, abs=1e-15)


def test_minibatch_gradient_is_mean():
    # quadratic per-sample loss (theta - a_k)^2: gradient of the mean loss = mean of gradients
    a = np.random.default_rng(0).normal(size=32)
    theta = 0.3
    per_sample = 2 * (theta - a)
    h = 1e-6
    fd = (np.mean((theta + h - a) ** 2) - np.mean((theta - h - a) ** 2)) / (2 * h)
    assert per_sample.mean() == pytest.approx(fd, rel=1e-8)


def test_momentum_zero_reduces_to_sgd():
    theta, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    new, _ = momentum_step(theta, np.array([3.0, 3.0]), g, 0.1, 0.0)
    assert np.array_equal(new, sgd_step(theta, g, 0.1))


def test_momentum_fixed_point():
    delta, theta, g = np.zeros(1), np.zeros(1), np.array([2.0])
    for _ in range(200):
        theta, delta = momentum_step(theta, delta, g, 0.01, 0.9)
    assert delta[0] == pytest.approx(-0.01 * 2.0 / 0.1, abs=1e-9)


def test_momentum_inertia():
    theta, delta = momentum_step(np.array([1.0]), np.array([0.5]), np.zeros(1), 0.1, 0.9)
    assert theta[0] == pytest.approx(1.45) and delta[0] == pytest.approx(0.45)


def adam_state(size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return dict(m=np.zeros(size), v=np.zeros(size), n=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def test_adam_first_step_is_sign():
    g = np.array([3.0, -0.02, 1e-3])
    _, theta = adam_step(adam_state(3), np.zeros(3), g)
    np.testing.assert_allclose(theta, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(np.abs(theta), 1e-3, rtol=1e-4)


def test_adam_zero_gradient():
    state, theta = adam_state(2), np.array([1.0, 2.0])
    for _ in range(10):
        state, theta = adam_step(state, theta, np.zeros(2))
    assert np.array_equal(theta, [1.0, 2.0])


def test_adam_scale_invariance():
    g = np.array([0.7, -0.1])
    _, a = adam_step(adam_state(2), np.zeros(2), g)
    _, b = adam_step(adam_state(2), np.zeros(2), 1000 * g)
    np.testing.assert_allclose(np.abs(b), 1e-3, rtol=1e-9)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_adam_without_averaging():
    g = np.array([0.4, -2.0])
    _, theta = adam_step(adam_state(2, beta1=0.0, beta2=0.0), np.zeros(2), g)
    np.testing.assert_allclose(theta, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-15)


def reference_adam(gs, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    theta = [0.0] * len(gs[0])
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for n, g in enumerate(gs, start=1):
        for k in range(len(theta)):
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k]
            mh = m[k] / (1 - b1**n)
            vh = v[k] / (1 - b2**n)
            theta[k] = theta[k] - lr * mh / (vh**0.5 + eps)
    return np.array(theta)


def reference_momentum(gs, lr, mom):
    theta = [0.0] * len(gs[0])
    delta = [0.0] * len(theta)
    for g in gs:
        for k in range(len(theta)):
            delta[k] = mom * delta[k] - lr * g[k]
            theta[k] = theta[k] + delta[k]
    return np.array(theta)


@pytest.fixture
def grads():
    return np.random.default_rng(11).normal(size=(300, 5)) * np.array([1e-3, 0.1, 1.0, 10.0, 1e3])


def test_adam_class_matches_reference(grads):
    opt, theta = Adam(5), np.zeros(5)
    state, theta_pure = adam_state(5), np.zeros(5)
    for g in grads:
        opt.step(theta, g)
        state, theta_pure = adam_step(state, theta_pure, g)
    ref = reference_adam(list(grads))
    np.testing.assert_allclose(theta, ref, rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(theta_pure, ref, rtol=1e-14, atol=1e-14)


def test_momentum_class_matches_reference(grads):
    opt, theta = Momentum(5, lr=1e-3, momentum=0.9), np.zeros(5)
    for g in grads:
        opt.step(theta, g)
    np.testing.assert_allclose(theta, reference_momentum(list(grads), 1e-3, 0.9), rtol=1e-14, atol=1e-14)


def test_sgd_class_matches_reference(grads):
    opt, theta = SGD(5, lr=0.01), np.zeros(5)
    for g in grads:
        opt.step(theta, g)
    ref = np.zeros(5)
    for g in grads:
        ref = ref - 0.01 * g
    np.testing.assert_allclose(theta, ref, rtol=1e-14, atol=1e-14)


def test_optimizer_state_round_trip(grads):
    a, ta = Adam(5), np.zeros(5)
    for g in grads[:50]:
        a.step(ta, g)
    b, tb = Adam(5), ta.copy()
    b.load_state_arrays({k: v.copy() for k, v in a.state_arrays().items()})
    for g in grads[50:]:
        a.step(ta, g)
        b.step(tb, g)
    assert np.array_equal(ta, tb)


def test_clipping():
    opt, theta = SGD(2, lr=1.0, clip=1.0), np.zeros(2)
    opt.step(theta, np.array([30.0, 40.0]))
    np.testing.assert_allclose(theta, [-0.6, -0.8])


def test_make_optimizer():
    assert isinstance(make_optimizer("adam", 3), Adam)
    with pytest.raises(ConfigError):
        make_optimizer("lbfgs", 3)
    with pytest.raises(ConfigError):
        Adam(3, lr=0.0)
    with pytest.raises(ConfigError):
        Momentum(3, momentum=1.0)
