"""Gradient-descent updates on flat parameter vectors.

The step functions are pure; the optimizer classes keep the state and
update a parameter vector in place.
"""

import numpy as np

from .errors import ConfigError


def sgd_step(theta, g, lr):
    return theta - lr * g


def momentum_step(theta, delta_prev, g, lr, mom):
    """``delta = mom * delta_prev - lr * g``; ``theta + delta``."""
    delta = mom * delta_prev - lr * g
    return theta + delta, delta


def adam_step(state, theta, g):
    """One Adam update; returns ``(new_state, new_theta)``.

    ``state`` is a dict with ``m``, ``v`` and the step counter ``n``.
    """
    n = state["n"] + 1
    b1, b2 = state["beta1"], state["beta2"]
    m = b1 * state["m"] + (1.0 - b1) * g
    v = b2 * state["v"] + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**n)
    v_hat = v / (1.0 - b2**n)
    theta = theta - state["lr"] * m_hat / (np.sqrt(v_hat) + state["eps"])
    return dict(state, m=m, v=v, n=n), theta


def _clip(g, clip):
    if clip is None:
        return g
    norm = np.linalg.norm(g)
    return g * (clip / norm) if norm > clip else g


class SGD:
    def __init__(self, size, lr=1e-3, clip=None):
        if not lr > 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.clip = clip
        self.n = 0

    def step(self, theta, g):
        theta[...] = sgd_step(theta, _clip(g, self.clip), self.lr)
        self.n += 1

    def state_arrays(self):
        return {"opt.n": np.array([self.n], dtype=float)}

    def load_state_arrays(self, arrays):
        self.n = int(arrays["opt.n"][0])


class Momentum:
    def __init__(self, size, lr=1e-3, momentum=0.9, clip=None):
        if not lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 <= momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.delta = np.zeros(size)
        self.n = 0

    def step(self, theta, g):
        new, self.delta = momentum_step(theta, self.delta, _clip(g, self.clip), self.lr,
                                        self.momentum)
        theta[...] = new
        self.n += 1

    def state_arrays(self):
        return {"opt.n": np.array([self.n], dtype=float), "opt.delta": self.delta}

    def load_state_arrays(self, arrays):
        self.n = int(arrays["opt.n"][0])
        self.delta = arrays["opt.delta"].copy()


class Adam:
    """Adam with in-place moment buffers (same arithmetic as :func:`adam_step`)."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip=None):
        if not lr > 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("Adam decay rates must lie in [0, 1)")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip = clip
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.n = 0

    def step(self, theta, g):
        g = _clip(g, self.clip)
        self.n += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.n)
        v_hat = self.v / (1.0 - self.beta2**self.n)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        return {"opt.n": np.array([self.n], dtype=float), "opt.m": self.m, "opt.v": self.v}

    def load_state_arrays(self, arrays):
        self.n = int(arrays["opt.n"][0])
        self.m = arrays["opt.m"].copy()
        self.v = arrays["opt.v"].copy()


def make_optimizer(kind, size, **kw):
    kinds = {"sgd": SGD, "momentum": Momentum, "adam": Adam}
    if kind not in kinds:
        raise ConfigError(f"unknown optimizer {kind!r}")
    return kinds[kind](size, **kw)
