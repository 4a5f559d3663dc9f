"""Time grids, initial states, Brownian increments and Euler-Maruyama paths.

Arrays follow the layout ``states[b, i, j]`` (path, grid index, component)
and ``increments[b, i, k]`` (path, step, Brownian component).
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, SimulationError


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ConfigError("time grid needs at least 2 points")
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) <= 0):
            raise ConfigError("time grid must be finite and strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def dt(self):
        return np.diff(self.times)

    def step(self, i):
        return self.times[i + 1] - self.times[i]

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def maturity(self):
        return float(self.times[-1])

    def index_of(self, t, tol=1e-12):
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise ConfigError(f"time {t} is not on the grid")
        return i


def build_uniform_grid(t0, T, n):
    if n < 1 or int(n) != n:
        raise ConfigError(f"number of steps must be a positive integer, got {n}")
    if not T > t0:
        raise ConfigError(f"maturity {T} must exceed start time {t0}")
    return TimeGrid(np.linspace(t0, T, int(n) + 1))


def _constant(value):
    return lambda t, *args: value


@dataclass(frozen=True)
class ModelSpec:
    """Risk-factor dynamics ``dX = mu dt + sigma_N dW`` with ``sigma_N = sigma_LN * x``.

    ``drift(t, x)`` maps ``(..., dim)`` to ``(..., dim)``; ``lognormal_vol(t, x)``
    returns an array broadcastable to ``(..., dim, dim)`` whose row ``j``
    loads component ``j`` on the Brownian factors.  ``short_rate(t)`` is the
    deterministic bank-account rate.
    """

    dim: int
    drift: Callable
    lognormal_vol: Callable
    short_rate: Callable
    # (t, dt, x, dW) -> x_next, exact-in-law stepping for oracle runs only
    exact_step: Callable | None = field(default=None, compare=False)
    name: str = "custom"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("model dimension must be >= 1")

    def normal_vol(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.lognormal_vol(t, x)) * x[..., :, None]

    @classmethod
    def black_scholes(cls, rate, vol, dim=1):
        """Risk-neutral GBM, ``mu = r x``, ``sigma_N = vol * x`` (uncorrelated)."""
        if vol < 0:
            raise ConfigError("volatility must be non-negative")
        sig = np.eye(dim) * float(vol)
        r = float(rate)

        def exact(t, dt, x, dW):
            return x * np.exp((r - 0.5 * vol**2) * dt + vol * dW)

        return cls(
            dim=dim,
            drift=lambda t, x: r * x,
            lognormal_vol=lambda t, x: sig,
            short_rate=_constant(r),
            exact_step=exact,
            name="black_scholes",
        )


@dataclass(frozen=True)
class InitialStateSpec:
    """Either a fixed start ``x0`` or i.i.d. uniforms on the box ``[lo, hi]``."""

    mode: str
    x0: tuple = ()
    lo: tuple = ()
    hi: tuple = ()

    def __post_init__(self):
        if self.mode == "fixed":
            if not self.x0 or not np.all(np.isfinite(self.x0)):
                raise ConfigError("fixed initial state needs finite values")
        elif self.mode == "uniform":
            if len(self.lo) != len(self.hi) or not self.lo:
                raise ConfigError("uniform box bounds must have matching non-empty length")
            if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
                raise ConfigError(f"uniform box has lo > hi: {self.lo} > {self.hi}")
        else:
            raise ConfigError(f"unknown initial state mode {self.mode!r}")

    @classmethod
    def fixed(cls, x0):
        return cls("fixed", x0=tuple(np.atleast_1d(np.asarray(x0, dtype=float)).tolist()))

    @classmethod
    def uniform(cls, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        return cls("uniform", lo=tuple(lo.tolist()), hi=tuple(hi.tolist()))

    @property
    def dim(self):
        return len(self.x0) if self.mode == "fixed" else len(self.lo)

    @property
    def center(self):
        if self.mode == "fixed":
            return np.asarray(self.x0)
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def is_random(self):
        return self.mode == "uniform"


def sample_initial_states(spec, batch, rng):
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    if spec.mode == "fixed":
        return np.tile(np.asarray(spec.x0, dtype=float), (batch, 1))
    lo = np.asarray(spec.lo, dtype=float)
    hi = np.asarray(spec.hi, dtype=float)
    u = rng.uniform(0.0, 1.0, size=(batch, lo.size))
    return lo + (hi - lo) * u


def simulate_increments(grid, batch, dim, rng):
    z = rng.normal(size=(batch, grid.n_steps, dim))
    return z * np.sqrt(grid.dt)[None, :, None]


def euler_step(x, t, dt, dW, model):
    """One Euler-Maruyama step ``x + mu dt + sigma_N dW``."""
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(dW)) and np.isfinite(dt)):
        raise SimulationError(f"non-finite input to Euler step at t={t}")
    x_next = _euler_raw(x, t, dt, dW, model)
    if not np.all(np.isfinite(x_next)):
        raise SimulationError(f"Euler step produced non-finite state at t={t}")
    return x_next


def _euler_raw(x, t, dt, dW, model):
    sig = model.normal_vol(t, x)
    if sig.shape[-1] == 1 and sig.shape[-2] == 1:
        noise = sig[..., 0] * dW
    else:
        noise = np.einsum("...jk,...k->...j", sig, dW)
    return x + model.drift(t, x) * dt + noise


@dataclass(frozen=True)
class PathBatch:
    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        b, n1, d = self.states.shape
        if n1 != self.times.size or self.increments.shape[:2] != (b, n1 - 1):
            raise SimulationError(
                f"inconsistent path shapes {self.states.shape} / {self.increments.shape}"
            )

    @property
    def batch(self):
        return self.states.shape[0]

    @property
    def n_steps(self):
        return self.times.size - 1


def simulate_paths(grid, model, init_spec, batch, rng, scheme="euler"):
    """Simulate ``batch`` paths on ``grid``.

    ``scheme="exact"`` uses the model's exact-in-law step and exists for
    oracle runs; training always uses ``"euler"``.
    """
    if init_spec.dim != model.dim:
        raise ConfigError("initial state dimension does not match model")
    x0 = sample_initial_states(init_spec, batch, rng.child(0))
    dW = simulate_increments(grid, batch, model.dim, rng.child(1))
    X = np.empty((batch, grid.n_steps + 1, model.dim))
    X[:, 0] = x0
    if scheme == "exact":
        if model.exact_step is None:
            raise ConfigError("model has no exact stepping scheme")
        for i in range(grid.n_steps):
            X[:, i + 1] = model.exact_step(grid.times[i], grid.step(i), X[:, i], dW[:, i])
    elif scheme == "euler":
        # unchecked steps; one finiteness check over the whole batch below
        for i in range(grid.n_steps):
            X[:, i + 1] = _euler_raw(X[:, i], grid.times[i], grid.step(i), dW[:, i], model)
    else:
        raise ConfigError(f"unknown stepping scheme {scheme!r}")
    if not np.all(np.isfinite(X)):
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=(0, 2)))[0])
        raise SimulationError(f"path simulation produced non-finite state at t={grid.times[bad]}")
    return PathBatch(grid.times, X, dW)
