"""Payoffs, knock-out barriers and exercise opportunities.

Payoffs are callables ``payoff(x_T, x_0=None)`` over arrays of shape
``(..., dim)`` returning ``(...)``.  Only the barrier-as-European payoff
looks at ``x_0``; the plain ones ignore it.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class Call:
    strike: float
    index: int = 0

    def __post_init__(self):
        if not self.strike > 0:
            raise ConfigError(f"strike must be positive, got {self.strike}")

    def __call__(self, x, x0=None):
        return np.maximum(np.asarray(x)[..., self.index] - self.strike, 0.0)


@dataclass(frozen=True)
class Put:
    strike: float
    index: int = 0

    def __post_init__(self):
        if not self.strike > 0:
            raise ConfigError(f"strike must be positive, got {self.strike}")

    def __call__(self, x, x0=None):
        return np.maximum(self.strike - np.asarray(x)[..., self.index], 0.0)


@dataclass(frozen=True)
class Combo:
    """Weighted sum of vanilla legs, e.g. ``Combo(((1, Call(120)), (-2, Call(150))))``."""

    legs: tuple

    def __post_init__(self):
        if not self.legs:
            raise ConfigError("combo needs at least one leg")

    def __call__(self, x, x0=None):
        return sum(w * leg(x) for w, leg in self.legs)


@dataclass(frozen=True)
class Constant:
    value: float = 0.0

    def __call__(self, x, x0=None):
        return np.full(np.shape(x)[:-1], float(self.value))


def european_payoff(spec, x_T):
    return spec(x_T)


def call_spread_combo(long_strike=120.0, short_strike=150.0, short_weight=2.0):
    """Long one call, short ``short_weight`` calls (the default sign-changing delta book)."""
    return Combo(((1.0, Call(long_strike)), (-short_weight, Call(short_strike))))


# ---------------------------------------------------------------------------
# barriers


def zero_rebate(t, x):
    return np.zeros(np.shape(x)[:-1])


@dataclass(frozen=True)
class BarrierSpec:
    """Up-and-out barrier on component ``index``; breach means ``x >= level``.

    ``rebate(t, x)`` is the value received on knock-out.  With
    ``rebate_at="hit"`` it is paid when the barrier is touched; with
    ``"maturity"`` the solver discounts it back from maturity.
    """

    level: float
    rebate: Callable = zero_rebate
    index: int = 0
    direction: str = "up"
    style: str = "knock_out"
    rebate_at: str = "hit"

    def __post_init__(self):
        if not self.level > 0:
            raise ConfigError("barrier level must be positive")
        if self.direction != "up" or self.style != "knock_out":
            raise ConfigError("only up-and-out barriers are supported")
        if self.rebate_at not in ("hit", "maturity"):
            raise ConfigError(f"rebate_at must be 'hit' or 'maturity', got {self.rebate_at!r}")


def in_barrier_indicator(t, x, spec):
    return (np.asarray(x)[..., spec.index] >= spec.level).astype(float)


@dataclass(frozen=True)
class BarrierMonitorState:
    """Per-path breach record.

    ``t_B``, ``X_B``, ``Y_B`` hold the values at the first breach, or the
    latest observation for paths not yet breached.  ``step`` is the grid
    index of the last update (``-1`` before the first).
    """

    breached: np.ndarray
    stop_index: np.ndarray
    t_B: np.ndarray
    X_B: np.ndarray
    Y_B: np.ndarray
    step: int = -1

    @classmethod
    def start(cls, batch, dim):
        return cls(
            breached=np.zeros(batch, dtype=bool),
            stop_index=np.zeros(batch, dtype=int),
            t_B=np.zeros(batch),
            X_B=np.zeros((batch, dim)),
            Y_B=np.zeros(batch),
        )


def update_barrier_monitor(state, i, t_i, x_i, y_i, spec):
    """Observe grid index ``i``; must be called for ``i = 0, 1, 2, ...`` in order."""
    if i != state.step + 1:
        raise UsageError(f"barrier monitor expected step {state.step + 1}, got {i}")
    hit = in_barrier_indicator(t_i, x_i, spec).astype(bool)
    live = ~state.breached
    breached = state.breached | hit
    # live paths keep tracking the latest point, so unbreached paths end at maturity
    t_B = np.where(live, t_i, state.t_B)
    X_B = np.where(live[:, None], x_i, state.X_B)
    Y_B = np.where(live, y_i, state.Y_B)
    stop = np.where(live, i, state.stop_index)
    return BarrierMonitorState(breached, stop, t_B, X_B, Y_B, i)


def bridge_breach_probability(x0, xT, level, vol, T):
    """Probability that a GBM bridge from ``x0`` to ``xT`` over ``T`` touched ``level``.

    Uses the log-space Brownian-bridge maximum distribution
    ``exp(-2 ln(B/x0) ln(B/xT) / (vol^2 T))``; 1 when either endpoint is at
    or above the level.
    """
    x0 = np.asarray(x0, dtype=float)
    xT = np.asarray(xT, dtype=float)
    if np.any(x0 <= 0) or np.any(xT <= 0) or level <= 0 or vol <= 0 or T <= 0:
        raise ValueError("bridge breach probability needs positive inputs")
    if math.isinf(level):
        return np.zeros(np.broadcast(x0, xT).shape)
    below = (x0 < level) & (xT < level)
    a = np.log(level / np.where(below, x0, 1.0))
    b = np.log(level / np.where(below, xT, 1.0))
    p = np.exp(-2.0 * a * b / (vol * vol * T))
    return np.where(below, p, 1.0)


@dataclass(frozen=True)
class BarrierAsEuropean:
    """European payoff equal in time-0 value to a continuously monitored knock-out.

    Below the level the terminal value mixes the no-breach payoff and the
    rebate by the bridge breach probability; at or above it is the rebate.
    Requires ``x_0`` (the valuation-time state, assumed not yet breached).
    """

    no_breach: Callable
    level: float
    vol: float
    maturity: float
    rebate: Callable = Constant(0.0)
    index: int = 0
    pbreach: Callable | None = None

    def breach_probability(self, x_T, x_0):
        if self.pbreach is not None:
            return self.pbreach(x_T, x_0)
        return bridge_breach_probability(
            x_0[..., self.index], x_T[..., self.index], self.level, self.vol, self.maturity
        )

    def __call__(self, x_T, x_0=None):
        if x_0 is None:
            raise UsageError("barrier-as-European payoff needs the initial state")
        x_T = np.asarray(x_T, dtype=float)
        x_0 = np.broadcast_to(np.asarray(x_0, dtype=float), x_T.shape)
        return barrier_equivalent_european(
            self.no_breach(x_T), self.rebate(x_T), self.breach_probability(x_T, x_0),
            x_T[..., self.index] >= self.level,
        )


def barrier_equivalent_european(g_nb, g_b, pbreach, beyond=None):
    """Mix no-breach and breach payoffs; ``beyond`` marks terminal states past the barrier."""
    g = g_nb * (1.0 - pbreach) + g_b * pbreach
    if beyond is not None:
        g = np.where(beyond, g_b, g)
    return g


# ---------------------------------------------------------------------------
# exercise


@dataclass(frozen=True)
class ExerciseSpec:
    """Exercise opportunities at ``times`` into ``value(x)``.

    ``strategy`` selects the rule:

    * ``"holding_value"`` - exercise when ``value(x) > holding_value(t, x)``
    * ``"given"`` - exercise when ``rule(t, x)`` is true
    * ``"clairvoyant"`` - exercise when ``value(x)`` beats the rolled-back
      portfolio value; not adapted, needs ``allow_clairvoyant=True``
    """

    times: tuple
    value: Callable
    strategy: str = "holding_value"
    holding_value: Callable | None = None
    rule: Callable | None = None
    allow_clairvoyant: bool = False
    maturity: float | None = field(default=None)

    def __post_init__(self):
        if not self.times:
            raise ConfigError("exercise spec needs at least one exercise time")
        if self.maturity is not None and max(self.times) >= self.maturity:
            raise ConfigError("exercise times must precede maturity")
        if self.strategy == "holding_value" and self.holding_value is None:
            raise ConfigError("holding_value strategy needs a holding value function")
        if self.strategy == "given" and self.rule is None:
            raise ConfigError("given strategy needs an exercise rule")
        if self.strategy == "clairvoyant" and not self.allow_clairvoyant:
            raise ConfigError(
                "clairvoyant exercise looks into the future; set allow_clairvoyant to use it"
            )
        if self.strategy not in ("holding_value", "given", "clairvoyant"):
            raise ConfigError(f"unknown exercise strategy {self.strategy!r}")

    @property
    def adapted(self):
        return self.strategy != "clairvoyant"


def exercise_decision(spec, t, x, holding_value=None, y_rolled=None):
    """Boolean exercise mask at exercise time ``t`` for states ``x``.

    ``holding_value`` overrides ``spec.holding_value(t, x)`` when given.
    """
    g = spec.value(x)
    if spec.strategy == "holding_value":
        hv = spec.holding_value(t, x) if holding_value is None else holding_value
        return g > hv
    if spec.strategy == "given":
        return np.asarray(spec.rule(t, x), dtype=bool)
    if not spec.allow_clairvoyant:
        raise ConfigError("clairvoyant exercise requires allow_clairvoyant")
    if y_rolled is None:
        raise UsageError("clairvoyant exercise needs the rolled-back portfolio value")
    warnings.warn(
        "clairvoyant exercise uses future information and gives noisy, "
        "foresight-biased values",
        stacklevel=2,
    )
    return g > y_rolled


@dataclass(frozen=True)
class Instrument:
    """What the solver prices: a terminal payoff plus optional barrier and exercise."""

    payoff: Callable
    maturity: float
    barrier: BarrierSpec | None = None
    exercise: ExerciseSpec | None = None
