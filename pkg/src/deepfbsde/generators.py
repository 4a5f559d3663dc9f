"""BSDE generators, discrete drift terms, transaction costs and backward steps.

One time step of the portfolio value reads::

    Y[i+1] = drift_term(t_i, dt_i, X_i, Y_i, Pi_i) + Pi_i . (sigma dW_i) - cost(Pi_i -> Pi_{i+1})

``drift_term`` is the deterministic part, ``Y - f dt`` for the Euler form of
a generator ``f``.  In the self-financing formulation the same map comes from
accruing the cash account ``pi_0 = Y - sum(Pi)`` and the risky positions;
the discrete drift written as ``Y - f_dt`` therefore has
``f_dt = Y - drift_term + cost``.

The backward step inverts the deterministic map: given
``R = Y[i+1] - Pi . (sigma dW) + cost`` it returns the ``y`` with
``drift_term(y) = R``, which is the relation ``y - f(y) dt = R``.

Shapes: ``x`` and ``pi`` are ``(B, dim)``, ``y`` and ``R`` are ``(B,)``.
Each ``*_partials`` method returns derivatives for the adjoint pass.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

ROOT_TOL = 1e-12


def _rate(value):
    if callable(value):
        return value
    v = float(value)
    return lambda t: v


class Generator:
    costs = None

    def f(self, t, x, y, pi):
        raise NotImplementedError

    def f_partials(self, t, x, y, pi):
        """``(df/dy, df/dpi)`` with shapes ``(B,)`` and ``(B, dim)``."""
        raise NotImplementedError

    def drift_term(self, t, dt, x, y, pi):
        return y - self.f(t, x, y, pi) * dt

    def drift_partials(self, t, dt, x, y, pi):
        fy, fpi = self.f_partials(t, x, y, pi)
        return 1.0 - fy * dt, -fpi * dt

    def backward_exact(self, t, dt, x, pi, R):
        raise NotImplementedError

    def backward_exact_partials(self, t, dt, x, pi, R, y):
        """``(dy/dR, dy/dpi)`` at the solution ``y``; implicit-function rule."""
        dy, dpi = self.drift_partials(t, dt, x, y, pi)
        return 1.0 / dy, -dpi / dy[..., None]

    def backward_taylor(self, t, dt, x, pi, R):
        return R + self.f(t, x, R, pi) * dt

    def backward_taylor_partials(self, t, dt, x, pi, R, y=None):
        fy, fpi = self.f_partials(t, x, R, pi)
        return 1.0 + fy * dt, fpi * dt

    def _check_root(self, t, dt, x, pi, R, y):
        resid = np.abs(self.drift_term(t, dt, x, y, pi) - R)
        scale = np.maximum(1.0, np.abs(R))
        bad = ~(resid <= ROOT_TOL * scale)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise NumericalError(
                f"{type(self).__name__} backward step: residual {resid[k]:.3e} "
                f"at t={t}, dt={dt}, R={R[k]!r}, y={y[k]!r}"
            )


@dataclass(frozen=True)
class RiskNeutral(Generator):
    """``f = -r(t) Y``."""

    rate: object = 0.0
    costs: object = None

    def f(self, t, x, y, pi):
        return -_rate(self.rate)(t) * y

    def f_partials(self, t, x, y, pi):
        r = _rate(self.rate)(t)
        return np.full(np.shape(y), -r), np.zeros(np.shape(pi))

    def drift_term(self, t, dt, x, y, pi):
        return (1.0 + _rate(self.rate)(t) * dt) * y

    def backward_exact(self, t, dt, x, pi, R):
        growth = 1.0 + _rate(self.rate)(t) * dt
        if not growth > 0:
            raise NumericalError(f"no unique backward root: 1 + r dt = {growth} at t={t}")
        return R / growth


@dataclass(frozen=True)
class NumeraireZero(Generator):
    """Zero generator: values measured in units of the numeraire."""

    costs: object = None

    def f(self, t, x, y, pi):
        return np.zeros(np.shape(y))

    def f_partials(self, t, x, y, pi):
        return np.zeros(np.shape(y)), np.zeros(np.shape(pi))

    def drift_term(self, t, dt, x, y, pi):
        return np.array(y, dtype=float, copy=True)

    def backward_exact(self, t, dt, x, pi, R):
        return np.array(R, dtype=float, copy=True)


@dataclass(frozen=True)
class DifferentialRates(Generator):
    """Lending at ``rate_lend``, borrowing at ``rate_borrow``, underliers growing at ``rate``.

    ``rate`` defaults to ``rate_lend``, in which case
    ``f = -r_l Y + (r_b - r_l) (sum(Pi) - Y)^+``.
    """

    rate_lend: object
    rate_borrow: object
    rate: object = None
    costs: object = None

    def __post_init__(self):
        if callable(self.rate_lend) or callable(self.rate_borrow):
            return
        if self.rate_borrow < self.rate_lend:
            raise ConfigError("borrowing rate must be at least the lending rate")

    def _rates(self, t):
        r_l = _rate(self.rate_lend)(t)
        r_b = _rate(self.rate_borrow)(t)
        r = r_l if self.rate is None else _rate(self.rate)(t)
        return r, r_l, r_b

    def _cash_rate(self, t, y, pi):
        _, r_l, r_b = self._rates(t)
        cash = y - pi.sum(axis=-1)
        return np.where(cash >= 0, r_l, r_b)

    def f(self, t, x, y, pi):
        r, _, _ = self._rates(t)
        s = pi.sum(axis=-1)
        return -r * s - self._cash_rate(t, y, pi) * (y - s)

    def f_partials(self, t, x, y, pi):
        r, _, _ = self._rates(t)
        rc = self._cash_rate(t, y, pi)
        return -rc, np.broadcast_to((rc - r)[..., None], np.shape(pi)).copy()

    def drift_term(self, t, dt, x, y, pi):
        r, _, _ = self._rates(t)
        s = pi.sum(axis=-1)
        cash = y - s
        return y + dt * (r * s + self._cash_rate(t, y, pi) * cash)

    def backward_exact(self, t, dt, x, pi, R):
        r, r_l, r_b = self._rates(t)
        if not (1.0 + r_l * dt > 0 and 1.0 + r_b * dt > 0):
            raise NumericalError(f"no unique backward root at t={t}, dt={dt}")
        s = pi.sum(axis=-1)
        # drift_term is continuous and strictly increasing in y, so exactly one
        # branch is self-consistent
        y_lend = (R - dt * (r - r_l) * s) / (1.0 + r_l * dt)
        y_borrow = (R - dt * (r - r_b) * s) / (1.0 + r_b * dt)
        y = np.where(y_lend >= s, y_lend, y_borrow)
        self._check_root(t, dt, x, pi, R, y)
        return y


@dataclass(frozen=True)
class LinearPDE(Generator):
    """``f = -V(t, x) Y + h(t, x)`` with user-supplied ``V`` and ``h``."""

    V: object
    h: object
    costs: object = None

    def f(self, t, x, y, pi):
        return -self.V(t, x) * y + self.h(t, x)

    def f_partials(self, t, x, y, pi):
        return -np.broadcast_to(self.V(t, x), np.shape(y)), np.zeros(np.shape(pi))

    def backward_exact(self, t, dt, x, pi, R):
        growth = 1.0 + self.V(t, x) * dt
        if np.any(growth <= 0):
            raise NumericalError(f"no unique backward root at t={t}, dt={dt}")
        return (R + self.h(t, x) * dt) / growth


# ---------------------------------------------------------------------------
# transaction costs


@dataclass(frozen=True)
class CostTerm:
    """Cost on one risky component: ``"value"``, ``"per_share"`` or ``"fixed"``."""

    form: str
    lam: float
    q: float = 2.0

    def __post_init__(self):
        if self.form not in ("value", "per_share", "fixed"):
            raise ConfigError(f"unknown transaction cost form {self.form!r}")
        if self.lam < 0:
            raise ConfigError("transaction cost coefficient must be >= 0")
        if self.form != "fixed" and not 1.0 < self.q <= 2.0:
            raise ConfigError(f"transaction cost exponent must lie in (1, 2], got {self.q}")


@dataclass(frozen=True)
class TransactionCosts:
    terms: tuple

    def _moves(self, pi_i, pi_next, x_i, x_next):
        out = []
        for j, term in enumerate(self.terms):
            if term.form == "per_share":
                out.append(pi_next[..., j] / x_next[..., j] - pi_i[..., j] / x_i[..., j])
            else:
                out.append(pi_next[..., j] - pi_i[..., j])
        return out

    def charge(self, pi_i, pi_next, x_i, x_next):
        total = np.zeros(np.shape(pi_i)[:-1])
        for j, (term, d) in enumerate(zip(self.terms, self._moves(pi_i, pi_next, x_i, x_next))):
            if term.form == "fixed":
                # exact comparison on stored values, no tolerance band
                total = total + term.lam * (pi_next[..., j] != pi_i[..., j])
            else:
                total = total + term.lam * np.abs(d) ** term.q
        return total

    def charge_partials(self, pi_i, pi_next, x_i, x_next):
        """``(d charge / d pi_i, d charge / d pi_next)``; the fixed commission has none."""
        g_i = np.zeros(np.shape(pi_i))
        g_next = np.zeros(np.shape(pi_next))
        for j, (term, d) in enumerate(zip(self.terms, self._moves(pi_i, pi_next, x_i, x_next))):
            if term.form == "fixed":
                continue
            dd = term.lam * term.q * np.abs(d) ** (term.q - 1.0) * np.sign(d)
            if term.form == "per_share":
                g_i[..., j] = -dd / x_i[..., j]
                g_next[..., j] = dd / x_next[..., j]
            else:
                g_i[..., j] = -dd
                g_next[..., j] = dd
        return g_i, g_next


# ---------------------------------------------------------------------------
# functional surface


def eval_generator(spec, t, x, y, pi):
    return spec.f(t, x, y, pi)


def discrete_drift_term(spec, t, dt, y, pi, x=None):
    if not dt > 0:
        raise ConfigError("time step must be positive")
    return spec.drift_term(t, dt, x, y, pi)


def transaction_cost_charge(costs, pi_i, pi_next, x_i, x_next):
    return costs.charge(pi_i, pi_next, x_i, x_next)


def backward_exact_step(spec, t, dt, x, pi, R):
    return spec.backward_exact(t, dt, x, pi, R)


def backward_taylor_step(spec, t, dt, x, pi, R):
    return spec.backward_taylor(t, dt, x, pi, R)
