"""Independent reference values: Black-Scholes closed forms, lognormal
quadrature and a plain Monte-Carlo pricer.

Nothing here imports the network, optimizer or solver code.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import erfc

from .errors import ConfigError
from .instruments import Call, Combo, Put, bridge_breach_probability, in_barrier_indicator
from .rng import RandomStream

SQRT2 = math.sqrt(2.0)


def norm_cdf(x):
    # erfc keeps full relative precision in the lower tail
    return 0.5 * erfc(-np.asarray(x, dtype=float) / SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BSParams:
    spot: object
    rate: float
    vol: float
    maturity: float
    strike: float | None = None


def _legs(kind, strike=None):
    if isinstance(kind, Combo):
        return list(kind.legs)
    if isinstance(kind, (Call, Put)):
        return [(1.0, kind)]
    if kind in ("call", "put"):
        if strike is None:
            raise ConfigError("vanilla pricing needs a strike")
        return [(1.0, Call(strike) if kind == "call" else Put(strike))]
    raise ConfigError(f"no closed form for {kind!r}")


def _vanilla(leg, p, greek):
    S = np.asarray(p.spot, dtype=float)
    K, r, vol, T = leg.strike, p.rate, p.vol, p.maturity
    df = math.exp(-r * T)
    is_call = isinstance(leg, Call)
    sd = vol * math.sqrt(T) if T > 0 else 0.0
    if sd == 0.0:
        fwd_gap = S - K * df
        if greek == "delta":
            if is_call:
                return (fwd_gap > 0).astype(float)
            return -(fwd_gap < 0).astype(float)
        return np.maximum(fwd_gap, 0.0) if is_call else np.maximum(-fwd_gap, 0.0)
    d1 = (np.log(S / K) + (r + 0.5 * vol * vol) * T) / sd
    d2 = d1 - sd
    if greek == "delta":
        return norm_cdf(d1) if is_call else norm_cdf(d1) - 1.0
    if is_call:
        return S * norm_cdf(d1) - K * df * norm_cdf(d2)
    return K * df * norm_cdf(-d2) - S * norm_cdf(-d1)


def bs_price(kind, p):
    """Closed-form price of a call, put or combo of them (legwise)."""
    return sum(w * _vanilla(leg, p, "price") for w, leg in _legs(kind, p.strike))


def bs_delta(kind, p):
    return sum(w * _vanilla(leg, p, "delta") for w, leg in _legs(kind, p.strike))


def lognormal_quadrature_price(payoff, spot, rate, vol, maturity, kinks=(), x0=None):
    """Discounted expectation of ``payoff`` under terminal GBM, by adaptive quadrature.

    ``kinks`` lists terminal levels where the payoff is not smooth; they are
    handed to the integrator as breakpoints.
    """
    mu = math.log(spot) + (rate - 0.5 * vol * vol) * maturity
    sd = vol * math.sqrt(maturity)
    x_start = np.array([spot if x0 is None else x0], dtype=float)

    def integrand(z):
        x = np.array([[math.exp(mu + sd * z)]])
        return float(payoff(x, x_start[None, :])[0]) * math.exp(-0.5 * z * z)

    lo, hi = -12.0, 12.0
    pts = sorted((math.log(k) - mu) / sd for k in kinks if k > 0)
    pts = [z for z in pts if lo < z < hi]
    edges = [lo] + pts + [hi]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(integrand, a, b, epsabs=1e-12, epsrel=1e-12, limit=200)
        total += val
    return math.exp(-rate * maturity) * total / math.sqrt(2.0 * math.pi)


def mc_reference_price(instrument, rate, vol, spot, paths, substeps, seed,
                       monitoring="discrete", chunk=1 << 15):
    """Discounted-payoff Monte Carlo under exact GBM stepping.

    Barriers are observed on the ``substeps`` grid (``monitoring="discrete"``)
    or continuously through a Brownian-bridge survival weight per substep
    (``"continuous"``; rebates must then be zero or paid at maturity).
    Exercise times must lie on the substep grid; an exercise rule given as
    ``instrument.exercise`` is applied with its own strategy (clairvoyant
    rules are not supported).

    Returns ``(price, standard_error)``.
    """
    if paths < 1e4:
        raise ConfigError("reference Monte Carlo needs at least 1e4 paths")
    if monitoring not in ("discrete", "continuous"):
        raise ConfigError(f"unknown monitoring {monitoring!r}")
    T = instrument.maturity
    dt = T / substeps
    times = np.linspace(0.0, T, substeps + 1)
    barrier = instrument.barrier
    ex = instrument.exercise
    ex_index = {}
    if ex is not None:
        if not ex.adapted:
            raise ConfigError("reference Monte Carlo needs an adapted exercise rule")
        for tE in ex.times:
            k = int(round(tE / dt))
            if abs(k * dt - tE) > 1e-9:
                raise ConfigError(f"exercise time {tE} is not on the substep grid")
            ex_index[k] = tE
    if barrier is not None and monitoring == "continuous":
        if ex is not None:
            raise ConfigError("continuous monitoring cannot be combined with exercise")
        knock_rebate = float(barrier.rebate(T, np.array([[barrier.level]]))[0])
        if barrier.rebate_at == "hit" and knock_rebate != 0:
            raise ConfigError("continuous monitoring supports zero or maturity-paid rebates")

    root = RandomStream(seed)
    drift = (rate - 0.5 * vol * vol) * dt
    sq = vol * math.sqrt(dt)
    sums = 0.0
    sumsq = 0.0
    done = 0
    c = 0
    while done < paths:
        n = min(chunk, paths - done)
        rng = root.child(c)
        x = np.full(n, float(spot))
        value = np.zeros(n)          # discounted cash already received
        alive = np.ones(n, dtype=bool)
        weight = np.ones(n)          # continuous-monitoring survival
        knocked_w = np.zeros(n)      # knocked-out mass (continuous monitoring)
        if barrier is not None and monitoring == "discrete":
            hit = in_barrier_indicator(0.0, x[:, None], barrier).astype(bool)
            value[hit] = _rebate_value(barrier, 0.0, x[hit], rate, T)
            alive &= ~hit
        for k in range(1, substeps + 1):
            z = rng.normal(size=n)
            x_new = x * np.exp(drift + sq * z)
            if barrier is not None:
                if monitoring == "discrete":
                    hit = alive & (x_new >= barrier.level)
                    value[hit] = _rebate_value(barrier, times[k], x_new[hit], rate, T)
                    alive &= ~hit
                else:
                    p_cross = bridge_breach_probability(x, x_new, barrier.level, vol, dt)
                    knocked_w += weight * p_cross
                    weight = weight * (1.0 - p_cross)
            x = x_new
            if k in ex_index:
                tE = ex_index[k]
                xe = x[:, None]
                g = ex.value(xe)
                if ex.strategy == "holding_value":
                    go = g > ex.holding_value(tE, xe)
                else:
                    go = np.asarray(ex.rule(tE, xe), dtype=bool)
                go &= alive
                value[go] = math.exp(-rate * tE) * g[go]
                alive &= ~go
        df = math.exp(-rate * T)
        g = instrument.payoff(x[:, None], np.full((n, 1), float(spot)))
        final = df * weight * g
        if barrier is not None and monitoring == "continuous":
            final += df * knock_rebate * knocked_w
        value[alive] += final[alive]
        sums += value.sum()
        sumsq += (value * value).sum()
        done += n
        c += 1
    mean = sums / paths
    var = max(sumsq / paths - mean * mean, 0.0)
    return mean, math.sqrt(var / paths) if paths > 1 else 0.0


def _rebate_value(barrier, t, x, rate, T):
    r = barrier.rebate(t, x[:, None])
    if barrier.rebate_at == "hit":
        return math.exp(-rate * t) * r
    return math.exp(-rate * T) * r
