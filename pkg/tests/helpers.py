"""Shared builders for the test suite."""

import numpy as np

from deepfbsde.generators import RiskNeutral
from deepfbsde.instruments import Instrument, call_spread_combo
from deepfbsde.nn import NetworkSpec
from deepfbsde.paths import InitialStateSpec, ModelSpec, build_uniform_grid
from deepfbsde.rng import RandomStream
from deepfbsde.solver import DeepBSDESolver, MethodSpec, Problem

RATE, VOL, T, SPOT = 0.06, 0.2, 0.5, 120.0


def make_solver(direction="forward", random=False, steps=50, shared=False, width=11,
                batchnorm=(), instrument=None, generator=None, seed=1, center=SPOT,
                **method_kw):
    grid = build_uniform_grid(0.0, T, steps)
    model = ModelSpec.black_scholes(RATE, VOL)
    init = InitialStateSpec.uniform(70.0, 170.0) if random else InitialStateSpec.fixed(SPOT)
    inst = instrument or Instrument(call_spread_combo(), T)
    gen = generator or RiskNeutral(RATE)
    problem = Problem(grid, model, init, inst, gen, MethodSpec(direction, **method_kw))
    hidden = (width, width)
    if shared:
        pi = NetworkSpec.dense((2,) + hidden + (1,), center=(T / 2, center), halfwidth=(T / 2, 50.0),
                               batchnorm=batchnorm)
    else:
        pi = NetworkSpec.dense((1,) + hidden + (1,), center=center, halfwidth=50.0,
                               batchnorm=batchnorm)
    yinit = None
    if random:
        yinit = NetworkSpec.dense((1,) + hidden + (1,), center=center, halfwidth=50.0,
                                  batchnorm=batchnorm)
    return DeepBSDESolver(problem, pi, yinit, shared=shared, seed=seed)


def perturb(solver, scale=0.3, seed=5):
    """Move parameters off their initial values so no component is trivially zero."""
    solver.params.flat[:] += RandomStream(seed).normal(solver.params.size) * scale
    solver.params.bump()


def fd_gradient(solver, paths, h=1e-4, mode="batch"):
    """Fourth-order central differences of the rollout loss."""
    theta = solver.params.flat
    fd = np.zeros(theta.size)
    for k in range(theta.size):
        orig = theta[k]
        vals = []
        for step in (-2, -1, 1, 2):
            theta[k] = orig + step * h
            solver.params.bump()
            vals.append(solver.rollout(paths, mode, grad=False).loss)
        theta[k] = orig
        solver.params.bump()
        fd[k] = (vals[0] - 8.0 * vals[1] + 8.0 * vals[2] - vals[3]) / (12.0 * h)
    return fd


def gradient_check(solver, paths, mode="batch", floor=1e-6):
    """Compare the analytic gradient with finite differences.

    Returns ``(rel_err, small_err)``.  ``rel_err`` is the largest componentwise
    relative error over components with ``|g| > floor * max|g|``.  Smaller
    components (structural zeros such as a bias feeding a batch-normalized
    layer, or near-degenerate ones such as first-layer weights under a fixed
    start) sit below what differencing resolves in double precision; for
    those ``small_err`` is the largest ``|g - fd| / max|g|``.
    """
    g = solver.rollout(paths, mode, grad=True).grad
    fd = fd_gradient(solver, paths, mode=mode)
    scale = np.abs(g).max()
    big = np.abs(g) > floor * scale
    rel = np.abs(g - fd)[big] / np.abs(fd)[big]
    small = np.abs(g - fd)[~big].max() / scale if (~big).any() else 0.0
    return float(rel.max()), float(small)
