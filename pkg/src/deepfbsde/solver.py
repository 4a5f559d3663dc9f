"""Deep-BSDE training engine.

Forward methods start ``Y`` from a trainable initial value (a scalar for a
fixed start, a network of ``X_0`` for a random start) and step it toward
maturity with the control networks; the loss is the squared replication
error at maturity, barrier breach or exercise.  Backward methods seed ``Y``
with the payoff and invert the one-step recursion down to ``t_0``; the loss
is the variance of the rolled-back ``Y_0`` (fixed start) or its squared
distance to an initial-value network (random start).

Controls are ``Pi_i = net_i(X_i)`` (or one shared ``net(t_i, X_i)``), i.e.
value invested per risky component.  Gradients are computed by a hand-written
adjoint pass through the ``Y`` recursion followed by the networks' own
reverse pass.  Barrier and exercise decisions are held constant within a
step (zero derivative).
"""

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._alloc import tune_allocator
from .errors import ConfigError, DivergenceError, UsageError
from .instruments import (
    BarrierMonitorState,
    exercise_decision,
    in_barrier_indicator,
    update_barrier_monitor,
)
from .nn import FeedForward, NetworkSpec, ParamCollection, save_checkpoint, spec_hash
from .optim import make_optimizer
from .paths import simulate_paths
from .rng import RandomStream


@dataclass(frozen=True)
class MethodSpec:
    direction: str = "forward"
    backward_step: str = "exact"
    control_units: str = "value"
    y0_init: float = 0.0

    def __post_init__(self):
        problems = []
        if self.direction not in ("forward", "backward"):
            problems.append(f"direction must be forward or backward, got {self.direction!r}")
        if self.backward_step not in ("exact", "taylor"):
            problems.append(f"backward_step must be exact or taylor, got {self.backward_step!r}")
        if self.control_units not in ("value", "units"):
            problems.append(f"control_units must be value or units, got {self.control_units!r}")
        if problems:
            raise ConfigError(problems)


class QuadraticControlCost:
    """Running cost ``weight * |Pi|^2`` (per year)."""

    def __init__(self, weight):
        self.weight = float(weight)

    def value(self, t, x, y, pi):
        return self.weight * (pi * pi).sum(axis=-1)

    def partials(self, t, x, y, pi):
        return np.zeros(np.shape(y)), 2.0 * self.weight * pi


@dataclass(frozen=True)
class Problem:
    grid: object
    model: object
    initial: object
    instrument: object
    generator: object
    method: MethodSpec = MethodSpec()
    running_cost: object = None

    def __post_init__(self):
        problems = []
        if abs(self.grid.maturity - self.instrument.maturity) > 1e-12:
            problems.append("instrument maturity must equal the last grid time")
        if self.initial.dim != self.model.dim:
            problems.append("initial state dimension does not match the model")
        ex = self.instrument.exercise
        if ex is not None:
            for tE in ex.times:
                try:
                    i = self.grid.index_of(tE)
                except ConfigError as err:
                    problems.extend(err.problems)
                    continue
                if i == 0 or i == self.grid.n_steps:
                    problems.append(f"exercise time {tE} must be strictly inside the grid")
            if not ex.adapted and self.method.direction == "forward":
                problems.append("clairvoyant exercise needs the backward method")
        if problems:
            raise ConfigError(problems)

    @property
    def random_start(self):
        return self.initial.is_random


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 512
    iterations: int = 20000
    val_every: int = 100
    val_batch: int | None = None
    seed: int = 0
    deterministic: bool = False
    eval_paths: int = 65536

    def __post_init__(self):
        problems = []
        if self.batch < 2:
            problems.append("training batch must be at least 2")
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if self.val_every < 1:
            problems.append("val_every must be >= 1")
        if problems:
            raise ConfigError(problems)


CSV_COLUMNS = ("iter", "train_loss", "val_loss", "price", "delta", "elapsed_s")


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    deterministic: bool = False

    def add(self, **rec):
        if self.records and rec["iter"] <= self.records[-1]["iter"]:
            raise UsageError("report iterations must increase")
        self.records.append(rec)

    def column(self, name):
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.records])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            row = []
            for c in CSV_COLUMNS:
                v = r.get(c)
                if c == "elapsed_s" and self.deterministic:
                    v = 0.0
                row.append("" if v is None else (str(v) if c == "iter" else repr(float(v))))
            w.writerow(row)
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class Rollout:
    loss: float
    y0: np.ndarray
    grad: np.ndarray | None = None
    terminal_gap: np.ndarray | None = None


class DeepBSDESolver:
    """Control networks, parameters and optimizer for one :class:`Problem`."""

    def __init__(self, problem, pi_spec, yinit_spec=None, shared=False, seed=0,
                 optimizer="adam", optimizer_kw=None):
        self.problem = problem
        self.shared = bool(shared)
        grid, d = problem.grid, problem.model.dim
        N = grid.n_steps
        in_dim = d + 1 if self.shared else d
        if pi_spec.sizes[0] != in_dim or pi_spec.sizes[-1] != d:
            raise ConfigError(
                f"control network must map {in_dim} inputs to {d} outputs, got {pi_spec.sizes}"
            )
        self.pi = FeedForward(pi_spec, n_stack=1 if self.shared else N, name="pi")
        layout = []
        self.fixed_forward = (not problem.random_start) and problem.method.direction == "forward"
        if self.fixed_forward:
            layout.append(("y0", (1,)))
        layout += self.pi.param_layout()
        self.yinit = None
        if problem.random_start:
            if yinit_spec is None:
                raise ConfigError("random initial states need an initial-value network")
            if yinit_spec.sizes[0] != d or yinit_spec.sizes[-1] != 1:
                raise ConfigError("initial-value network must map the state to one output")
            self.yinit = FeedForward(yinit_spec, n_stack=1, name="yinit")
            layout += self.yinit.param_layout()
        self.params = ParamCollection(layout)
        self.pi.bind(self.params)
        if self.yinit is not None:
            self.yinit.bind(self.params)
        init_rng = RandomStream(seed, (0,))
        self.pi.init_params(init_rng.child(0))
        if self.yinit is not None:
            self.yinit.init_params(init_rng.child(1))
        if self.fixed_forward:
            self.params.views()["y0"][0] = problem.method.y0_init
        self.optimizer = make_optimizer(optimizer, self.params.size, **(optimizer_kw or {}))
        self.iteration = 0
        self._cache_grid()

    # -- static per-grid quantities ------------------------------------------

    def _cache_grid(self):
        pb = self.problem
        times = pb.grid.times
        dts = pb.grid.dt
        rates = np.array([pb.model.short_rate(t) for t in times[:-1]])
        # discount factor from maturity back to t_i under the discrete accrual
        disc = np.ones(times.size)
        for i in range(times.size - 2, -1, -1):
            disc[i] = disc[i + 1] / (1.0 + rates[i] * dts[i])
        self._disc = disc
        ex = pb.instrument.exercise
        self._ex_index = {}
        if ex is not None:
            for tE in ex.times:
                self._ex_index[pb.grid.index_of(tE)] = tE

    def spec_record(self):
        pb = self.problem
        return {
            "pi": self.pi.spec.to_dict(),
            "pi_stack": self.pi.n_stack,
            "yinit": None if self.yinit is None else self.yinit.spec.to_dict(),
            "layout": self.params.shape_table(),
            "direction": pb.method.direction,
            "random_start": pb.random_start,
        }

    # -- network plumbing ----------------------------------------------------

    def _bn_mode(self, mode, net):
        if mode == "eval":
            return "infer" if net.bn_populated else "batch"
        return mode

    def _pi_inputs(self, Xs, times):
        if not self.shared:
            return Xs
        N, B, d = Xs.shape
        tcol = np.broadcast_to(times[:, None, None], (N, B, 1))
        return np.concatenate([tcol, Xs], axis=-1).reshape(1, N * B, d + 1)

    def controls(self, Xs, times, mode="train"):
        """Controls ``(N, B, d)`` for step states ``Xs`` of shape ``(N, B, d)``."""
        N, B, d = Xs.shape
        out, tape = self.pi.forward(self._pi_inputs(Xs, times), self._bn_mode(mode, self.pi))
        return out.reshape(N, B, d), tape

    def _controls_backward(self, tape, dP, grad):
        if self.shared:
            N, B, d = dP.shape
            dP = dP.reshape(1, N * B, d)
        self.pi.backward(tape, dP, grad)

    def initial_value(self, x, mode="eval"):
        """``Y_init(x)`` for states ``(B, d)``."""
        if self.yinit is None:
            raise UsageError("no initial-value network (fixed initial state)")
        x = np.asarray(x, dtype=float)
        net_mode = self._bn_mode(mode, self.yinit)
        if net_mode == "batch" and x.shape[0] < 2 and self.yinit.spec.batchnorm:
            # untrained batch-norm has no statistics to apply to a single point
            return np.full(x.shape[0], np.nan)
        out, _ = self.yinit.forward(x[None], net_mode)
        return out[0, :, 0]

    def control_at(self, step, x, mode="eval"):
        """Control of step ``step`` evaluated at states ``(B, d)``."""
        x = np.asarray(x, dtype=float)
        t = self.problem.grid.times[step]
        net_mode = self._bn_mode(mode, self.pi)
        if net_mode == "batch" and x.shape[0] < 2 and self.pi.spec.batchnorm:
            return np.full(x.shape, np.nan)
        if self.shared:
            inp = np.concatenate([np.full((x.shape[0], 1), t), x], axis=-1)[None]
            out, _ = self.pi.forward(inp, net_mode)
        else:
            out, _ = self.pi.forward(x[None], net_mode, stacks=slice(step, step + 1))
        return out[0]

    @property
    def y0(self):
        if not self.fixed_forward:
            raise UsageError("scalar Y0 exists only for the forward method with a fixed start")
        return float(self.params.views()["y0"][0])

    # -- rollouts ------------------------------------------------------------

    def _exposures(self, X, dW):
        """``sigma(t_i, X_i) dW_i`` per step, shape ``(N, B, d)``."""
        pb = self.problem
        times = pb.grid.times
        N = pb.grid.n_steps
        Z = np.empty((N, dW.shape[0], dW.shape[2]))
        for i in range(N):
            if pb.method.control_units == "value":
                sig = pb.model.lognormal_vol(times[i], X[:, i])
            else:
                sig = pb.model.normal_vol(times[i], X[:, i])
            sig = np.asarray(sig)
            if sig.shape[-2:] == (1, 1):
                Z[i] = sig[..., 0] * dW[:, i]
            else:
                Z[i] = np.einsum("...jk,...k->...j", sig, dW[:, i])
        return Z

    def _rebate(self, i, x):
        barrier = self.problem.instrument.barrier
        r = barrier.rebate(self.problem.grid.times[i], x)
        if barrier.rebate_at == "maturity":
            r = r * self._disc[i]
        return r

    def _holding_decision(self, i, x, y=None):
        ex = self.problem.instrument.exercise
        return exercise_decision(ex, self.problem.grid.times[i], x, y_rolled=y)

    def rollout(self, paths, mode="train", grad=True):
        """Loss (and gradient w.r.t. the flat parameters) on a path batch."""
        if self.problem.method.direction == "forward":
            return self._forward(paths, mode, grad)
        return self._backward(paths, mode, grad)

    def _forward(self, paths, mode, want_grad):
        pb = self.problem
        gen, grid, inst = pb.generator, pb.grid, pb.instrument
        times, dts = grid.times, grid.dt
        X, dW = paths.states, paths.increments
        B, N1, d = X.shape
        N = N1 - 1
        Xt = X.transpose(1, 0, 2)
        Z = self._exposures(X, dW)
        P, pi_tape = self.controls(Xt[:N], times[:N], mode)
        if self.fixed_forward:
            y0 = np.full(B, self.y0)
        else:
            yi_out, yi_tape = self.yinit.forward(X[None, :, 0], self._bn_mode(mode, self.yinit))
            y0 = yi_out[0, :, 0]

        costs = gen.costs
        Y = np.empty((N1, B))
        Y[0] = y0
        for i in range(N):
            y_next = gen.drift_term(times[i], dts[i], Xt[i], Y[i], P[i]) + (P[i] * Z[i]).sum(-1)
            if costs is not None and i < N - 1:
                y_next -= costs.charge(P[i], P[i + 1], Xt[i], Xt[i + 1])
            Y[i + 1] = y_next

        # first stopping event per path: barrier breach, exercise, or maturity
        stop = np.full(B, N)
        target = np.empty(B)
        alive = np.ones(B, dtype=bool)
        barrier = inst.barrier
        monitor = BarrierMonitorState.start(B, d) if barrier is not None else None
        for i in range(N1):
            if barrier is not None:
                monitor = update_barrier_monitor(monitor, i, times[i], Xt[i], Y[i], barrier)
                hit = alive & monitor.breached
                if hit.any():
                    stop[hit] = i
                    target[hit] = self._rebate(i, Xt[i][hit])
                    alive &= ~hit
            if i in self._ex_index:
                go = alive & self._holding_decision(i, Xt[i])
                if go.any():
                    stop[go] = i
                    target[go] = inst.exercise.value(Xt[i][go])
                    alive &= ~go
        if alive.any():
            target[alive] = inst.payoff(Xt[N][alive], Xt[0][alive])

        cols = np.arange(B)
        gap = Y[stop, cols] - target
        loss = float(np.mean(gap * gap))
        rc = pb.running_cost
        live = np.arange(N)[:, None] < stop[None, :]
        if rc is not None:
            for i in range(N):
                loss += float(np.mean(live[i] * rc.value(times[i], Xt[i], Y[i], P[i]) * dts[i]))

        out = Rollout(loss=loss, y0=y0, terminal_gap=gap)
        if not want_grad:
            return out

        aY = np.zeros((N1, B))
        aY[stop, cols] = 2.0 * gap / B
        aP = np.zeros_like(P)
        if rc is not None:
            for i in range(N):
                ry, rp = rc.partials(times[i], Xt[i], Y[i], P[i])
                w = live[i] * dts[i] / B
                aY[i] += w * ry
                aP[i] += w[:, None] * rp
        for i in range(N - 1, -1, -1):
            a = aY[i + 1]
            dy, dpi = gen.drift_partials(times[i], dts[i], Xt[i], Y[i], P[i])
            aY[i] += a * dy
            aP[i] += a[:, None] * (dpi + Z[i])
            if costs is not None and i < N - 1:
                gi, gn = costs.charge_partials(P[i], P[i + 1], Xt[i], Xt[i + 1])
                aP[i] -= a[:, None] * gi
                aP[i + 1] -= a[:, None] * gn

        g = self.params.zeros()
        if self.fixed_forward:
            self.params.views(g)["y0"][0] = aY[0].sum()
        else:
            self.yinit.backward(yi_tape, aY[0][None, :, None], g)
        self._controls_backward(pi_tape, aP, g)
        out.grad = g
        return out

    def _backward(self, paths, mode, want_grad):
        pb = self.problem
        gen, grid, inst = pb.generator, pb.grid, pb.instrument
        times, dts = grid.times, grid.dt
        X, dW = paths.states, paths.increments
        B, N1, d = X.shape
        N = N1 - 1
        Xt = X.transpose(1, 0, 2)
        Z = self._exposures(X, dW)
        P, pi_tape = self.controls(Xt[:N], times[:N], mode)
        step = gen.backward_exact if pb.method.backward_step == "exact" else gen.backward_taylor
        step_partials = (gen.backward_exact_partials if pb.method.backward_step == "exact"
                         else gen.backward_taylor_partials)
        costs = gen.costs
        barrier = inst.barrier

        Y = np.empty((N1, B))
        Y_pre = np.empty((N, B))
        R = np.empty((N, B))
        over = np.zeros((N1, B), dtype=bool)
        Y[N] = inst.payoff(Xt[N], Xt[0])
        if barrier is not None:
            ib = in_barrier_indicator(times[N], Xt[N], barrier).astype(bool)
            Y[N] = np.where(ib, self._rebate(N, Xt[N]), Y[N])
            over[N] = ib
        for i in range(N - 1, -1, -1):
            r = Y[i + 1] - (P[i] * Z[i]).sum(-1)
            if costs is not None and i < N - 1:
                r = r + costs.charge(P[i], P[i + 1], Xt[i], Xt[i + 1])
            R[i] = r
            y = step(times[i], dts[i], Xt[i], P[i], r)
            Y_pre[i] = y
            if barrier is not None:
                y, ow = apply_barrier_overwrite_backward(y, times[i], Xt[i], barrier,
                                                         self._rebate(i, Xt[i]))
                over[i] |= ow
            if i in self._ex_index:
                y, ow = apply_exercise_overwrite_backward(
                    y, times[i], Xt[i], inst.exercise)
                over[i] |= ow
            Y[i] = y

        y0 = Y[0]
        if pb.random_start:
            yi_out, yi_tape = self.yinit.forward(Xt[0][None], self._bn_mode(mode, self.yinit))
            gap = y0 - yi_out[0, :, 0]
            loss = float(np.mean(gap * gap))
            a0 = 2.0 * gap / B
        else:
            gap = y0 - y0.mean()
            loss = float(np.mean(gap * gap))
            a0 = 2.0 * gap / B

        rc = pb.running_cost
        # running cost accrues only before the first overwrite (knock-out/exercise)
        alive = np.cumsum(over[:N], axis=0) == 0
        if rc is not None:
            for i in range(N):
                loss += float(np.mean(alive[i] * rc.value(times[i], Xt[i], Y[i], P[i]) * dts[i]))

        out = Rollout(loss=loss, y0=y0, terminal_gap=gap)
        if not want_grad:
            return out

        aY = np.zeros((N1, B))
        aY[0] = a0
        aP = np.zeros_like(P)
        if rc is not None:
            for i in range(N):
                ry, rp = rc.partials(times[i], Xt[i], Y[i], P[i])
                w = alive[i] * dts[i] / B
                aY[i] += w * ry
                aP[i] += w[:, None] * rp
        for i in range(N):
            a = np.where(over[i], 0.0, aY[i])
            dR, dpi = step_partials(times[i], dts[i], Xt[i], P[i], R[i], Y_pre[i])
            aR = a * dR
            aP[i] += a[:, None] * dpi - aR[:, None] * Z[i]
            if costs is not None and i < N - 1:
                gi, gn = costs.charge_partials(P[i], P[i + 1], Xt[i], Xt[i + 1])
                aP[i] += aR[:, None] * gi
                aP[i + 1] += aR[:, None] * gn
            aY[i + 1] += aR

        g = self.params.zeros()
        if pb.random_start:
            self.yinit.backward(yi_tape, -a0[None, :, None], g)
        self._controls_backward(pi_tape, aP, g)
        out.grad = g
        return out

    # -- training ------------------------------------------------------------

    def sample(self, batch, rng):
        pb = self.problem
        return simulate_paths(pb.grid, pb.model, pb.initial, batch, rng)

    def reference_state(self):
        return np.asarray(self.problem.initial.center, dtype=float)

    def extract_price_delta(self, x=None, n_paths=65536, seed=0):
        """``(price, delta, outside_box)`` at state ``x`` (default: the start or box center).

        Delta is in units of the underlier: ``Pi / x`` for value-invested
        controls, ``Pi`` itself for unit controls.  For a backward run with a
        fixed start the price is the mean rolled-back ``Y_0`` over ``n_paths``.
        """
        pb = self.problem
        x = self.reference_state() if x is None else np.atleast_1d(np.asarray(x, dtype=float))
        outside = False
        for k in range(x.size):
            c, w = self.pi.spec.center[k + int(self.shared)], self.pi.spec.halfwidth[k + int(self.shared)]
            outside |= abs(x[k] - c) > w
        if pb.random_start:
            price = float(self.initial_value(x[None])[0])
        elif self.fixed_forward:
            price = self.y0
        else:
            price, _ = self.evaluate_backward_price(n_paths, seed)
        pi0 = self.control_at(0, x[None])[0]
        delta = pi0 / x if pb.method.control_units == "value" else pi0
        return price, (float(delta[0]) if delta.size == 1 else delta), outside

    def evaluate_backward_price(self, n_paths, seed, chunk=8192):
        """Mean and standard error of rolled-back ``Y_0`` in evaluation mode."""
        rng = RandomStream(seed, (7,))
        vals = []
        done = 0
        c = 0
        while done < n_paths:
            n = min(chunk, n_paths - done)
            paths = self.sample(n, rng.child(c))
            vals.append(self.rollout(paths, mode="eval", grad=False).y0)
            done += n
            c += 1
        y = np.concatenate(vals)
        return float(y.mean()), float(y.std() / math.sqrt(y.size))

    def validation_loss(self, rng, batch):
        return self.rollout(self.sample(batch, rng), mode="eval", grad=False).loss

    def _record_price(self):
        """Cheap per-iteration price/delta for the report."""
        pb = self.problem
        x = self.reference_state()
        if pb.random_start:
            price = float(self.initial_value(x[None])[0])
        elif self.fixed_forward:
            price = self.y0
        else:
            price = self._last_batch_price
        pi0 = self.control_at(0, x[None])[0]
        delta = pi0 / x if pb.method.control_units == "value" else pi0
        return price, float(delta[0])

    def checkpoint_blocks(self):
        blocks = {"theta": self.params.flat}
        blocks.update(self.pi.bn_arrays())
        if self.yinit is not None:
            blocks.update(self.yinit.bn_arrays())
        blocks.update(self.optimizer.state_arrays())
        return blocks

    def save(self, path):
        header = {
            "spec_hash": spec_hash(self.spec_record()),
            "layers": self.spec_record(),
            "counter": self.iteration,
            "bn_populated": {"pi": self.pi.bn_populated,
                             "yinit": None if self.yinit is None else self.yinit.bn_populated},
        }
        save_checkpoint(path, header, self.checkpoint_blocks())

    def load_blocks(self, header, blocks):
        if header["spec_hash"] != spec_hash(self.spec_record()):
            raise UsageError("checkpoint was written for a different network layout")
        self.params.flat[...] = blocks["theta"]
        self.params.bump()
        for net in (self.pi, self.yinit):
            if net is None:
                continue
            for name, arr in net.bn_arrays().items():
                arr[...] = blocks[name].reshape(arr.shape)
            for st in net.bn.values():
                st.populated = bool(header["bn_populated"][net.name])
        self.optimizer.load_state_arrays(blocks)
        self.iteration = int(header["counter"])

    def train(self, config, callback=None, last_good_path=None):
        """Run ``config.iterations`` optimizer steps on fresh mini-batches.

        Iteration 0 of the report carries only the initial validation loss.
        A non-finite training loss restores the last good parameters, writes
        them to ``last_good_path`` (if given) and raises
        :class:`DivergenceError`.
        """
        # overflow surfaces as a non-finite loss, which _train handles
        with np.errstate(over="ignore", invalid="ignore"):
            return self._train(config, callback, last_good_path)

    def _train(self, config, callback, last_good_path):
        tune_allocator()
        rng = RandomStream(config.seed, (1,))
        val_batch = config.val_batch or config.batch
        report = TrainReport(deterministic=config.deterministic)
        start = time.perf_counter()
        self._last_batch_price = float("nan")
        if not self.problem.random_start and not self.fixed_forward:
            # price for the backward fixed-start method is the mean rolled-back Y0
            self._last_batch_price = float(
                self.rollout(self.sample(config.batch, rng.child(3, 0)), "eval", False).y0.mean())
        val = self.validation_loss(rng.child(2, 0), val_batch)
        price, delta = self._record_price()
        report.add(iter=0, train_loss=None, val_loss=val, price=price, delta=delta,
                   elapsed_s=time.perf_counter() - start)
        good = self.params.flat.copy()
        for it in range(1, config.iterations + 1):
            paths = self.sample(config.batch, rng.child(1, it))
            res = self.rollout(paths, mode="train", grad=True)
            if not (math.isfinite(res.loss) and np.all(np.isfinite(res.grad))):
                self.params.flat[...] = good
                self.params.bump()
                if last_good_path is not None:
                    self.save(last_good_path)
                raise DivergenceError(
                    f"non-finite loss at iteration {it} (last finite loss "
                    f"{report.records[-1].get('train_loss')})",
                    iteration=it, checkpoint=last_good_path,
                )
            good[...] = self.params.flat
            if not self.problem.random_start and not self.fixed_forward:
                self._last_batch_price = float(res.y0.mean())
            self.optimizer.step(self.params.flat, res.grad)
            self.params.bump()
            self.iteration += 1
            val = None
            if it % config.val_every == 0:
                val = self.validation_loss(rng.child(2, it), val_batch)
            price, delta = self._record_price()
            rec = dict(iter=it, train_loss=res.loss, val_loss=val, price=price, delta=delta,
                       elapsed_s=time.perf_counter() - start)
            if not self.problem.random_start and not self.fixed_forward:
                rec["y0_std"] = float(res.y0.std())
            report.add(**rec)
            if callback is not None:
                callback(self, rec)
        return report


def apply_barrier_overwrite_backward(y, t, x, spec, rebate_value=None):
    """Replace ``y`` by the rebate where ``x`` is in the barrier region.

    Returns ``(y', overwritten_mask)``.
    """
    ib = in_barrier_indicator(t, x, spec).astype(bool)
    if rebate_value is None:
        rebate_value = spec.rebate(t, x)
    return np.where(ib, rebate_value, y), ib


def apply_exercise_overwrite_backward(y, t, x, spec):
    """Replace ``y`` by the exercise value where the strategy exercises."""
    go = exercise_decision(spec, t, x, y_rolled=y)
    return np.where(go, spec.value(x), y), go


def mark_exercise_forward(state, i, t, x, y, spec):
    """Record first exercise per path: ``state`` is a dict with ``alive``,
    ``t_E``, ``X_E``, ``Y_E``, ``G``.  At maturity call with ``spec=None``
    and the terminal payoff in ``state['payoff']``."""
    alive = state["alive"]
    if spec is None:
        go = alive.copy()
        value = state["payoff"]
    else:
        go = alive & exercise_decision(spec, t, x)
        value = spec.value(x)
    state["t_E"] = np.where(go, t, state["t_E"])
    state["X_E"] = np.where(go[:, None], x, state["X_E"])
    state["Y_E"] = np.where(go, y, state["Y_E"])
    state["G"] = np.where(go, value, state["G"])
    state["alive"] = alive & ~go
    return state
