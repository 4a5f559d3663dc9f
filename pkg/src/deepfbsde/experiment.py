"""One experiment from a resolved configuration: build, train, evaluate, compare.

:func:`run_experiment` writes the run directory::

    config.yaml      resolved configuration (every default filled in)
    report.csv       per-iteration training report
    checkpoint.bin   final parameters and optimizer state
    holding_<k>.*    report and checkpoint of each holding-value network
    summary.json     price, delta, oracle values, loss statistics and checks
    plot.svg         loss and price curves
"""

import json
import math
import os

import numpy as np

from .config import dump
from .errors import ConfigError
from .generators import CostTerm, DifferentialRates, NumeraireZero, RiskNeutral, TransactionCosts
from .instruments import (
    BarrierAsEuropean,
    BarrierSpec,
    Call,
    Combo,
    Constant,
    ExerciseSpec,
    Instrument,
    Put,
)
from .nn import NetworkSpec
from .oracles import (
    BSParams,
    bs_delta,
    bs_price,
    lognormal_quadrature_price,
    mc_reference_price,
)
from .paths import InitialStateSpec, ModelSpec, build_uniform_grid
from .solver import DeepBSDESolver, MethodSpec, Problem, TrainConfig
from .svgplot import training_plot

# acceptance thresholds, fixed before any run
PRICE_REL, PRICE_ABS, DELTA_TOL = 0.02, 0.25, 0.05
CURVE_REL, CURVE_ABS, CURVE_DELTA_TOL = 0.03, 0.40, 0.08
MC_SE_MULT, MC_TRAIN_TOL = 3.0, 0.40
EXERCISE_SE_MULT = 2.0
Y0_STD_RATIO = 0.25
Y0_STD_EARLY_ITER = 100

# seeds of holding-value networks are offset from the main run's
HOLDING_SEED_STRIDE = 7919


# ---------------------------------------------------------------------------
# building blocks


def build_payoff(node):
    kind = node["kind"]
    if kind == "zero":
        return Constant(0.0)
    if kind in ("call", "put"):
        leg = Call(node["strike"]) if kind == "call" else Put(node["strike"])
        w = float(node.get("weight", 1.0))
        return leg if w == 1.0 else Combo(((w, leg),))
    legs = []
    for leg in node["legs"]:
        cls = Call if leg["kind"] == "call" else Put
        legs.append((float(leg["weight"]), cls(leg["strike"])))
    return Combo(tuple(legs))


def payoff_kinks(node):
    if node["kind"] in ("call", "put"):
        return [float(node["strike"])]
    if node["kind"] == "combo":
        return sorted({float(leg["strike"]) for leg in node["legs"]})
    return []


def build_model(cfg):
    m = cfg["model"]
    return ModelSpec.black_scholes(m["rate"], m["vol"])


def build_generator(cfg):
    g = cfg["generator"]
    costs = None
    if g["costs"]:
        costs = TransactionCosts(tuple(CostTerm(c["form"], c["lam"], c["q"]) for c in g["costs"]))
    if g["kind"] == "risk_neutral":
        rate = cfg["model"]["rate"] if g["rate"] is None else g["rate"]
        return RiskNeutral(rate, costs)
    if g["kind"] == "numeraire_zero":
        return NumeraireZero(costs)
    return DifferentialRates(g["rate_lend"], g["rate_borrow"], rate=g["rate"], costs=costs)


def _rebate_fn(value):
    value = float(value)

    def rebate(t, x):
        return np.full(np.shape(x)[:-1], value)

    return rebate


class HoldingValue:
    """Holding value at each exercise date from a trained initial-value network."""

    def __init__(self, solvers):
        self.solvers = solvers   # filled in as dates are trained

    def __call__(self, t, x):
        tE = min(self.solvers, key=lambda s: abs(s - t))
        if abs(tE - t) > 1e-9:
            raise ConfigError(f"no holding value trained for exercise time {t}")
        return self.solvers[tE].initial_value(x)


def build_instrument(cfg, holding=None, t0=0.0, exercise_times=None):
    """Instrument seen from ``t0``; ``exercise_times`` restricts the exercise dates."""
    inst = cfg["instrument"]
    m = cfg["model"]
    T = m["maturity"]
    payoff = build_payoff(inst["payoff"])
    barrier = None
    b = inst["barrier"]
    if b is not None:
        if b["treatment"] == "bridge":
            payoff = BarrierAsEuropean(payoff, b["level"], m["vol"], T - t0,
                                       rebate=Constant(b["rebate"]))
        else:
            barrier = BarrierSpec(b["level"], rebate=_rebate_fn(b["rebate"]),
                                  rebate_at=b["rebate_at"])
    exercise = None
    ex = inst["exercise"]
    if ex is not None:
        times = tuple(sorted(ex["times"] if exercise_times is None else exercise_times))
        if times:
            exercise = ExerciseSpec(
                times,
                build_payoff(ex["value"]),
                strategy=ex["strategy"],
                holding_value=holding if ex["strategy"] == "holding_value" else None,
                allow_clairvoyant=ex["allow_clairvoyant"],
                maturity=T,
            )
    return Instrument(payoff, T, barrier=barrier, exercise=exercise)


def _box(cfg):
    ini = cfg["model"]["initial"]
    if ini["mode"] == "fixed":
        return None
    return ini["lo"], ini["hi"]


def network_specs(cfg, t0=0.0, box=None):
    """Control and initial-value network specs; ``box`` overrides the start box."""
    m, n = cfg["model"], cfg["networks"]
    T = m["maturity"]
    box = box if box is not None else _box(cfg)
    if box is None:
        x0 = cfg["model"]["initial"]["x0"]
        center = x0
        halfwidth = 3.0 * m["vol"] * math.sqrt(T - t0) * x0
    else:
        center = 0.5 * (box[0] + box[1])
        halfwidth = 0.5 * (box[1] - box[0])
    if n["center"] is not None:
        center = n["center"]
    if n["halfwidth"] is not None:
        halfwidth = n["halfwidth"]
    hidden = list(n["hidden"])
    kw = dict(hidden=n["activation"], output=n["output_activation"],
              batchnorm=tuple(n["batchnorm"]))
    if cfg["method"]["shared"]:
        pi = NetworkSpec.dense([2] + hidden + [1], center=(0.5 * (t0 + T), center),
                               halfwidth=(0.5 * (T - t0), halfwidth), **kw)
    else:
        pi = NetworkSpec.dense([1] + hidden + [1], center=center, halfwidth=halfwidth, **kw)
    yinit = None
    if box is not None:
        yinit = NetworkSpec.dense([1] + hidden + [1], center=center, halfwidth=halfwidth, **kw)
    return pi, yinit


def optimizer_kw(cfg):
    o = cfg["optimizer"]
    if o["kind"] == "adam":
        return dict(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], clip=o["clip"])
    if o["kind"] == "momentum":
        return dict(lr=o["lr"], momentum=o["momentum"], clip=o["clip"])
    return dict(lr=o["lr"], clip=o["clip"])


def method_spec(cfg, direction=None):
    me = cfg["method"]
    return MethodSpec(direction or me["direction"], me["backward_step"], me["control_units"],
                      me["y0_init"])


def train_config(cfg, iterations=None, seed=None):
    t = cfg["training"]
    return TrainConfig(
        batch=t["batch"],
        iterations=t["iterations"] if iterations is None else iterations,
        val_every=t["val_every"],
        val_batch=t["val_batch"],
        seed=t["seed"] if seed is None else seed,
        deterministic=t["deterministic"],
        eval_paths=t["eval_paths"],
    )


def make_solver(cfg, problem, pi_spec, yinit_spec, seed):
    return DeepBSDESolver(problem, pi_spec, yinit_spec, shared=cfg["method"]["shared"],
                          seed=seed, optimizer=cfg["optimizer"]["kind"],
                          optimizer_kw=optimizer_kw(cfg))


def build_problem(cfg, holding=None):
    m = cfg["model"]
    grid = build_uniform_grid(0.0, m["maturity"], m["steps"])
    ini = m["initial"]
    init = (InitialStateSpec.fixed(ini["x0"]) if ini["mode"] == "fixed"
            else InitialStateSpec.uniform(ini["lo"], ini["hi"]))
    return Problem(grid, build_model(cfg), init, build_instrument(cfg, holding),
                   build_generator(cfg), method_spec(cfg))


def build_solver(cfg, holding=None):
    pi, yinit = network_specs(cfg)
    return make_solver(cfg, build_problem(cfg, holding), pi, yinit, cfg["training"]["seed"])


# ---------------------------------------------------------------------------
# holding values for exercise dates


def train_holdings(cfg, out_dir=None, log=None):
    """Train one random-start problem per exercise date, latest date first.

    The problem for date ``t_k`` runs from ``t_k`` to maturity with the
    later dates exercisable under the holding values already trained; its
    initial-value network is the holding value at ``t_k``.
    Returns ``(HoldingValue, info)`` or ``(None, [])`` when nothing is needed.
    """
    ex = cfg["instrument"]["exercise"]
    if ex is None or ex["strategy"] != "holding_value":
        return None, []
    m, h = cfg["model"], ex["holding"]
    T, steps = m["maturity"], m["steps"]
    dt = T / steps
    times = sorted(ex["times"])
    main_its = cfg["training"]["iterations"]
    its = 0 if main_its == 0 else (main_its if h["iterations"] is None else h["iterations"])
    solvers = {}
    info = []
    holding = HoldingValue(solvers)
    box = (h["lo"], h["hi"])
    for k in reversed(range(len(times))):
        tE = times[k]
        n_k = int(round((T - tE) / dt))
        grid = build_uniform_grid(tE, T, n_k)
        inst = build_instrument(cfg, holding, t0=tE, exercise_times=times[k + 1:])
        problem = Problem(grid, build_model(cfg), InitialStateSpec.uniform(*box), inst,
                          build_generator(cfg), method_spec(cfg, h["direction"]))
        pi, yinit = network_specs(cfg, t0=tE, box=box)
        seed = cfg["training"]["seed"] + HOLDING_SEED_STRIDE * (k + 1)
        solver = make_solver(cfg, problem, pi, yinit, seed)
        if log:
            log(f"training holding value at t={tE} ({its} iterations)")
        report = solver.train(train_config(cfg, iterations=its, seed=seed))
        solvers[tE] = solver
        if out_dir is not None:
            report.write_csv(os.path.join(out_dir, f"holding_{k}.csv"))
            solver.save(os.path.join(out_dir, f"holding_{k}.bin"))
        val = report.column("val_loss")
        val = val[np.isfinite(val)]
        info.append({"time": tE, "iterations": its,
                     "final_val_loss": _num(val[-1]) if val.size else None})
    info.reverse()
    return holding, info


# ---------------------------------------------------------------------------
# oracles


def european_value(payoff, x, rate, vol, tau):
    """Closed-form price and delta of a call/put/combo/constant payoff."""
    x = np.asarray(x, dtype=float)
    if isinstance(payoff, Constant):
        return np.full(x.shape, payoff.value * math.exp(-rate * tau)), np.zeros(x.shape)
    p = BSParams(x, rate, vol, tau)
    return np.asarray(bs_price(payoff, p), dtype=float), np.asarray(bs_delta(payoff, p), dtype=float)


def barrier_is_vacuous(level, x, rate, vol, T, z_min=8.0):
    """True when the level sits more than ``z_min`` terminal standard deviations
    (after the worst-case drift) above ``x``; the breach probability is then
    below ``2 Phi(-z_min)``, far under Monte-Carlo resolution."""
    sd = vol * math.sqrt(T)
    z = (math.log(level / x) - abs(rate - 0.5 * vol * vol) * T) / sd
    return z > z_min


def oracle_rows(cfg, xs):
    """Reference price, delta and standard error for each start value in ``xs``."""
    m, inst, orc = cfg["model"], cfg["instrument"], cfg["oracle"]
    r, vol, T, steps = m["rate"], m["vol"], m["maturity"], m["steps"]
    payoff = build_payoff(inst["payoff"])
    b, ex = inst["barrier"], inst["exercise"]
    closed = isinstance(payoff, (Call, Put, Combo, Constant))
    rows = []
    for x in xs:
        x = float(x)
        row = {"x": x, "price": None, "delta": None, "se": None, "method": None,
               "european_price": None, "european_delta": None}
        if closed:
            p, d = european_value(payoff, x, r, vol, T)
            row["european_price"], row["european_delta"] = float(p), float(d)
        if b is None and ex is None:
            row.update(price=row["european_price"], delta=row["european_delta"], se=0.0,
                       method="closed_form")
        elif b is not None and ex is None and b["treatment"] == "monitored" \
                and barrier_is_vacuous(b["level"], x, r, vol, T) and closed:
            row.update(price=row["european_price"], delta=row["european_delta"], se=0.0,
                       method="closed_form_unreachable_barrier")
        elif b is not None and ex is None:
            barrier = BarrierSpec(b["level"], rebate=_rebate_fn(b["rebate"]),
                                  rebate_at="maturity" if b["treatment"] == "bridge"
                                  else b["rebate_at"])
            if b["treatment"] == "bridge":
                monitoring, substeps = "continuous", orc["substeps"]
            else:
                monitoring, substeps = "discrete", steps
            price, se = mc_reference_price(Instrument(payoff, T, barrier=barrier), r, vol, x,
                                           orc["mc_paths"], substeps, orc["seed"],
                                           monitoring=monitoring)
            row.update(price=price, se=se, method=f"mc_{monitoring}")
            if b["treatment"] == "bridge":
                row["transform_price"], row["delta"] = _bridge_quadrature(cfg, payoff, x)
        elif ex is not None and b is None and len(ex["times"]) == 1 \
                and ex["strategy"] == "holding_value" and closed:
            row.update(_exercise_mc(cfg, payoff, x))
        else:
            row["method"] = "unavailable"
        rows.append(row)
    return rows


def _bridge_quadrature(cfg, payoff, x):
    m, b = cfg["model"], cfg["instrument"]["barrier"]
    T = m["maturity"]
    transformed = BarrierAsEuropean(payoff, b["level"], m["vol"], T, rebate=Constant(b["rebate"]))
    kinks = payoff_kinks(cfg["instrument"]["payoff"]) + [b["level"]]

    def price(s):
        return lognormal_quadrature_price(transformed, s, m["rate"], m["vol"], T, kinks=kinks, x0=s)

    h = 1e-3 * x
    return price(x), (price(x + h) - price(x - h)) / (2.0 * h)


def _exercise_mc(cfg, payoff, x):
    """Single exercise date: the holding value is the closed-form price of
    the remaining European claim, which makes the rule optimal."""
    m, ex, orc = cfg["model"], cfg["instrument"]["exercise"], cfg["oracle"]
    r, vol, T = m["rate"], m["vol"], m["maturity"]
    tE = float(ex["times"][0])

    def holding(t, xe):
        return european_value(payoff, xe[:, 0], r, vol, T - t)[0]

    spec = ExerciseSpec((tE,), build_payoff(ex["value"]), holding_value=holding, maturity=T)
    substeps = m["steps"] * max(1, orc["substeps"] // m["steps"])
    price, se = mc_reference_price(Instrument(payoff, T, exercise=spec), r, vol, x,
                                   orc["mc_paths"], substeps, orc["seed"])
    return {"price": price, "se": se, "method": "mc_optimal_exercise"}


# ---------------------------------------------------------------------------
# evaluation and checks


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def evaluate(solver, cfg):
    """Trained price and delta (fixed start) or curves over the oracle nodes (random start)."""
    t = cfg["training"]
    out = {}
    if solver.problem.random_start:
        nodes = np.asarray(cfg["oracle"]["nodes"], dtype=float)
        prices = solver.initial_value(nodes[:, None])
        pis = solver.control_at(0, nodes[:, None])[:, 0]
        deltas = pis / nodes if cfg["method"]["control_units"] == "value" else pis
        out["curve"] = [{"x": float(x), "price": _num(p), "delta": _num(d)}
                        for x, p, d in zip(nodes, prices, deltas)]
        return out
    price, delta, outside = solver.extract_price_delta(None, t["eval_paths"], t["seed"])
    out.update(price=_num(price), delta=_num(delta), outside_box=bool(outside), price_se=None)
    if not solver.fixed_forward:
        _, se = solver.evaluate_backward_price(t["eval_paths"], t["seed"])
        out["price_se"] = _num(se)
    return out


def _check(name, value, limit, passed, detail=""):
    return {"name": name, "value": _num(value), "limit": _num(limit), "pass": bool(passed),
            "detail": detail}


def acceptance_checks(cfg, result, oracle, y0_std):
    inst = cfg["instrument"]
    b, ex = inst["barrier"], inst["exercise"]
    checks = []
    if "curve" in result:
        price_ratio = []
        delta_gap = []
        for node, orow in zip(result["curve"], oracle):
            if orow["price"] is None or node["price"] is None:
                price_ratio.append(math.inf)
                continue
            tol = max(CURVE_REL * abs(orow["price"]), CURVE_ABS)
            if orow["method"].startswith("mc"):
                tol = MC_SE_MULT * orow["se"] + MC_TRAIN_TOL
            price_ratio.append(abs(node["price"] - orow["price"]) / tol)
            if orow["delta"] is not None and node["delta"] is not None:
                delta_gap.append(abs(node["delta"] - orow["delta"]))
        checks.append(_check("curve_price", max(price_ratio), 1.0, max(price_ratio) <= 1.0,
                             "max over nodes of |error| / tolerance"))
        if delta_gap:
            checks.append(_check("curve_delta", max(delta_gap), CURVE_DELTA_TOL,
                                 max(delta_gap) <= CURVE_DELTA_TOL))
        return checks

    o = oracle[0]
    price, delta = result["price"], result["delta"]
    zero_exercise = ex is not None and ex["value"]["kind"] == "zero"
    if ex is not None:
        se = result["price_se"] if result["price_se"] is not None else (o["se"] or 0.0)
        eu = o["european_price"]
        if eu is not None and price is not None:
            floor = eu - EXERCISE_SE_MULT * se
            checks.append(_check("price_above_european", price, floor, price >= floor,
                                 "exercise rights cannot lower the value"))
    closed_method = o["method"] is not None and o["method"].startswith("closed_form")
    if closed_method or zero_exercise:
        ref, ref_delta = ((o["european_price"], o["european_delta"]) if zero_exercise
                          else (o["price"], o["delta"]))
        if ref is not None and price is not None:
            tol = max(PRICE_REL * abs(ref), PRICE_ABS)
            checks.append(_check("price", abs(price - ref), tol, abs(price - ref) <= tol))
        if ref_delta is not None and delta is not None:
            gap = abs(delta - ref_delta)
            checks.append(_check("delta", gap, DELTA_TOL, gap <= DELTA_TOL))
    elif b is not None and o["price"] is not None and price is not None:
        se = math.hypot(o["se"] or 0.0, result["price_se"] or 0.0)
        tol = MC_SE_MULT * se + MC_TRAIN_TOL
        checks.append(_check("price_vs_mc", abs(price - o["price"]), tol,
                             abs(price - o["price"]) <= tol))
    # the dispersion property is a statement about the plain European backward run
    if b is None and ex is None and y0_std is not None and y0_std.get("ratio") is not None:
        checks.append(_check("y0_std_ratio", y0_std["ratio"], Y0_STD_RATIO,
                             y0_std["ratio"] < Y0_STD_RATIO,
                             f"std of rolled-back Y0, final / iteration {Y0_STD_EARLY_ITER}"))
    return checks


def _y0_std(report):
    recs = [r for r in report.records if "y0_std" in r]
    if not recs:
        return None
    early = next((r["y0_std"] for r in recs if r["iter"] == Y0_STD_EARLY_ITER), None)
    final = recs[-1]["y0_std"]
    ratio = final / early if early and recs[-1]["iter"] > Y0_STD_EARLY_ITER else None
    return {"iter_100": _num(early), "final": _num(final), "ratio": _num(ratio)}


def _loss_stats(report):
    tr = report.column("train_loss")
    va = report.column("val_loss")
    tr = tr[np.isfinite(tr)]
    va = va[np.isfinite(va)]
    return {
        "initial_val": _num(va[0]) if va.size else None,
        "final_train": _num(tr[-1]) if tr.size else None,
        "final_val": _num(va[-1]) if va.size else None,
        "min_val": _num(va.min()) if va.size else None,
    }


def summarize(cfg, solver, report, holding_info=()):
    result = evaluate(solver, cfg)
    if solver.problem.random_start:
        xs = [c["x"] for c in result["curve"]]
    else:
        xs = [cfg["model"]["initial"]["x0"]]
    oracle = oracle_rows(cfg, xs)
    if "curve" in result:
        for node, orow in zip(result["curve"], oracle):
            node.update(oracle_price=_num(orow["price"]), oracle_delta=_num(orow["delta"]),
                        oracle_se=_num(orow["se"]))
    y0_std = _y0_std(report)
    iterations = report.records[-1]["iter"] if report.records else 0
    summary = {
        "preset": cfg["preset"],
        "direction": cfg["method"]["direction"],
        "start": "random" if solver.problem.random_start else "fixed",
        "seed": cfg["training"]["seed"],
        "iterations": iterations,
        "untrained": iterations == 0,
        "result": result,
        "oracle": oracle if "curve" not in result else None,
        "loss": _loss_stats(report),
        "y0_std": y0_std,
        "holding": list(holding_info),
        "checks": acceptance_checks(cfg, result, oracle, y0_std),
    }
    summary["passed"] = all(c["pass"] for c in summary["checks"])
    if not cfg["training"]["deterministic"] and report.records:
        summary["elapsed_s"] = report.records[-1]["elapsed_s"]
    return summary


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_out_dir(cfg):
    name = cfg["preset"] or "custom"
    return os.path.join("runs", f"{name}-seed{cfg['training']['seed']}")


def run_experiment(cfg, out_dir=None, log=None):
    """Train and evaluate; returns ``(summary, out_dir)``.

    :class:`DivergenceError` propagates after the last good parameters are
    written to ``checkpoint_last_good.bin``.
    """
    out_dir = out_dir or cfg["output"]["dir"] or default_out_dir(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        fh.write(dump(cfg))
    holding, holding_info = train_holdings(cfg, out_dir, log)
    solver = build_solver(cfg, holding)
    if log:
        log(f"training {cfg['training']['iterations']} iterations")
    report = solver.train(train_config(cfg),
                          last_good_path=os.path.join(out_dir, "checkpoint_last_good.bin"))
    report.write_csv(os.path.join(out_dir, "report.csv"))
    if cfg["output"]["checkpoint"]:
        solver.save(os.path.join(out_dir, "checkpoint.bin"))
    summary = summarize(cfg, solver, report, holding_info)
    write_json(os.path.join(out_dir, "summary.json"), summary)
    if cfg["output"]["plot"]:
        ref = None
        if summary["oracle"]:
            ref = summary["oracle"][0]["price"]
        with open(os.path.join(out_dir, "plot.svg"), "w") as fh:
            fh.write(training_plot(report, ref, title=cfg["preset"] or "custom run"))
    return summary, out_dir
