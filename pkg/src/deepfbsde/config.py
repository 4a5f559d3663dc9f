"""Experiment configuration: defaults, presets, overrides and schema checks.

A configuration is a nested mapping with the sections ``model``,
``instrument``, ``generator``, ``method``, ``networks``, ``optimizer``,
``training``, ``oracle`` and ``output``.  Files are YAML.  Every key has a
default, unknown keys are errors, and :func:`validate` reports all problems
at once.
"""

import copy
import math
import numbers
import re

import yaml

from .errors import ConfigError

COMBO_PAYOFF = {
    "kind": "combo",
    "legs": [
        {"kind": "call", "strike": 120.0, "weight": 1.0},
        {"kind": "call", "strike": 150.0, "weight": -2.0},
    ],
}

DEFAULTS = {
    "preset": None,
    "model": {
        "kind": "black_scholes",
        "rate": 0.06,
        "vol": 0.2,
        "maturity": 0.5,
        "steps": 50,
        "initial": {"mode": "fixed", "x0": 120.0, "lo": 70.0, "hi": 170.0},
    },
    "instrument": {
        "payoff": COMBO_PAYOFF,
        "barrier": None,
        "exercise": None,
    },
    "generator": {
        "kind": "risk_neutral",
        "rate": None,          # null: the model rate
        "rate_lend": None,
        "rate_borrow": None,
        "costs": [],
    },
    "method": {
        "direction": "forward",
        "backward_step": "exact",
        "control_units": "value",
        "y0_init": 0.0,
        "shared": False,
    },
    "networks": {
        "hidden": [11, 11],
        "activation": "elu",
        "output_activation": "identity",
        "batchnorm": [],
        "center": None,        # null: start value or box center
        "halfwidth": None,     # null: three terminal standard deviations or box half-width
    },
    "optimizer": {
        "kind": "adam",
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "momentum": 0.9,
        "clip": None,
    },
    "training": {
        "batch": 512,
        "iterations": 20000,
        "val_every": 100,
        "val_batch": None,
        "seed": 0,
        "deterministic": False,
        "eval_paths": 65536,
    },
    "oracle": {
        "mc_paths": 400000,
        "substeps": 500,
        "seed": 2024,
        "nodes": [80.0, 90.0, 100.0, 110.0, 120.0, 130.0, 140.0, 150.0, 160.0],
    },
    "output": {"dir": None, "checkpoint": True, "plot": True},
}

BARRIER_DEFAULTS = {
    "level": 150.0,
    "rebate": 0.0,
    "rebate_at": "hit",
    "treatment": "monitored",
}

HOLDING_DEFAULTS = {
    "direction": "forward",
    "lo": 70.0,
    "hi": 170.0,
    "iterations": None,   # null: training.iterations
}

EXERCISE_DEFAULTS = {
    "times": [0.25],
    "value": {"kind": "zero"},
    "strategy": "holding_value",
    "allow_clairvoyant": False,
    "holding": HOLDING_DEFAULTS,
}

COST_DEFAULTS = {"form": "value", "lam": 0.0, "q": 2.0}

_BACKWARD_SHARED = {"method": {"direction": "backward", "shared": True}}

PRESETS = {
    "fwd-fixed-eu": (
        "forward method, fixed start 120, call-spread combo",
        {},
    ),
    "bwd-fixed-eu": (
        "backward method, fixed start 120, one shared control net with time input",
        _BACKWARD_SHARED,
    ),
    "fwd-random-eu": (
        "forward method, start uniform on [70, 170], initial-value network",
        {"model": {"initial": {"mode": "uniform"}}},
    ),
    "bwd-random-eu": (
        "backward method, start uniform on [70, 170], initial-value network",
        {"model": {"initial": {"mode": "uniform"}}, "method": {"direction": "backward"}},
    ),
    "barrier-bridge": (
        "up-and-out call 120/150 priced as a European through the bridge survival weight",
        {"instrument": {"payoff": {"kind": "call", "strike": 120.0},
                        "barrier": {"level": 150.0, "treatment": "bridge"}}},
    ),
    "barrier-monitored": (
        "up-and-out call 120/150 observed on the time grid",
        {"instrument": {"payoff": {"kind": "call", "strike": 120.0},
                        "barrier": {"level": 150.0, "treatment": "monitored"}}},
    ),
    "vacuous-barrier": (
        "call-spread combo with an unreachable monitored barrier at 1e6",
        {"instrument": {"barrier": {"level": 1.0e6, "treatment": "monitored"}}},
    ),
    "exercise-zero": (
        "backward method, one exercise date at 0.25 into a zero payoff",
        {**_BACKWARD_SHARED,
         "instrument": {"exercise": {"times": [0.25], "value": {"kind": "zero"}}}},
    ),
    "exercise-put": (
        "backward method, one exercise date at 0.25 into a deep in-the-money put (strike 200)",
        {**_BACKWARD_SHARED,
         "instrument": {"exercise": {"times": [0.25],
                                     "value": {"kind": "put", "strike": 200.0}}}},
    ),
}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``1e-3``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)


def _load_yaml(stream):
    return yaml.load(stream, Loader=_Loader)


# payoff descriptions are replaced whole: merging a call into a combo would keep its legs
_REPLACE_WHOLE = ("payoff", "value")


def deep_merge(base, over):
    """Recursive dict merge; lists and scalars in ``over`` replace."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in _REPLACE_WHOLE:
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg, text):
    """Apply ``dotted.key=value``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {text!r} has an empty key component")
    try:
        value = _load_yaml(raw)
    except yaml.YAMLError as err:
        raise ConfigError(f"override {text!r}: cannot parse value ({err})") from None
    node = cfg
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        if not isinstance(node[p], dict):
            raise ConfigError(f"override {text!r}: {p} is not a section")
        node = node[p]
    node[parts[-1]] = value
    return cfg


def load_file(path):
    try:
        with open(path) as fh:
            data = _load_yaml(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"config {path} is not valid YAML: {err}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return data


def resolve(preset=None, config_path=None, overrides=(), seed=None, iterations=None,
            deterministic=False, out_dir=None):
    """Defaults, then the preset, then the file, then flags and overrides."""
    user = load_file(config_path) if config_path else {}
    name = preset or user.get("preset")
    cfg = copy.deepcopy(DEFAULTS)
    if name is not None:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
        cfg = deep_merge(cfg, PRESETS[name][1])
        cfg["preset"] = name
    cfg = deep_merge(cfg, user)
    if preset is not None:
        cfg["preset"] = preset
    for text in overrides:
        apply_override(cfg, text)
    if seed is not None:
        cfg["training"]["seed"] = seed
    if iterations is not None:
        cfg["training"]["iterations"] = iterations
    if deterministic:
        cfg["training"]["deterministic"] = True
    if out_dir is not None:
        cfg["output"]["dir"] = out_dir
    _fill_optional_sections(cfg)
    validate(cfg)
    return cfg


def _fill_optional_sections(cfg):
    inst = cfg.get("instrument")
    if not isinstance(inst, dict):
        return
    if isinstance(inst.get("barrier"), dict):
        inst["barrier"] = deep_merge(BARRIER_DEFAULTS, inst["barrier"])
    if isinstance(inst.get("exercise"), dict):
        ex = deep_merge(EXERCISE_DEFAULTS, inst["exercise"])
        if isinstance(ex.get("holding"), dict):
            ex["holding"] = deep_merge(HOLDING_DEFAULTS, ex["holding"])
        inst["exercise"] = ex
    gen = cfg.get("generator")
    if isinstance(gen, dict) and isinstance(gen.get("costs"), list):
        gen["costs"] = [deep_merge(COST_DEFAULTS, c) if isinstance(c, dict) else c
                        for c in gen["costs"]]


# ---------------------------------------------------------------------------
# schema


def _is_num(v):
    return isinstance(v, numbers.Real) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v):
    return isinstance(v, numbers.Integral) and not isinstance(v, bool)


class _Checker:
    def __init__(self):
        self.problems = []

    def bad(self, path, msg):
        self.problems.append(f"{path}: {msg}")

    def keys(self, node, path, allowed):
        if not isinstance(node, dict):
            self.bad(path, "must be a mapping")
            return False
        for k in node:
            if k not in allowed:
                self.bad(f"{path}.{k}", "unknown key")
        for k in allowed:
            if k not in node:
                self.bad(f"{path}.{k}", "missing")
        return True

    def num(self, node, key, path, lo=None, hi=None, lo_open=False, nullable=False):
        v = node.get(key)
        p = f"{path}.{key}"
        if v is None and nullable:
            return None
        if not _is_num(v):
            self.bad(p, f"must be a finite number, got {v!r}")
            return None
        if lo is not None and (v <= lo if lo_open else v < lo):
            self.bad(p, f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        if hi is not None and v > hi:
            self.bad(p, f"must be <= {hi}, got {v!r}")
        return float(v)

    def int_(self, node, key, path, lo=None, nullable=False):
        v = node.get(key)
        p = f"{path}.{key}"
        if v is None and nullable:
            return None
        if not _is_int(v):
            self.bad(p, f"must be an integer, got {v!r}")
            return None
        if lo is not None and v < lo:
            self.bad(p, f"must be >= {lo}, got {v!r}")
        return int(v)

    def choice(self, node, key, path, options):
        v = node.get(key)
        if v not in options:
            self.bad(f"{path}.{key}", f"must be one of {', '.join(map(str, options))}, got {v!r}")
            return None
        return v

    def bool_(self, node, key, path):
        v = node.get(key)
        if not isinstance(v, bool):
            self.bad(f"{path}.{key}", f"must be true or false, got {v!r}")
        return v

    def num_list(self, node, key, path, nonempty=True, nullable=False):
        v = node.get(key)
        p = f"{path}.{key}"
        if v is None and nullable:
            return None
        if _is_num(v):
            v = [v]
        if not isinstance(v, list) or not all(_is_num(e) for e in v):
            self.bad(p, f"must be a list of numbers, got {v!r}")
            return None
        if nonempty and not v:
            self.bad(p, "must not be empty")
        return [float(e) for e in v]

    def payoff(self, node, path):
        if not isinstance(node, dict):
            self.bad(path, "payoff must be a mapping")
            return
        kind = node.get("kind")
        if kind == "zero":
            self.keys(node, path, ("kind",))
        elif kind in ("call", "put"):
            allowed = ("kind", "strike", "weight") if "weight" in node else ("kind", "strike")
            self.keys(node, path, allowed)
            self.num(node, "strike", path, lo=0, lo_open=True)
            if "weight" in node:
                self.num(node, "weight", path)
        elif kind == "combo":
            self.keys(node, path, ("kind", "legs"))
            legs = node.get("legs")
            if not isinstance(legs, list) or not legs:
                self.bad(f"{path}.legs", "must be a non-empty list of call/put legs")
                return
            for j, leg in enumerate(legs):
                lp = f"{path}.legs[{j}]"
                if not isinstance(leg, dict) or leg.get("kind") not in ("call", "put"):
                    self.bad(lp, "each leg must be a call or put mapping")
                    continue
                self.keys(leg, lp, ("kind", "strike", "weight"))
                self.num(leg, "strike", lp, lo=0, lo_open=True)
                self.num(leg, "weight", lp)
        else:
            self.bad(f"{path}.kind", f"must be one of zero, call, put, combo, got {kind!r}")


def validate(cfg):
    """Raise :class:`ConfigError` listing every problem in ``cfg``."""
    c = _Checker()
    if not c.keys(cfg, "config", tuple(DEFAULTS)):
        raise ConfigError(c.problems)
    if cfg.get("preset") is not None and cfg["preset"] not in PRESETS:
        c.bad("config.preset", f"unknown preset {cfg['preset']!r}")

    m = cfg.get("model")
    maturity = steps = None
    if c.keys(m, "model", tuple(DEFAULTS["model"])):
        c.choice(m, "kind", "model", ("black_scholes",))
        c.num(m, "rate", "model", lo=-1.0, hi=1.0)
        c.num(m, "vol", "model", lo=0, lo_open=True)
        maturity = c.num(m, "maturity", "model", lo=0, lo_open=True)
        steps = c.int_(m, "steps", "model", lo=1)
        ini = m.get("initial")
        if c.keys(ini, "model.initial", tuple(DEFAULTS["model"]["initial"])):
            mode = c.choice(ini, "mode", "model.initial", ("fixed", "uniform"))
            c.num(ini, "x0", "model.initial", lo=0, lo_open=True)
            lo = c.num(ini, "lo", "model.initial", lo=0, lo_open=True)
            hi = c.num(ini, "hi", "model.initial", lo=0, lo_open=True)
            if mode == "uniform" and lo is not None and hi is not None and not lo < hi:
                c.bad("model.initial", f"lo must be below hi, got [{lo}, {hi}]")

    _validate_instrument(c, cfg.get("instrument"), maturity, steps)

    g = cfg.get("generator")
    if c.keys(g, "generator", tuple(DEFAULTS["generator"])):
        kind = c.choice(g, "kind", "generator",
                        ("risk_neutral", "numeraire_zero", "differential_rates"))
        c.num(g, "rate", "generator", nullable=True)
        rl = c.num(g, "rate_lend", "generator", nullable=True)
        rb = c.num(g, "rate_borrow", "generator", nullable=True)
        if kind == "differential_rates":
            if rl is None or rb is None:
                c.bad("generator", "differential_rates needs rate_lend and rate_borrow")
            elif rb < rl:
                c.bad("generator.rate_borrow", "must be at least rate_lend")
        costs = g.get("costs")
        if not isinstance(costs, list):
            c.bad("generator.costs", "must be a list")
        else:
            for j, term in enumerate(costs):
                p = f"generator.costs[{j}]"
                if c.keys(term, p, tuple(COST_DEFAULTS)):
                    form = c.choice(term, "form", p, ("value", "per_share", "fixed"))
                    c.num(term, "lam", p, lo=0)
                    q = c.num(term, "q", p)
                    if form != "fixed" and q is not None and not 1.0 < q <= 2.0:
                        c.bad(f"{p}.q", f"must lie in (1, 2], got {q}")
            if len(costs) > 1:
                c.bad("generator.costs", "one cost term per risky asset; the model has one")

    me = cfg.get("method")
    if c.keys(me, "method", tuple(DEFAULTS["method"])):
        direction = c.choice(me, "direction", "method", ("forward", "backward"))
        c.choice(me, "backward_step", "method", ("exact", "taylor"))
        c.choice(me, "control_units", "method", ("value", "units"))
        c.num(me, "y0_init", "method")
        c.bool_(me, "shared", "method")
        ex = (cfg.get("instrument") or {}).get("exercise") if isinstance(cfg.get("instrument"), dict) else None
        if isinstance(ex, dict) and ex.get("strategy") == "clairvoyant" and direction == "forward":
            c.bad("method.direction", "clairvoyant exercise needs the backward method")

    n = cfg.get("networks")
    if c.keys(n, "networks", tuple(DEFAULTS["networks"])):
        hidden = n.get("hidden")
        if not isinstance(hidden, list) or not hidden or not all(_is_int(h) and h > 0 for h in hidden):
            c.bad("networks.hidden", f"must be a non-empty list of positive integers, got {hidden!r}")
            hidden = None
        acts = ("identity", "elu", "relu", "tanh", "sigmoid")
        c.choice(n, "activation", "networks", acts)
        c.choice(n, "output_activation", "networks", acts)
        bn = n.get("batchnorm")
        if not isinstance(bn, list) or not all(_is_int(p) and p >= 0 for p in bn):
            c.bad("networks.batchnorm", f"must be a list of layer positions, got {bn!r}")
        elif hidden is not None and any(p > len(hidden) for p in bn):
            c.bad("networks.batchnorm", f"positions must be <= {len(hidden)}")
        c.num(n, "center", "networks", nullable=True)
        c.num(n, "halfwidth", "networks", lo=0, lo_open=True, nullable=True)

    o = cfg.get("optimizer")
    if c.keys(o, "optimizer", tuple(DEFAULTS["optimizer"])):
        c.choice(o, "kind", "optimizer", ("adam", "momentum", "sgd"))
        c.num(o, "lr", "optimizer", lo=0, lo_open=True)
        for k in ("beta1", "beta2", "momentum"):
            v = c.num(o, k, "optimizer", lo=0)
            if v is not None and v >= 1:
                c.bad(f"optimizer.{k}", f"must be below 1, got {v}")
        c.num(o, "eps", "optimizer", lo=0, lo_open=True)
        c.num(o, "clip", "optimizer", lo=0, lo_open=True, nullable=True)

    t = cfg.get("training")
    if c.keys(t, "training", tuple(DEFAULTS["training"])):
        c.int_(t, "batch", "training", lo=2)
        c.int_(t, "iterations", "training", lo=0)
        c.int_(t, "val_every", "training", lo=1)
        c.int_(t, "val_batch", "training", lo=2, nullable=True)
        c.int_(t, "seed", "training", lo=0)
        c.bool_(t, "deterministic", "training")
        c.int_(t, "eval_paths", "training", lo=2)

    orc = cfg.get("oracle")
    if c.keys(orc, "oracle", tuple(DEFAULTS["oracle"])):
        c.int_(orc, "mc_paths", "oracle", lo=10000)
        c.int_(orc, "substeps", "oracle", lo=1)
        c.int_(orc, "seed", "oracle", lo=0)
        nodes = c.num_list(orc, "nodes", "oracle")
        if nodes and any(v <= 0 for v in nodes):
            c.bad("oracle.nodes", "must be positive")

    out = cfg.get("output")
    if c.keys(out, "output", tuple(DEFAULTS["output"])):
        if out.get("dir") is not None and not isinstance(out.get("dir"), str):
            c.bad("output.dir", "must be a path string or null")
        c.bool_(out, "checkpoint", "output")
        c.bool_(out, "plot", "output")

    if c.problems:
        raise ConfigError(c.problems)
    return cfg


def _validate_instrument(c, inst, maturity, steps):
    if not c.keys(inst, "instrument", tuple(DEFAULTS["instrument"])):
        return
    c.payoff(inst.get("payoff"), "instrument.payoff")
    b = inst.get("barrier")
    if b is not None and c.keys(b, "instrument.barrier", tuple(BARRIER_DEFAULTS)):
        c.num(b, "level", "instrument.barrier", lo=0, lo_open=True)
        rebate = c.num(b, "rebate", "instrument.barrier")
        when = c.choice(b, "rebate_at", "instrument.barrier", ("hit", "maturity"))
        treat = c.choice(b, "treatment", "instrument.barrier", ("monitored", "bridge"))
        if treat == "bridge" and rebate not in (None, 0.0) and when == "hit":
            c.bad("instrument.barrier",
                  "the bridge treatment pays rebates at maturity; set rebate_at: maturity")
    ex = inst.get("exercise")
    if ex is not None and isinstance(b, dict) and b.get("treatment") == "bridge":
        c.bad("instrument.barrier.treatment", "the bridge treatment cannot be combined with exercise")
    if ex is None or not c.keys(ex, "instrument.exercise", tuple(EXERCISE_DEFAULTS)):
        return
    p = "instrument.exercise"
    times = c.num_list(ex, "times", p)
    if times and maturity is not None and steps is not None:
        dt = maturity / steps
        for tE in times:
            k = tE / dt
            if not 0 < tE < maturity:
                c.bad(f"{p}.times", f"{tE} must lie strictly between 0 and maturity {maturity}")
            elif abs(k - round(k)) > 1e-9:
                c.bad(f"{p}.times", f"{tE} is not on the time grid (step {dt})")
        if len(set(times)) != len(times):
            c.bad(f"{p}.times", "must not repeat")
    c.payoff(ex.get("value"), f"{p}.value")
    strategy = c.choice(ex, "strategy", p, ("holding_value", "clairvoyant"))
    allow = c.bool_(ex, "allow_clairvoyant", p)
    if strategy == "clairvoyant" and allow is not True:
        c.bad(f"{p}.allow_clairvoyant",
              "clairvoyant exercise uses future information; set to true to allow it")
    h = ex.get("holding")
    if c.keys(h, f"{p}.holding", tuple(HOLDING_DEFAULTS)):
        hp = f"{p}.holding"
        c.choice(h, "direction", hp, ("forward", "backward"))
        lo = c.num(h, "lo", hp, lo=0, lo_open=True)
        hi = c.num(h, "hi", hp, lo=0, lo_open=True)
        if lo is not None and hi is not None and not lo < hi:
            c.bad(hp, f"lo must be below hi, got [{lo}, {hi}]")
        c.int_(h, "iterations", hp, lo=0, nullable=True)


def dump(cfg):
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)
