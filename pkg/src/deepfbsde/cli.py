"""Command line: ``deepfbsde run | oracle | report | presets``.

Exit codes: 0 ok, 2 configuration error, 3 divergence, 4 failed checks
(``report --check``).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import config as config_mod
from .errors import ConfigError, DivergenceError
from .experiment import oracle_rows, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 2, 3, 4

RUN_ARTIFACTS = ("config.yaml", "report.csv", "summary.json")


def _config_args(p):
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--preset", help="named preset (see `presets`)")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--iterations", type=int, help="training iterations (0: validation dry run)")
    p.add_argument("--deterministic", action="store_true",
                   help="omit wall-clock values so reruns are byte-identical")
    p.add_argument("--out-dir", help="run directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a dotted config key, e.g. training.batch=256 (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(prog="deepfbsde", description="Deep BSDE option pricing")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration and write its run directory")
    _config_args(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("oracle", help="reference prices and deltas for a configuration")
    _config_args(p)
    p.add_argument("--x", type=float, nargs="+", help="start values (default: start or nodes)")

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("run_dir")
    p.add_argument("--check", action="store_true", help="exit 4 unless every check passes")
    p.add_argument("--json", action="store_true", help="print the machine-readable summary")

    sub.add_parser("presets", help="list the named presets")
    return ap


def _resolve(args):
    if not args.config and not args.preset:
        raise ConfigError("give --config or --preset")
    return config_mod.resolve(
        preset=args.preset, config_path=args.config, overrides=args.override, seed=args.seed,
        iterations=args.iterations, deterministic=args.deterministic, out_dir=args.out_dir,
    )


def _print_config_error(err):
    print("configuration error:", file=sys.stderr)
    for p in err.problems:
        print(f"  - {p}", file=sys.stderr)


def cmd_run(args):
    cfg = _resolve(args)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        summary, out_dir = run_experiment(cfg, log=log)
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        if err.checkpoint:
            print(f"last good parameters: {err.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    print(render_summary(summary, out_dir))
    return EXIT_OK


def _fmt(v, spec=".6f"):
    return "-" if v is None else format(v, spec)


def cmd_oracle(args):
    cfg = _resolve(args)
    if args.x:
        xs = args.x
    elif cfg["model"]["initial"]["mode"] == "fixed":
        xs = [cfg["model"]["initial"]["x0"]]
    else:
        lo, hi = cfg["model"]["initial"]["lo"], cfg["model"]["initial"]["hi"]
        xs = list(np.arange(lo, hi + 1e-9, 10.0))
    rows = oracle_rows(cfg, xs)
    print(f"{'x':>10} {'price':>14} {'delta':>10} {'mc_se':>10}  method")
    for r in rows:
        print(f"{r['x']:>10.4g} {_fmt(r['price'], '14.6f'):>14} {_fmt(r['delta'], '10.6f'):>10} "
              f"{_fmt(r['se'], '10.2e'):>10}  {r['method']}")
    return EXIT_OK


def render_summary(s, run_dir=""):
    lines = [f"run: {run_dir}" if run_dir else "run summary",
             f"preset: {s.get('preset') or 'custom'}   method: {s['direction']}/{s['start']}   "
             f"seed: {s['seed']}   iterations: {s['iterations']}"]
    if s.get("untrained"):
        lines.append("status: untrained (0 iterations; initial values only)")
    res = s["result"]
    if "curve" in res:
        lines.append(f"{'x':>8} {'price':>10} {'oracle':>10} {'|err|':>8} {'delta':>8} "
                     f"{'oracle':>8}")
        for c in res["curve"]:
            err = (None if c["price"] is None or c["oracle_price"] is None
                   else abs(c["price"] - c["oracle_price"]))
            lines.append(f"{c['x']:>8.4g} {_fmt(c['price'], '10.4f'):>10} "
                         f"{_fmt(c['oracle_price'], '10.4f'):>10} {_fmt(err, '8.4f'):>8} "
                         f"{_fmt(c['delta'], '8.4f'):>8} {_fmt(c['oracle_delta'], '8.4f'):>8}")
    else:
        o = s["oracle"][0]
        lines.append(f"price {_fmt(res['price'])}"
                     + (f" (se {_fmt(res['price_se'], '.2e')})" if res.get("price_se") else "")
                     + f"   oracle {_fmt(o['price'])} [{o['method']}]"
                     + (f" (se {_fmt(o['se'], '.2e')})" if o.get("se") else ""))
        if res["price"] is not None and o["price"] is not None:
            lines.append(f"|price - oracle| {abs(res['price'] - o['price']):.6f}")
        lines.append(f"delta {_fmt(res['delta'])}   oracle {_fmt(o['delta'])}")
        if o.get("european_price") is not None and not o["method"].startswith("closed_form"):
            lines.append(f"european (no barrier, no exercise): price "
                         f"{_fmt(o['european_price'])}   delta {_fmt(o['european_delta'])}")
        if res.get("outside_box"):
            lines.append("warning: start value lies outside the network prescaling box")
    loss = s["loss"]
    lines.append(f"validation loss: initial {_fmt(loss['initial_val'], '.4g')}   "
                 f"final {_fmt(loss['final_val'], '.4g')}   min {_fmt(loss['min_val'], '.4g')}")
    if s.get("y0_std"):
        y = s["y0_std"]
        lines.append(f"std of rolled-back Y0: iteration 100 {_fmt(y['iter_100'], '.4g')}   "
                     f"final {_fmt(y['final'], '.4g')}")
    for c in s["checks"]:
        lines.append(f"check {c['name']}: {'PASS' if c['pass'] else 'FAIL'} "
                     f"(value {_fmt(c['value'], '.4g')}, limit {_fmt(c['limit'], '.4g')})")
    return "\n".join(lines)


def cmd_report(args):
    missing = [a for a in RUN_ARTIFACTS if not os.path.exists(os.path.join(args.run_dir, a))]
    if missing:
        print(f"{args.run_dir}: missing run artifacts:", file=sys.stderr)
        for a in missing:
            print(f"  - {a}", file=sys.stderr)
        return EXIT_CONFIG
    with open(os.path.join(args.run_dir, "summary.json")) as fh:
        summary = json.load(fh)
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(render_summary(summary, args.run_dir))
    if args.check and not (summary["checks"] and summary["passed"]):
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_presets(args):
    for name, (desc, _) in config_mod.PRESETS.items():
        print(f"{name:<18} {desc}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "oracle": cmd_oracle, "report": cmd_report,
               "presets": cmd_presets}[args.command]
    try:
        return handler(args)
    except ConfigError as err:
        _print_config_error(err)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
