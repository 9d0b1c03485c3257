"""Command-line entry point: ``coefflab {toy,props,params,peft}``.

Every subcommand accepts ``--seed``, ``--out`` and ``--config FILE``.
The config file is flat ``key = value`` lines (``#`` starts a comment);
keys are the long flag names with dashes or underscores, command-line
flags override file values and unknown keys are rejected.  The
``COEFFLAB_OUT`` environment variable overrides the output directory.

Exit codes: 0 success, 1 configuration error, 2 assertion failure,
3 inconclusive result.
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import report
from .errors import CoeffLabError

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT, EXIT_INCONCLUSIVE = 0, 1, 2, 3

log = logging.getLogger("coefflab")


class ConfigError(Exception):
    pass


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _seed_list(s):
    try:
        seeds = [int(t) for t in str(s).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", default="out", help="output directory (default ./out; COEFFLAB_OUT wins)")
    common.add_argument("--config", help="flat key=value file; flags override it")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")

    p = _Parser(prog="coefflab", description="Coefficient tuning of multi-head attention: checks and experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("toy", parents=[common], help="8-node square-to-star toy experiment")
    t.add_argument("--regime", choices=("all", "qk-only", "qkv", "qk-plus-alpha"), default="all")
    t.add_argument("--steps", type=_positive_int, default=5000)
    t.add_argument("--lr", type=float, default=1e-2)

    s = sub.add_parser("props", parents=[common], help="property suites (equivalence, gradients, hulls)")
    s.add_argument("--trials", type=int, default=200, help="trials per suite (default 200)")
    s.add_argument("--suite", choices=("all", "equivalence", "gradient", "bounded", "containment", "expansion"),
                   default="all")

    m = sub.add_parser("params", parents=[common], help="parameter-count ratios")
    m.add_argument("--ci", type=int, default=2048)
    m.add_argument("--co", type=int, default=1280)
    m.add_argument("--h", type=int, default=10)
    m.add_argument("--r", type=int, default=4, help="LoRA rank; 0 omits the LoRA ratio")

    f = sub.add_parser("peft", parents=[common], help="frozen-backbone ablation grid")
    f.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    f.add_argument("--steps", type=_positive_int, default=None, help="tuning steps per cell (default 1000)")
    return p


def _subparser(parser, command):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[command]
    raise KeyError(command)


def read_config_file(path):
    pairs = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value, got {raw.strip()!r}")
        k, v = (x.strip() for x in line.split("=", 1))
        pairs[k.replace("-", "_")] = v
    return pairs


def parse_config(argv):
    """Flags, merged over the optional config file, merged over the defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sp = _subparser(parser, args.command)
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    # flags given on the command line, found by re-parsing against a sentinel default
    probe = build_parser()
    for a in _subparser(probe, args.command)._actions:
        a.default = argparse.SUPPRESS
    explicit = set(vars(probe.parse_args(argv)))
    for key, raw in read_config_file(args.config).items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if key in explicit:
            continue
        a = actions[key]
        try:
            if a.const is True and a.nargs == 0:
                val = raw.lower() in ("1", "true", "yes", "on")
            else:
                val = a.type(raw) if a.type else raw
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
        if a.choices is not None and val not in a.choices:
            raise ConfigError(f"bad value for {key}: {val!r} not in {sorted(a.choices)}")
        setattr(args, key, val)
    return args


# ---------------------------------------------------------------------------
# subcommands


def cmd_toy(args):
    from .toy import REGIMES, TrainConfig, build_toy_instance, run_regime_comparison, train_toy

    inst = build_toy_instance()
    base = TrainConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed)
    out = report.output_dir(args.out)
    if args.regime == "all":
        comp = run_regime_comparison(base, inst)
        results = comp.results
    else:
        comp = None
        cfg = TrainConfig(**{**base.__dict__, "regime": args.regime})
        results = {args.regime: train_toy(inst, cfg)}

    curves = [(r, step, v) for r in results for step, v in enumerate(results[r].loss_curve)]
    report.write_csv(out / "loss_curves.csv", ["regime", "step", "mse"], curves)
    nodes = []
    for r, res in results.items():
        for i, (row, tgt, src) in enumerate(zip(res.final_output.data, inst.target.data, inst.x.data)):
            nodes.append((r, i, src[0], src[1], tgt[0], tgt[1], row[0], row[1]))
    report.write_csv(out / "final_nodes.csv",
                     ["regime", "node", "input_x", "input_y", "target_x", "target_y", "output_x", "output_y"], nodes)
    series = [("input", inst.x.data.tolist()), ("target", inst.target.data.tolist())]
    series += [(r, results[r].final_output.data.tolist()) for r in REGIMES if r in results]
    report.write_svg(out / "toy_plot.svg", report.scatter_svg(series, "toy experiment: final node positions"))

    for r, res in results.items():
        print(f"{r:14s} final_mse={res.final_mse:.6g} max_abs_coordinate={res.max_abs_coordinate:.6g}")
    if comp is None:
        return EXIT_OK
    ratios = {r: comp.ratio_to_best(r) for r in REGIMES}
    best = results["qk-plus-alpha"].final_mse
    ok = best < 1e-3 and ratios["qk-only"] >= 10 and ratios["qkv"] >= 10
    print(f"ordering {'PASS' if ok else 'FAIL'}: qk-only/alpha={ratios['qk-only']:.3g} qkv/alpha={ratios['qkv']:.3g}")
    return EXIT_OK if ok else EXIT_ASSERT


def _props_job(name, trials, seed):
    from .props import run_suite

    return run_suite(name, trials, np.random.default_rng([seed, _SUITE_STREAM[name]]))


_SUITE_STREAM = {"equivalence": 0, "gradient": 1, "bounded": 2, "containment": 3, "expansion": 4}


def _map(jobs, fn, arglists):
    if jobs <= 1 or len(arglists) <= 1:
        return [fn(*a) for a in arglists]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futs = [ex.submit(fn, *a) for a in arglists]
        return [f.result() for f in futs]


def cmd_props(args):
    from .props import SUITES

    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    names = SUITES if args.suite == "all" else (args.suite,)
    out = report.output_dir(args.out)
    results = _map(args.jobs, _props_job, [(n, args.trials, args.seed) for n in names])
    rows = [r for res in results for r in res.rows]
    report.write_csv(out / "props_report.csv", ["suite", "trial", "verdict", "slack"], rows)
    code = EXIT_OK
    for res in results:
        if res.failed:
            status = "FAIL"
        elif res.inconclusive:
            # expansion tolerates a few misses; other suites must be clean
            status = "PASS" if res.name == "expansion" and res.passed >= 0.95 * res.trials else "INCONCLUSIVE"
        else:
            status = "PASS"
        print(f"{res.name:12s} {status:12s} passed={res.passed}/{res.trials} "
              f"inconclusive={res.inconclusive} stat={res.worst:.3e}")
        if status == "FAIL":
            code = EXIT_ASSERT
        elif status == "INCONCLUSIVE" and code == EXIT_OK:
            code = EXIT_INCONCLUSIVE
    return code


def cmd_params(args):
    from .params import LayerDims, params_table

    try:
        d = LayerDims(args.ci, args.co, args.h, args.r or None)
    except CoeffLabError as e:
        raise ConfigError(str(e)) from None
    rows = params_table(d)
    out = report.output_dir(args.out)
    report.write_csv(out / "params_table.csv", ["ci", "co", "h", "r", "quantity", "value", "percent"],
                     [(d.c_in, d.c_out, d.heads, d.lora_rank or "", q, v, pct) for q, v, pct in rows])
    width = max(len(q) for q, _, _ in rows)
    for q, v, pct in rows:
        val = f"{v:.4g}" if isinstance(v, float) else str(v)
        print(f"{q:<{width}}  {val:>12}  {pct}")
    return EXIT_OK


def _log_cell(m):
    log.info("peft cell mode=%s p=%g seed=%d train_loss=%.4g test_acc=%.4f",
             m.mode, m.dropout_p, m.seed, m.train_loss, m.test_acc)


def _peft_job(seed, hc):
    from .peft import run_ablation_grid

    return run_ablation_grid([seed], hc, progress=_log_cell).rows


def cmd_peft(args):
    from .peft import HarnessConfig, ordering_checks

    hc = HarnessConfig() if args.steps is None else HarnessConfig(steps=args.steps)
    out = report.output_dir(args.out)
    parts = _map(args.jobs, _peft_job, [(s, hc) for s in args.seeds])
    rows = [r for part in parts for r in part]
    report.write_csv(out / "ablation_grid.csv", ["mode", "p", "seed", "train_loss", "test_acc"],
                     [(r.mode, r.dropout_p, r.seed, r.train_loss, r.test_acc) for r in rows])
    checks = ordering_checks(rows, args.seeds)
    for name, ok in checks.items():
        print(f"{name:34s} {'PASS' if ok else 'FAIL'}")
    # the primary orderings decide the exit code; the others are reported only
    primary = ("alpha_beats_linear_probe", "residual_beats_random")
    return EXIT_OK if all(checks[k] for k in primary) else EXIT_ASSERT


COMMANDS = {"toy": cmd_toy, "props": cmd_props, "params": cmd_params, "peft": cmd_peft}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_config(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, CoeffLabError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
