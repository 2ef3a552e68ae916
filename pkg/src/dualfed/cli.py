"""Command line entry point.

Exit codes: 0 ok, 1 invalid config or arguments, 2 runtime failure (including
I/O), 3 gradient check above tolerance. Failures print one line to stderr:
``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import generate_synthetic, partition, partition_counts_csv

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3
OUTPUT_ENV = "DUALFED_OUTPUT_DIR"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


def _load(path: str) -> RunConfig:
    try:
        cfg = load_config(path)
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc.strerror or exc}", EXIT_RUNTIME) from None
    except ConfigError as exc:
        raise CliError("config", str(exc), EXIT_VALIDATION) from None
    try:
        cfg.validate()
    except ConfigError as exc:
        raise CliError("config", str(exc), EXIT_VALIDATION) from None
    return cfg


def _output_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def cmd_run(args) -> int:
    from .experiment import run_experiment
    cfg = _load(args.config)
    out = _output_dir(cfg)
    try:
        res = run_experiment(cfg, out)
    except OSError as exc:
        raise CliError("io", f"cannot write outputs to {out}: {exc}", EXIT_RUNTIME) from None
    f = res.final
    print(f"wrote {out}/metrics.csv ({len(res.history) - 1} rounds, {res.wall_time:.1f}s)")
    print(f"final base={f.base_acc:.4f} novel={f.novel_acc:.4f} hm={f.hm:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import LOSSES, TOLERANCE, run_checks
    which = LOSSES if args.which == "all" else (args.which,)
    results = run_checks(which, n=args.n, seed=args.seed)
    for r in results:
        print(f"{r.which:8s} max_rel_err={r.worst:.3e} {'ok' if r.passed else 'FAIL'}")
    if all(r.passed for r in results):
        return EXIT_OK
    print(f"error: threshold: relative error above {TOLERANCE:g}", file=sys.stderr)
    return EXIT_THRESHOLD


def cmd_partition(args) -> int:
    cfg = _load(args.config)
    task = generate_synthetic(replace(cfg.data, seed=cfg.seed))
    shards = partition(task.train.restrict(task.base), cfg.partition, cfg.seed)
    sys.stdout.write(partition_counts_csv(shards))
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import run_experiment, variant_config
    cfg = _load(args.config)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not names:
        raise CliError("args", "--variants is empty", EXIT_VALIDATION)
    configs = {}
    for name in names:
        try:
            configs[name] = variant_config(cfg, name)
            configs[name].validate()
        except (KeyError, ConfigError, ValueError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
            raise CliError("config", f"variant {name}: {msg}", EXIT_VALIDATION) from None
    width = max(len(n) for n in names)
    print(f"{'variant':{width}s}  base    novel   hm")
    failed = 0
    for name, vcfg in configs.items():
        try:
            f = run_experiment(vcfg).final
        except Exception as exc:  # one failing variant must not hide the rest
            failed += 1
            print(f"{name:{width}s}  error: {type(exc).__name__}: {exc}")
            continue
        print(f"{name:{width}s}  {f.base_acc:.4f}  {f.novel_acc:.4f}  {f.hm:.4f}")
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualfed", description="Decoupled dual-encoder federated simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment and write metrics, summary and checkpoints")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    g = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    g.add_argument("--which", default="all",
                   choices=["all", "ce", "grpo", "dr_grpo", "gmpo", "dapo", "liteppo", "text"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-n", type=int, default=50, help="instances per loss")
    g.set_defaults(func=cmd_gradcheck)
    pa = sub.add_parser("partition", help="print per-client class counts as CSV")
    pa.add_argument("config")
    pa.set_defaults(func=cmd_partition)
    c = sub.add_parser("compare", help="run several variants with shared seeds")
    c.add_argument("config")
    c.add_argument("--variants", required=True, help="comma separated names or key=value overrides")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
