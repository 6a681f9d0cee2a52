"""Command line entry point: run scenarios, self-test, list extensions."""

from __future__ import annotations

import argparse
import sys

from .errors import BridgeError, FatalInvariantError
from .runtime import Runtime
from .scenario import ScenarioConfig, emit_stats, run_scenario
from .selftest import run_selftest


def _runtime(ext_files):
    rt = Runtime(demo=True)
    for path in ext_files or ():
        with open(path, encoding="utf-8") as fh:
            rt.ext.register_text(fh.read())
    return rt


def cmd_run(args):
    try:
        with open(args.file, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        rt = _runtime(args.ext)
    except (OSError, BridgeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    config = ScenarioConfig(seed=args.seed, golden=args.golden, poller=args.poller)
    report = run_scenario(text, config, rt)
    for line in report.lines:
        print(line)
    if args.stats or args.golden:
        if args.golden:
            print("--- stats")
        print(emit_stats(report, golden=args.golden))
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
    return report.exit_code


def cmd_selftest(args):
    try:
        results = run_selftest(args.iterations, args.seed)
    except FatalInvariantError as exc:
        print(f"FAIL invariant violation: {exc}")
        return 2
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 2


def cmd_list_extensions(args):
    try:
        rt = _runtime(args.ext)
    except (OSError, BridgeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, loaded in rt.ext.loaded.items():
        d = loaded.definition
        print(f"{name}: {d.doc or ''}".rstrip())
        for f in d.functions:
            print(f"  fn {f.name}({f.format}) -> {f.behavior}")
        for t in d.types:
            print(f"  type {t.name} ({'static' if t.static else 'heap'})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="rtbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario file")
    run.add_argument("file")
    run.add_argument("--seed", type=int, default=0, help="seed for randomized commands")
    run.add_argument("--golden", action="store_true", help="deterministic output for golden comparison")
    run.add_argument("--stats", action="store_true", help="print counters after the output")
    run.add_argument("--ext", action="append", metavar="FILE", help="extra extension descriptor file")
    run.add_argument("--poller", action="store_true", help="finalize from a background poller thread")
    run.set_defaults(func=cmd_run)

    st = sub.add_parser("selftest", help="run built-in consistency checks")
    st.add_argument("--iterations", type=int, default=200)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_selftest)

    ls = sub.add_parser("list-extensions", help="show registered extension modules")
    ls.add_argument("--ext", action="append", metavar="FILE")
    ls.set_defaults(func=cmd_list_extensions)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
