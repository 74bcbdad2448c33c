"""Command-line front end.

    enclavesim run SCENARIO [SCENARIO ...] [--trace OUT]
    enclavesim attack [--seed N]
    enclavesim bench [--pages 16,64,256,1024] [--reps 30] [--seed N]
    enclavesim fuzz [--profile mixed|stack|lifecycle|create-fail|sensitivity]
                    [--ops N] [--seed N]
    enclavesim pack-image --mem-pages N --channel-pages N --code FILE -o OUT
                    [--cmds 1,2,3]

Exit status 0 means every check that ran held; 1 means a violation,
containment failure or fuzz divergence.
"""
from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path
from typing import List, Optional

from ..errors import ScenarioParseError, SimulationError
from ..image import EnclaveImage
from .attacks import format_attack_report, run_attacks
from .bench import run_bench
from .fuzz import (
    fuzz_failed_creates,
    fuzz_lifecycles,
    fuzz_mixed,
    fuzz_stack_ops,
    verify_oracle_sensitivity,
)
from .scenario import ExpectationFailed, parse_scenario, run_scenario


def _cmd_run(args: argparse.Namespace) -> int:
    if args.trace and len(args.scenarios) > 1:
        print("--trace needs exactly one scenario", file=sys.stderr)
        return 2
    status = 0
    for path in args.scenarios:
        text = Path(path).read_text(encoding="utf-8")
        try:
            scenario = parse_scenario(text, name=Path(path).stem)
            result = run_scenario(scenario)
        except (ScenarioParseError, ExpectationFailed) as err:
            print("%s: %s" % (path, err))
            status = 1
            continue
        for line in result.outputs:
            print(line)
        for violation in result.violations:
            print("%s: VIOLATION: %s" % (path, violation))
        if result.violations:
            status = 1
        else:
            print("%s: ok (%d trace events, t=%d)"
                  % (path, len(result.sim.trace.events), result.sim.now()))
        if args.trace:
            result.sim.write_trace(args.trace)
            print("trace written to %s" % args.trace)
    return status


def _cmd_attack(args: argparse.Namespace) -> int:
    results = run_attacks(seed=args.seed)
    print(format_attack_report(results))
    return 0 if all(r.ok for r in results) else 1


def _cmd_bench(args: argparse.Namespace) -> int:
    sizes = tuple(int(s) for s in args.pages.split(","))
    report = run_bench(sizes=sizes, reps=args.reps, seed=args.seed)
    print(report.format())
    ok = (report.deterministic() and report.ordering_holds()
          and report.invoke_constant() and report.teardown_gap_r2() > 0.999)
    return 0 if ok else 1


def _cmd_fuzz(args: argparse.Namespace) -> int:
    if args.profile == "sensitivity":
        outcomes = verify_oracle_sensitivity(seed=args.seed)
        for mode, ok in sorted(outcomes.items()):
            print("%-22s %s" % (mode, "ok" if ok else "FAILED"))
        return 0 if all(outcomes.values()) else 1
    runner = {
        "mixed": fuzz_mixed,
        "stack": fuzz_stack_ops,
        "lifecycle": fuzz_lifecycles,
        "create-fail": fuzz_failed_creates,
    }[args.profile]
    kwargs = {"seed": args.seed}
    if args.ops is not None:
        # the first positional differs in name (ops vs cases) per profile
        report = runner(args.ops, **kwargs)
    else:
        report = runner(**kwargs)
    print(report.format())
    return 0 if report.ok else 1


def _cmd_pack_image(args: argparse.Namespace) -> int:
    code = Path(args.code).read_bytes()
    cmd_ids: tuple = ()
    if args.cmds:
        cmd_ids = tuple(int(c, 0) for c in args.cmds.split(","))
        code = struct.pack("<%dI" % len(cmd_ids), *cmd_ids) + code
    try:
        image = EnclaveImage(args.mem_pages, args.channel_pages, cmd_ids,
                             code)
        packed = image.pack()
        EnclaveImage.parse(packed)  # round trip before writing anything
    except (SimulationError, ValueError, struct.error) as err:
        print("cannot pack: %s" % err, file=sys.stderr)
        return 1
    Path(args.output).write_bytes(packed)
    print("%s: %d bytes, %d+%d pages, %d commands, %d code pages"
          % (args.output, len(packed), image.mem_size_pages,
             image.channel_size_pages, len(cmd_ids), image.code_pages))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enclavesim",
        description="deterministic enclave-isolation simulator and its "
                    "adversarial harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run scenario scripts")
    p.add_argument("scenarios", nargs="+", metavar="SCENARIO")
    p.add_argument("--trace", help="write the JSON-lines event trace here")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("attack", help="run the containment playbook")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("bench", help="measure lifecycle costs")
    p.add_argument("--pages", default="16,64,256,1024",
                   help="comma-separated donation sizes in pages")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("fuzz", help="randomized campaigns")
    p.add_argument("--profile", default="mixed",
                   choices=["mixed", "stack", "lifecycle", "create-fail",
                            "sensitivity"])
    p.add_argument("--ops", type=int, default=None,
                   help="cases/operations to run (profile default if unset)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_fuzz)

    p = sub.add_parser("pack-image", help="build a raw image file")
    p.add_argument("--mem-pages", type=int, required=True)
    p.add_argument("--channel-pages", type=int, required=True)
    p.add_argument("--code", required=True, help="file with the code blob")
    p.add_argument("--cmds", help="comma-separated command ids to prepend")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=_cmd_pack_image)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
