"""Command line entry point: ``suma-lab <subcommand> --config cfg.yaml --out runs/x``.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 failed --check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigInvalid, load_with_overrides
from .pipeline import LockHeld, Run, StageFailed, check_report, requirements

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_CHECK = 0, 2, 3, 4

COMMANDS = {
    "pretrain": requirements("pretrain"),
    "construct": requirements("construct"),
    "eliminate": requirements("eliminate"),
    "erase": requirements("eliminate"),
    "attack": requirements("attack"),
    "eval": requirements("eval"),
    "ablate": requirements("construct"),
    "report": requirements("report"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="suma-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", default=None, help="YAML run config (defaults if omitted)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the global seed")
        s.add_argument("--stage-override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. erasure.lambda_reg=0 (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "ablate":
            s.add_argument("--preset", action="append", default=None,
                           help="ablation preset (repeatable); defaults to the config list")
        if name == "report":
            s.add_argument("--check", action="store_true",
                           help="exit 4 if the headline acceptance rows fail")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_with_overrides(args.config, args.stage_override, args.seed)
        run = Run(cfg, args.out)
        ablations = ()
        if args.command == "ablate":
            ablations = cfg.ablations if args.preset is None else args.preset
            if not ablations:
                raise ConfigInvalid("ablations", "empty preset list")
        ran = run.execute(COMMANDS[args.command], ablations)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageFailed, LockHeld) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for stage, status in ran.items():
        print(f"{stage}: {status}")
    if args.command == "report" and args.check:
        report = json.loads(run.path("report.json").read_text())
        rows = check_report(report)
        for name, ok, detail in rows:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        if not all(ok for _, ok, _ in rows):
            return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
