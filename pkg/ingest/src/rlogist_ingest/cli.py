"""Command-line entry point: `rlogist-ingest convert <in> <out>` and
`rlogist-ingest validate <in>`.

Exit codes: 0 success, 1 usage error or conversion with defective slides,
2 unexpected runtime failure. validate always exits 0 when the directory is
readable — defects are report entries, not process failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from . import core


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="rlogist-ingest",
                     description="Feature-matrix to slide-bundle converter")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")
    p_convert = sub.add_parser("convert")
    p_convert.add_argument("input_dir")
    p_convert.add_argument("output_dir")
    p_validate = sub.add_parser("validate")
    p_validate.add_argument("input_dir")
    return parser


def cmd_convert(args) -> int:
    manifest_path, report = core.convert(args.input_dir, args.output_dir)
    print(json.dumps(report.to_json(), indent=1))
    if report.n_errors:
        print(f"convert: {report.n_errors} slide(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_validate(args) -> int:
    report = core.validate(args.input_dir)
    print(json.dumps(report.to_json(), indent=1))
    return 0


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "convert":
            return cmd_convert(args)
        if args.command == "validate":
            return cmd_validate(args)
        parser.print_help(sys.stderr)
        return 1
    except (UsageError, core.IngestError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
