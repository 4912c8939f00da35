"""Figure rendering front end.

``figures <kind> --in <path> --out <image>`` reads a sweep CSV (or, for
``psd_iterations``, the directory written by the bench's ``run --out DIR
--dump-iq``) and writes one image.  Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from figures.data import FigureError
from figures.render import KINDS, FigureSpec, render


class _Parser(argparse.ArgumentParser):
    # Usage problems are validation errors: exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="figures", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="source", required=True,
                        help="sweep CSV path; IQ dump directory for psd_iterations")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--title", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    source = Path(args.source)
    if not source.exists():
        print(f"error: input {source} does not exist", file=sys.stderr)
        return 1
    try:
        spec = FigureSpec(kind=args.kind, source=source, out_path=args.out,
                          title=args.title)
        render(spec)
    except FigureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
