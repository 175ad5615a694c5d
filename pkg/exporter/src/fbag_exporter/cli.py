"""Command-line entry point: encode one grid into one feature bag."""

from __future__ import annotations

import argparse
import logging
import sys

from .encoders import KNOWN_ENCODERS, ExporterError, resolve_spec
from .export import DEFAULT_BATCH, export_bag

logger = logging.getLogger("fbag_exporter")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; keep 2 for missing inputs instead.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"fbag-export: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fbag-export",
        description="Run a patch encoder over a tile grid and write a .fbag file.",
    )
    parser.add_argument("--image", required=True, help="source image (PNG/TIFF)")
    parser.add_argument("--grid", required=True, help="patch grid JSON from tiling")
    parser.add_argument("--out", required=True, help="output .fbag path")
    parser.add_argument(
        "--encoder",
        default="null",
        choices=sorted(KNOWN_ENCODERS),
        help="encoder name (default: null)",
    )
    parser.add_argument(
        "--dim",
        type=int,
        default=None,
        help="expected feature width; must match the encoder's output",
    )
    parser.add_argument(
        "--batch",
        type=int,
        default=DEFAULT_BATCH,
        help=f"patches per inference batch (default: {DEFAULT_BATCH})",
    )
    parser.add_argument(
        "--seed", type=int, default=0, help="seed for the null encoder weights"
    )
    return parser


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = resolve_spec(args.encoder, dim=args.dim)
        out = export_bag(
            args.image,
            args.grid,
            args.out,
            spec,
            seed=args.seed,
            batch_size=args.batch,
        )
    except FileNotFoundError as exc:
        print(f"fbag-export: {exc}", file=sys.stderr)
        return 2
    except ExporterError as exc:
        print(f"fbag-export: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
