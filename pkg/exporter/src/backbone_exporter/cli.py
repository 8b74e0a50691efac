"""Command line entry point: one architecture in, one frozen graph out."""

from __future__ import annotations

import argparse
import sys

from .errors import InputError, ValidationError
from .export import ExportSpec, export_backbone
from .trace import ARCHITECTURES


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation failures (exit 1)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="backbone-export",
        description="Export a torchvision backbone as a frozen feature-extractor graph.",
    )
    parser.add_argument("--arch", required=True, choices=sorted(ARCHITECTURES))
    parser.add_argument("--out", required=True, help="output model path")
    parser.add_argument(
        "--weights",
        choices=["pretrained", "random"],
        default="pretrained",
        help="pretrained needs downloadable weights; random is seeded initialization",
    )
    parser.add_argument("--seed", type=int, default=0, help="seed for --weights random")
    return parser


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    if argv and argv[0] == "export":  # tolerated subcommand-style spelling
        argv = argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = export_backbone(
            ExportSpec(
                architecture=args.arch,
                out_path=args.out,
                weights=args.weights,
                seed=args.seed,
            )
        )
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {result.spec.out_path} ({args.arch}, feature_dim {result.feature_dim}, "
        f"weights {result.weights_desc})"
    )
    print(f"sidecar {result.spec.sidecar_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
