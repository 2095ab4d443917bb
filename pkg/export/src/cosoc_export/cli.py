"""CLI: apply a crop plan to an image directory and write a feature store.

Exit codes mirror the primary tool: 0 success, 1 I/O, 2 validation/data,
3 internal.
"""

from __future__ import annotations

import argparse
import json
import sys

from cosoc.crops import CropPlan
from cosoc.errors import CosocError, SchemaError

from .export import ExportManifest, export_features, verify_roundtrip

EXIT_OK = 0
EXIT_IO = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosoc-export",
        description="Embed planned crops of an image directory into a cosoc feature store.",
    )
    parser.add_argument("--images", required=True, help="image directory")
    parser.add_argument("--classes", required=True, help="JSON mapping class -> image ids")
    parser.add_argument("--plan", required=True, help="crop plan JSON (cosoc crop-plan)")
    parser.add_argument("--model", default="mean-rgb",
                        help="builtin plugin name or module:callable")
    parser.add_argument("--out", required=True, help="output store directory")
    parser.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    parser.add_argument("--skip-verify", action="store_true",
                        help="do not reload the written store for validation")
    return parser


def run(args: argparse.Namespace) -> int:
    with open(args.classes, "r", encoding="utf-8") as fh:
        classes = json.load(fh)
    if not isinstance(classes, dict):
        raise SchemaError("--classes must hold a JSON object of class -> image ids")
    with open(args.plan, "r", encoding="utf-8") as fh:
        plan = CropPlan.from_json(json.load(fh))
    manifest = ExportManifest(
        images_dir=args.images,
        classes={str(k): list(v) for k, v in classes.items()},
        plan=plan,
        model=args.model,
        out=args.out,
        batch_size=args.batch_size,
    )
    store = export_features(manifest)
    if not args.skip_verify:
        ok, error = verify_roundtrip(args.out)
        if not ok:
            print(f"round-trip verification failed: {error}", file=sys.stderr)
            return EXIT_DATA
    print(f"wrote {store.total_crops()} crop features "
          f"({len(store.classes)} classes, dim {store.dim}) to {args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except CosocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
