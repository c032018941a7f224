"""patchlens-extract: dataset directory -> embedding container."""

from __future__ import annotations

import argparse
import logging
import sys

from .extract import ExtractionSpec, extract


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="patchlens-extract",
        description="export frozen-backbone embeddings to an .emb container")
    parser.add_argument("--backbone", required=True,
                        help="toy-vit, toy-vit-noreg, or a dinov2 hub id")
    parser.add_argument("--data", required=True, help="dataset root directory")
    parser.add_argument("--split", required=True, help="split subdirectory name")
    parser.add_argument("--out", required=True, help="embedding file to write")
    parser.add_argument("--mask-dir", default=None,
                        help="pixel-mask tree mirroring the dataset layout")
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("--batch-size", type=int, default=8)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    spec = ExtractionSpec(backbone=args.backbone, data_root=args.data,
                          split=args.split, out_path=args.out,
                          mask_dir=args.mask_dir, image_size=args.image_size,
                          batch_size=args.batch_size)
    try:
        es = extract(spec)
    except (ValueError, RuntimeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"wrote {spec.out_path} ({es.n} samples)")
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
