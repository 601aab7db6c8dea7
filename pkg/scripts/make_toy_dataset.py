#!/usr/bin/env python3
"""Build the deterministic toy dataset (images, sketches, segmentations)."""

import argparse
from pathlib import Path

from sketchmod.toy_data import build_toy_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--pairs", type=int, default=16, help="training scenes")
    parser.add_argument("--test", type=int, default=4, help="test scenes")
    parser.add_argument("--image-size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    manifest = build_toy_dataset(
        args.out_dir, n_pairs=args.pairs, n_test=args.test,
        image_size=args.image_size, seed=args.seed,
    )
    print(f"wrote {manifest}")


if __name__ == "__main__":
    main()
