#!/usr/bin/env python3
"""Create tiny synthetic H&E-like slide images and run the patch pipeline.

Each slide is a grid of two-stain tissue tiles with a glass margin; the
pipeline tiles them, drops background, and writes raw plus normalized patch
variants with a manifest ready for a feature extractor.
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from embaudit.cli import main as cli
from embaudit.stainproc import od_to_rgb


def he_tile(rng, stain_matrix, size=256):
    m = stain_matrix / np.linalg.norm(stain_matrix, axis=0)
    conc = np.zeros((size * size, 2))
    kind = rng.random(size * size)
    pure_a, pure_b = kind < 0.15, (kind >= 0.15) & (kind < 0.3)
    mixed = ~(pure_a | pure_b)
    conc[pure_a, 0] = rng.uniform(0.6, 1.4, pure_a.sum())
    conc[pure_b, 1] = rng.uniform(0.7, 1.4, pure_b.sum())
    conc[mixed, 0] = rng.uniform(0.5, 1.2, mixed.sum())
    conc[mixed, 1] = rng.uniform(0.5, 1.2, mixed.sum())
    return od_to_rgb(conc @ m.T).reshape(size, size, 3)


def make_slide(rng, stain_matrix, tiles_x=3, tiles_y=2):
    h, w = 256 * tiles_y, 256 * (tiles_x + 1)
    slide = np.full((h, w, 3), 255, dtype=np.uint8)  # glass margin on the right
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            slide[ty * 256:(ty + 1) * 256, tx * 256:(tx + 1) * 256] = he_tile(rng, stain_matrix)
    return slide


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="stain-demo")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-slides", type=int, default=2)
    args = parser.parse_args()
    out = Path(args.out)
    slides = out / "slides"
    slides.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    # two sites with slightly different stain chemistry, like two scanners
    stains = [
        np.column_stack([[0.45, 0.55, 0.75], [0.60, 0.75, 0.30]]),
        np.column_stack([[0.50, 0.50, 0.72], [0.55, 0.80, 0.28]]),
    ]
    for i in range(args.n_slides):
        pixels = make_slide(rng, stains[i % len(stains)])
        Image.fromarray(pixels).save(slides / f"slide{i:02d}.png")

    code = cli(["stain", "--input", str(slides), "--out", str(out / "patches"),
                "--seed", str(args.seed)])
    raise SystemExit(code)


if __name__ == "__main__":
    main()
