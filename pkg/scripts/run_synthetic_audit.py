#!/usr/bin/env python3
"""End-to-end audit demo on synthetic embeddings.

Generates two oracle tables (one with site/class structure for the biased
downstream experiment, one with five sites for the remaining analyses) and
runs every audit command on them. All outputs land under --out.
"""

import argparse
import sys
from pathlib import Path

from embaudit.cli import main as cli


def run(*args):
    argv = [str(a) for a in args]
    print("+ embaudit " + " ".join(argv), flush=True)
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="audit-demo", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    five_site = out / "five-site.emb"
    run("synth", "--out", five_site, "--seed", args.seed,
        "--dims", 64, "--n-sites", 5, "--n-classes", 2,
        "--patients-per-site", 20, "--slides-per-patient", 1,
        "--patches-per-slide", 200,
        "--site-strength", 3, "--class-strength", 1,
        "--slide-strength", 0.25, "--noise", 0.5)

    run("site-predict", "--input", five_site, "--out", out / "exp1-site-prediction",
        "--seed", args.seed, "--budget-per-site", 4000)
    run("distances", "--input", five_site, "--out", out / "exp3-distances",
        "--seed", args.seed, "--n-per-group", 100)
    run("reduced", "--input", five_site, "--out", out / "exp4-reduced",
        "--seed", args.seed, "--budget-per-site", 4000)
    run("separability", "--input", five_site, "--out", out / "exp5-separability",
        "--seed", args.seed, "--n-components", 30)

    # the biased downstream task needs two sites and slide-level capacity
    two_site = out / "two-site.emb"
    run("synth", "--out", two_site, "--seed", args.seed + 1,
        "--dims", 32, "--n-sites", 2, "--n-classes", 2,
        "--patients-per-site", 7, "--slides-per-patient", 2,
        "--patches-per-slide", 5000,
        "--site-strength", 4, "--class-strength", 1,
        "--slide-strength", 0.25, "--noise", 0.25)
    run("bias", "--input", two_site, "--out", out / "exp2-bias",
        "--seed", args.seed, "--repetitions", 5)

    print(f"\nAll reports under {out}/", flush=True)


if __name__ == "__main__":
    main()
