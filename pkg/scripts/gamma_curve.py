"""Print the per-level fusion weights from gamma logs written by `facediff restore`."""

import argparse
import csv
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("directory")
    ap.add_argument("--stem", help="only this image")
    ap.add_argument("--every", type=int, default=10, help="print every k-th step")
    args = ap.parse_args()
    pattern = f"{args.stem or '*'}_gamma_level*.csv"
    for path in sorted(Path(args.directory).glob(pattern)):
        with open(path) as f:
            rows = list(csv.DictReader(f))
        print(f"== {path.name}")
        print(f"{'t':>5} {'gamma1':>10} {'gamma2':>10} {'gamma3':>10}")
        for row in rows[::args.every] + ([rows[-1]] if rows and (len(rows) - 1) % args.every else []):
            print(f"{row['t']:>5} {float(row['gamma1']):10.4f} {float(row['gamma2']):10.4f} "
                  f"{float(row['gamma3']):10.4f}")


if __name__ == "__main__":
    main()
