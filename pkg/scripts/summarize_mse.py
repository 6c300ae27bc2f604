"""Print MSE and coverage per scenario and beta from a simulation CSV, one column per method."""

import argparse
import csv
from collections import defaultdict


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv")
    ap.add_argument("--metric", default="mse", choices=["bias_sq", "mse", "coverage"])
    args = ap.parse_args()
    table = defaultdict(dict)
    methods = []
    with open(args.csv, newline="") as fh:
        for row in csv.DictReader(fh):
            table[(row["scenario"], float(row["beta"]))][row["method"]] = float(row[args.metric])
            if row["method"] not in methods:
                methods.append(row["method"])
    print(f"{'scenario':<26}{'beta':>7}" + "".join(f"{m:>10}" for m in methods))
    for (scen, beta), vals in table.items():
        cells = "".join(f"{vals[m]:>10.4f}" if m in vals else f"{'':>10}" for m in methods)
        print(f"{scen:<26}{beta:>7.3f}{cells}")


if __name__ == "__main__":
    main()
