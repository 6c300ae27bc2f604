"""Run one of the Monte Carlo presets and write CSV results under results/.

    python scripts/run_simulation.py figure1 --reps 200
    python scripts/run_simulation.py table1 --reps 500 --threads 8
"""

import argparse
import sys
from pathlib import Path

from komsate import cli

PRESETS = ("figure1", "figure2", "figure3", "table1")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("preset", choices=PRESETS)
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=20190401)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--outdir", default="results")
    ap.add_argument("--record-runtime", action="store_true")
    args = ap.parse_args()
    out = Path(args.outdir) / f"{args.preset}.csv"
    argv = ["simulate", f"--{args.preset}", "--reps", str(args.reps), "--seed", str(args.seed),
            "-o", str(out), "--verbose"]
    if args.threads:
        argv += ["--threads", str(args.threads)]
    if args.record_runtime:
        argv.append("--record-runtime")
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
