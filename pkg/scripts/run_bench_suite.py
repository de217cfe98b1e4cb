"""Train the full synthetic suite and print the gain table and trend checks.

    python scripts/run_bench_suite.py --out runs/bench [--jobs 4]

Equivalent to ``crl bench-suite``; finished runs in --out are reused.
"""

import argparse
import json
import logging

from crl import bench

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/bench")
    ap.add_argument("--jobs", type=int, default=bench.default_jobs())
    ap.add_argument("--seeds", type=int, nargs="+", default=list(bench.SUITE_SEEDS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    crit = bench.run_suite(args.out, seeds=tuple(args.seeds), jobs=args.jobs)
    print(open(f"{args.out}/gains.txt").read())
    print(json.dumps(crit, indent=2, sort_keys=True))
