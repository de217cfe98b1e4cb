"""Summarise a ``--dump-mining`` directory: how often each attribute yields anchors.

    crl train --config configs/smoke.toml --dump-mining runs/dump
    python scripts/mining_stats.py runs/dump
"""

import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

if __name__ == "__main__":
    files = sorted(Path(sys.argv[1]).glob("*.json"))
    with_anchor = defaultdict(int)
    minority_size = defaultdict(list)
    for f in files:
        d = json.loads(f.read_text())
        prof = d["profile"]
        for j, (hist, mins) in enumerate(zip(prof["histograms"], prof["minority"])):
            counts = [hist[c] for c in mins]
            minority_size[j].append(sum(counts))
            with_anchor[j] += any(c >= 2 for c in counts)
    print(f"{len(files)} batches")
    print("attr  batches with anchors  mean minority count")
    for j in sorted(minority_size):
        print(f"{j:>4}  {with_anchor[j] / len(files):>19.1%}  {np.mean(minority_size[j]):>19.2f}")
