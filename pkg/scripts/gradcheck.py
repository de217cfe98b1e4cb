"""Finite-difference check of every loss on random small networks; prints worst errors.

    python scripts/gradcheck.py [n_configs]
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from helpers import COMPONENTS, gradcheck_case  # noqa: E402

if __name__ == "__main__":
    n_cfg = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    worst = dict.fromkeys(COMPONENTS, 0.0)
    for s in range(n_cfg):
        res = gradcheck_case(s, ("class", "instance")[s % 2], n=8, n_attr=2, step=1e-5,
                             feature_dim=12, widths=(10, 17), branch=(6, 11))
        for name, (err, scale, _) in res.items():
            if scale > 1e-6:
                worst[name] = max(worst[name], err)
    for name, err in worst.items():
        print(f"{name:>18}  {err:.2e}")
