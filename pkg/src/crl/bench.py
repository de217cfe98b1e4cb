"""The synthetic benchmark suite: every method on the four-attribute imbalance ladder.

Runs plain CE, the six CRL variants and the three classical baselines for each seed,
then checks the expected trends against the CE baseline.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .harness import (BaselineConfig, ExperimentConfig, RunRecord, build_data, compare, run_dir_for,
                      train_one, write_comparison)

log = logging.getLogger(__name__)

SUITE_SEEDS = (0, 1, 2)
CRL_METHODS = tuple(f"crl-{m}-{v}" for m in ("c", "i") for v in ("r", "a", "d"))
DEFAULT_METHOD = "crl-i-r"


def suite_configs(out_dir, base: ExperimentConfig | None = None) -> list[ExperimentConfig]:
    """One config per method, sharing data, model and optimiser settings with ``base``."""
    base = base or ExperimentConfig()
    loss = {"r": "crl-r", "a": "crl-a", "d": "crl-d"}
    mining = {"c": "class", "i": "instance"}
    cfgs = [replace(base, output_dir=str(out_dir), loss=replace(base.loss, name="ce"),
                    baseline=BaselineConfig())]
    for m in CRL_METHODS:
        _, lvl, var = m.split("-")
        cfgs.append(replace(base, output_dir=str(out_dir),
                            loss=replace(base.loss, name=loss[var], mining=mining[lvl]), baseline=BaselineConfig()))
    for mode in ("oversample", "downsample", "cost-sensitive"):
        cfgs.append(replace(base, output_dir=str(out_dir), loss=replace(base.loss, name="ce"),
                            baseline=BaselineConfig(mode=mode, ref_attr=base.baseline.ref_attr)))
    return [c.validate() for c in cfgs]


def _run(cfg: ExperimentConfig, seed: int) -> RunRecord:
    run_dir = run_dir_for(cfg, seed)
    record_path = run_dir / "record.json"
    if record_path.is_file():
        rec = RunRecord.load(record_path)
        if rec.config_hash == cfg.hash():
            log.info("reusing %s", record_path)
            return rec
    train, test = build_data(cfg.data)
    return train_one(cfg, seed, train, test, run_dir)


def run_suite(out_dir, seeds=SUITE_SEEDS, jobs: int = 1, base: ExperimentConfig | None = None) -> dict:
    """Train every (method, seed) pair, write gains and criteria, return the criteria dict.

    Finished runs whose record matches the current config hash are reused.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, s) for cfg in suite_configs(out, base) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            records = list(pool.map(_run, *zip(*tasks)))
    else:
        records = [_run(cfg, s) for cfg, s in tasks]
    comp = compare(records, baseline="ce")
    write_comparison(comp, out)
    crit = check_criteria(comp)
    (out / "criteria.json").write_text(json.dumps(crit, indent=2, sort_keys=True))
    return crit


def check_criteria(comp) -> dict:
    """Trend checks on a suite comparison (all gains are median-over-seeds vs CE)."""
    base = comp.per_seed["ce"][0]
    ratios = [a.ratio_value for a in base.attributes]
    order = sorted(range(len(ratios)), key=lambda j: (ratios[j], j))
    hardest = order[-1]

    gains = [comp.gain(DEFAULT_METHOD, j) for j in order]
    rho = float(spearmanr(np.arange(len(gains)), gains).statistic) if np.ptp(gains) > 0 else float("nan")
    trend = {
        "gain_hardest": gains[-1],
        "gains_by_ratio": dict(zip([base.attributes[j].imbalance_ratio for j in order], gains)),
        "spearman": rho,
        "pass": bool(gains[-1] > 0 and rho > 0),
    }

    variants = {m: comp.average_gain(m) for m in CRL_METHODS}
    variant_check = {"average_gain": variants, "failing": [m for m, g in variants.items() if g < 0],
                     "pass": all(g >= 0 for g in variants.values())}

    med = {m: float(np.median([r.attributes[hardest].mean_sensitivity for r in reps]))
           for m, reps in comp.per_seed.items()}
    down, ce, over = med.get("downsample"), med.get("ce"), med.get("oversample")
    if down is None:
        baseline_check = {"pass": False, "warning": "no downsample runs"}
    else:
        worse = down < ce or (over is not None and down < over)
        tie = not worse and (down == ce or down == over)
        baseline_check = {"downsample": down, "ce": ce, "oversample": over,
                          "pass": bool(worse), "warning": "tie" if tie else ""}
    return {"trend": trend, "variants": variant_check, "baselines": baseline_check,
            "hardest_attr": hardest, "seeds": len(comp.per_seed["ce"])}


def default_jobs() -> int:
    return max(1, min(len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else 1, 8))
