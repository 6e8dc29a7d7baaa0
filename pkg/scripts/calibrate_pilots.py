#!/usr/bin/env python3
"""Regenerate the pilot-calibrated thresholds in ``src/bmclab/data/pilot_bands.json``.

Pilot runs use the same models as the committed configs but their own
seeds (never the acceptance seed), so the thresholds are fixed before the
acceptance runs are drawn.

    python3 scripts/calibrate_pilots.py            # full pilot (about 3 minutes)
    python3 scripts/calibrate_pilots.py --dry-run  # print, do not write
"""
from __future__ import annotations

import argparse
import json
import math
from pathlib import Path

import numpy as np

from bmclab import convergence_lab as lab
from bmclab.config import load

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
TARGET = ROOT / "src" / "bmclab" / "data" / "pilot_bands.json"
PILOT_SEED = 90210
TRAJECTORIES = 10_000


def positivity_band() -> dict:
    cfg = load(CONFIGS / "positivity.json", seed=PILOT_SEED)
    cfg.experiment.trajectories = TRAJECTORIES
    model = lab.build_model(cfg)
    e = cfg.experiment
    sim = lab.simulate(model, e.horizon, e.trajectories, cfg.seed, e.cap)
    wN = sim.matrix("w")[:, e.horizon]
    n = wN.size
    k = int(np.sum(wN < e.epsilon))
    p = k / n
    # two-sample rule: acceptance and pilot estimates each carry one SE
    se = math.sqrt(max(k, 1) / n * (1 - p) / n)
    return {
        "value": p + 3 * math.sqrt(2) * se,
        "statistic": f"fraction of W_{e.horizon} below {e.epsilon!r}",
        "pilot_estimate": p,
        "pilot_count": k,
        "rule": "pilot fraction + 3*sqrt(2)*SE, SE from max(count, 1)",
        "config": "configs/positivity.json",
        "seed": PILOT_SEED,
        "trajectories": n,
    }


def cauchy_band() -> dict:
    cfg = load(CONFIGS / "boundary.json", seed=PILOT_SEED + 1)
    cfg.experiment.trajectories = TRAJECTORIES
    cfg.experiment.pilot_band = None
    rep = lab.boundary_limit_study(cfg)
    gaps = np.array(rep.terminal["cauchy_gap"])
    return {
        "value": float(np.quantile(gaps, 0.99)),
        "statistic": f"range of a_n over the last {cfg.experiment.cauchy_window} steps before N={cfg.experiment.horizon}",
        "pilot_quantiles": {str(q): float(np.quantile(gaps, q)) for q in (0.5, 0.9, 0.95, 0.99)},
        "rule": "0.99 quantile of pilot gaps; acceptance requires >= bc_fraction of trajectories below it",
        "config": "configs/boundary.json",
        "seed": PILOT_SEED + 1,
        "trajectories": int(gaps.size),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dry-run", action="store_true")
    args = ap.parse_args()
    bands = {
        "positivity_fraction_below_1e-3": positivity_band(),
        "cauchy_gap_depth2": cauchy_band(),
    }
    doc = {"generator": "scripts/calibrate_pilots.py", "bands": bands}
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    print(text)
    if not args.dry_run:
        TARGET.write_text(text, encoding="utf-8")
        print(f"wrote {TARGET}")


if __name__ == "__main__":
    main()
