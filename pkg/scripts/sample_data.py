"""Regenerate the packaged sample files, or simulate outcomes for an allocation.

    python scripts/sample_data.py covariates          # src/mcrt/data/outlets.csv
    python scripts/sample_data.py outcomes SCHEME OUT # outcomes for a design run
"""
import sys
from pathlib import Path

import numpy as np

from mcrt import io as mio
from mcrt.rng import make_rng

DATA = Path(__file__).resolve().parents[1] / "src" / "mcrt" / "data"


def covariates(path=DATA / "outlets.csv", seed=20210601):
    rng = make_rng(seed)
    ids = [f"outlet{j:02d}" for j in range(1, 49)]
    region = rng.choice(["A", "B"], size=48)
    volume = rng.gamma(4.0, 5.25, size=48).round(1)
    mrdt = rng.binomial(1, 0.1, size=48)
    rows = [[i, r, repr(float(v)), int(m)] for i, r, v, m in zip(ids, region, volume, mrdt)]
    mio._write(path, {"seed": seed}, ["cluster_id", "region", "volume", "mRDT"], rows)


def outcomes(scheme_path, out_path, seed=7, m=20, effects=(0.4, 0.8)):
    """Patients per outlet with age and a continuous outcome; arm 3 is control."""
    alloc = mio.read_scheme(scheme_path)
    cov = mio.read_cluster_covariates(DATA / "outlets.csv")
    pos = {c: k for k, c in enumerate(cov.ids)}
    X = cov.values[[pos[i] for i in alloc.ids]]
    rng = make_rng(seed)
    rows = []
    for j, (cid, arm) in enumerate(zip(alloc.ids, alloc.labels)):
        gamma = rng.normal(0, 0.5)
        eff = effects[arm - 1] if arm <= len(effects) else 0.0
        for _ in range(m):
            age = rng.normal(35, 10)
            y = 0.5 * X[j, 0] + 0.05 * X[j, 1] + 0.02 * (age - 35) + eff + gamma + rng.normal(0, 2)
            rows.append([cid, repr(float(age)), repr(float(y))])
    mio._write(out_path, {"seed": seed}, ["cluster_id", "age", "y"], rows)


if __name__ == "__main__":
    if sys.argv[1:2] == ["covariates"]:
        covariates()
    elif sys.argv[1:2] == ["outcomes"] and len(sys.argv) == 4:
        outcomes(sys.argv[2], sys.argv[3])
    else:
        sys.exit(__doc__)
