"""Regenerate the frozen oracle fixture.

Runs the exact CNML oracle on a tiny hand-picked instance through both
optimizer routes (restarted Adam and L-BFGS-B), requires them to agree to
TV <= 0.01 at every query, and freezes the Adam-route values plus the
certification distances.

Usage: python3 scripts/make_golden_fixture.py
"""

import json
import os

import numpy as np

from nemo_mbo import cnml as cn
from nemo_mbo.bench import OfflineDataset, save_dataset
from nemo_mbo.quantization import build_scheme

HERE = os.path.dirname(os.path.abspath(__file__))
FIXTURE_DIR = os.path.join(HERE, "..", "tests", "fixtures")

X = np.array([[-1.0], [0.0], [1.0]])
Y = np.array([0.2, 0.8, 0.4])
K = 4
QUERIES = [-2.0, 0.0, 0.5, 2.0]
ORACLE = cn.OracleConfig(hidden=(8,), restarts=3, max_steps=2000, seed=0)


def main():
    os.makedirs(FIXTURE_DIR, exist_ok=True)
    scheme = build_scheme(np.array([0.0, 1.0]), K)
    save_dataset(OfflineDataset(X, Y, name="golden"),
                 os.path.join(FIXTURE_DIR, "golden_data.csv"))
    entries = []
    for xq in QUERIES:
        adam = cn.exact_cnml_oracle(X, Y, [xq], scheme, ORACLE)
        lbfgs = cn.exact_cnml_oracle(
            X, Y, [xq], scheme,
            cn.OracleConfig(hidden=(8,), restarts=3, seed=0, optimizer="lbfgs"),
        )
        tv = cn.tv_distance(adam.pmf.probs, lbfgs.pmf.probs)
        if tv > 0.01:
            raise SystemExit(
                f"certification failed at x={xq}: optimizer routes differ, TV={tv:.4f}"
            )
        report = cn.regret_report(adam)
        entries.append(
            {
                "x": xq,
                "pmf": adam.pmf.probs.tolist(),
                "pmf_lbfgs": lbfgs.pmf.probs.tolist(),
                "certification_tv": tv,
                "regret": adam.regret,
                "bound": report.bound,
                "max_functional_regret": float(report.functional_regrets.max()),
            }
        )
    fixture = {
        "scheme": scheme.to_dict(),
        "oracle": {
            "hidden": list(ORACLE.hidden),
            "restarts": ORACLE.restarts,
            "max_steps": ORACLE.max_steps,
            "seed": ORACLE.seed,
            "optimizer": ORACLE.optimizer,
        },
        "X": X.tolist(),
        "y": Y.tolist(),
        "queries": entries,
    }
    path = os.path.join(FIXTURE_DIR, "golden_oracle.json")
    with open(path, "w") as fh:
        json.dump(fixture, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}")
    for e in entries:
        print(f"  x={e['x']:+.2f} regret={e['regret']:+.4f} "
              f"bound={e['bound']:.4f} tv={e['certification_tv']:.2e}")


if __name__ == "__main__":
    main()
