#!/usr/bin/env python3
"""Reload a matching dataset and check that each manifest transform maps
cloud_i onto cloud_j up to the generator's jitter.

usage: check_manifest.py DATASET_DIR
Residuals are compared against 5 sigma per coordinate, sigma being the
largest jitter the pair config allows, plus the 9-digit CSV rounding.
"""
import json
import sys
from pathlib import Path

import numpy as np


def load_xyz(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, usecols=(0, 1, 2), ndmin=2)


def main(argv):
    if len(argv) != 2:
        print(__doc__, file=sys.stderr)
        return 1
    root = Path(argv[1])
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["task"] != "matching":
        print("not a matching dataset")
        return 1
    pair = manifest["pair"]
    extent = manifest["scene"]["extent"]
    # horizontal radius is bounded by the floor half-diagonal
    sigma = pair["jitter"] + pair["range_jitter"] * 1.5 * np.sqrt(2.0) * 2.0 * extent
    tol = 5.0 * sigma + 1e-6
    worst = 0.0
    for split in ("train", "eval"):
        for item in manifest[split]:
            xi = load_xyz(root / item["cloud_i"])
            xj = load_xyz(root / item["cloud_j"])
            src = np.loadtxt(root / item["source"], skiprows=1, dtype=np.int64, ndmin=1)
            t = item["transform"]
            r = np.array(t["rotation"]).reshape(3, 3)
            pred = t["scale"] * xi[src] @ r.T + np.array(t["translation"])
            res = np.abs(pred - xj).max()
            worst = max(worst, res)
            if res > tol:
                print(f"{item['id']}: residual {res:.3g} exceeds {tol:.3g}")
                return 1
    print(f"ok: max residual {worst:.3g} (tolerance {tol:.3g})")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
