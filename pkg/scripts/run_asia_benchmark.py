#!/usr/bin/env python3
"""Desk-scale asia benchmark: centralized vs federated regimes over seeds.

Writes one run directory per (regime, model, seed) under --out and prints the
aggregated mean +- std table. Example:

    python scripts/run_asia_benchmark.py --out runs/asia --seeds 0 1 2 \
        --models cbm cem --regimes centralized fcm static
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from fedconcept.cli import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/asia")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--models", nargs="+", default=["cbm"],
                        choices=["opaq", "cbm", "cem", "cgm", "c2bm"])
    parser.add_argument("--regimes", nargs="+", default=["centralized", "fcm", "static"],
                        choices=["centralized", "localized", "static", "static-reinit", "fcm"])
    parser.add_argument("--rounds", type=int, default=60)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = out / "config.json"
    config.write_text(json.dumps({
        "dataset": "asia", "rounds": args.rounds, "n_clients": 20,
        "participants_per_round": 10, "join_round": 10, "local_epochs": 2,
        "batch_size": 512, "patience": 10,
    }, indent=2))

    data = out / "data"
    if not (data / "meta.json").exists():
        rc = cli(["gen-data", "asia", "--seed", "0", "--out", str(data)])
        if rc != 0:
            return rc

    run_dirs = []
    for model in args.models:
        for regime in args.regimes:
            for seed in args.seeds:
                run = out / f"{regime}-{model}-s{seed}"
                run_dirs.append(str(run))
                if (run / "final.csv").exists():
                    print(f"skip {run} (already done)")
                    continue
                rc = cli(["train", "--regime", regime, "--model", model,
                          "--config", str(config), "--seed", str(seed),
                          "--data", str(data), "--out", str(run)])
                if rc != 0:
                    return rc
    return cli(["report", "--runs", *run_dirs, "--out", str(out / "report.csv")])


if __name__ == "__main__":
    sys.exit(main())
