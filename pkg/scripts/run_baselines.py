#!/usr/bin/env python3
"""Simulator calibration check: mean returns of the three reference policies.

Usage: python scripts/run_baselines.py [--episodes 100] [--base-seed 2024]
"""

from __future__ import annotations

import argparse
import statistics

from forge import calibration as cal
from forge.cage_lite import baseline_returns


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--episodes", type=int, default=100)
    parser.add_argument("--base-seed", type=int, default=2024)
    args = parser.parse_args()

    targets = {
        "sleep": cal.REFERENCE_SLEEP_RETURN,
        "random": cal.REFERENCE_RANDOM_RETURN,
        "heuristic": cal.REFERENCE_HEURISTIC_RETURN,
    }
    print(f"{args.episodes} episodes per policy, base seed {args.base_seed}")
    print(f"{'policy':<10s} {'mean':>10s} {'sd':>8s} {'target':>10s} {'offset':>8s} {'window':>20s}")
    for name, target in targets.items():
        returns = baseline_returns(name, args.episodes, args.base_seed)
        mean = statistics.fmean(returns)
        sd = statistics.stdev(returns)
        low, high = 1.25 * target, 0.75 * target
        inside = "ok" if low <= mean <= high else "OUT"
        print(
            f"{name:<10s} {mean:>10.2f} {sd:>8.2f} {target:>10.2f} "
            f"{(mean - target) / abs(target):>8.1%} [{low:8.2f},{high:8.2f}] {inside}"
        )


if __name__ == "__main__":
    main()
