#!/usr/bin/env python3
"""Failure-trigger threshold analysis on the reference penalty census.

Builds the synthetic penalty log (3,520 restore steps at -1.0; 9,926 failure
steps, 7,346 of them strictly below -1.1) and reports precision/recall for a
range of trigger thresholds.

Usage: python scripts/trigger_threshold_analysis.py [--log out.log]
"""

from __future__ import annotations

import argparse

from forge.metrics import make_reference_penalty_log, trigger_analysis, write_penalty_log


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--log", default=None, help="also write the synthetic log here")
    args = parser.parse_args()

    log = make_reference_penalty_log()
    if args.log:
        write_penalty_log(log, args.log)
        print(f"penalty log written to {args.log}")

    print(f"{'tau':>7s} {'captured':>9s} {'false pos':>9s} {'precision':>10s} {'recall':>7s}")
    for tau in (-0.5, -1.05, -1.1, -2.0, -3.0, -11.0, -20.0):
        result = trigger_analysis(log, tau)
        print(
            f"{tau:>7.2f} {result.true_triggers_captured:>9d} {result.false_positives:>9d} "
            f"{result.precision:>10.3f} {result.recall:>7.3f}"
        )


if __name__ == "__main__":
    main()
