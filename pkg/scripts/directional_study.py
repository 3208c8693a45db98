#!/usr/bin/env python3
"""Multi-seed comparison of broadcast training vs isolated training vs the
untrained agent, on the deterministic scripted backend.

Usage: python scripts/directional_study.py [--seeds 20] [--first-seed 1]
       [--instances 10] [--stages 6] [--attempts 3]
"""

from __future__ import annotations

import argparse
import logging

from forge.experiments import render_study_table, run_directional_study
from forge.protocol import ProtocolConfig


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--first-seed", type=int, default=1)
    parser.add_argument("--instances", type=int, default=10)
    parser.add_argument("--stages", type=int, default=6)
    parser.add_argument("--attempts", type=int, default=3)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    config = ProtocolConfig(
        backend="scripted",
        instances=args.instances,
        stages=args.stages,
        attempts_per_stage=args.attempts,
    )
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    result = run_directional_study(seeds, config)
    print()
    print(render_study_table(result))


if __name__ == "__main__":
    main()
