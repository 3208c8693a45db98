"""Calibration constants for the CageLite simulator.

Every tunable in the simulator lives here. The penalty values are chosen so
that any reachable (action cost + compromise penalty) sum lands in one of the
documented per-step reward groups:

    0            clean step, no restore
    -1.0         a Restore with no ongoing compromise
    -1.1 / -1.2  small failures (user-subnet foothold)
    -2.0 .. -3.2 moderate failures (server compromise, or restore during one)
    -11  .. -14  severe failures (operational server rooted)

with no reachable value strictly between -3.3 and -10.9, and none strictly
between -1.0 and 0. All penalties are integer tenths internally so group
membership is exact.

Baseline targets (mean return over seeded 30-step episodes):
sleep ~ -218.65, random ~ -154.06, flag-driven heuristic ~ -58.83.
"""

from __future__ import annotations

EPISODE_LENGTH = 30
HOST_COUNT = 13

# Topology: subnet 1 is user-heavy, subnet 2 holds enterprise servers,
# subnet 3 holds the single high-value operational server.
USER_HOSTS = tuple(range(0, 7))
ENTERPRISE_HOSTS = tuple(range(7, 12))
OPERATIONAL_HOSTS = (12,)

# The scripted attacker pivots through a fixed chain: a user workstation,
# an enterprise server, then the operational server. A fixed chain is what
# makes the attacker a repeatable kill chain rather than a random walk.
TARGET_CHAIN = (6, 10, 12)

# Per-operation success probability of the attacker. The kill chain needs
# nine successful operations (scan / exploit / escalate on each chain host).
# Operations against the hardened operational server succeed less often;
# with that split an undefended network falls in ~13 steps on average, which
# is what lands the sleep/random baselines in their calibration windows.
ATTACK_SUCCESS_PROB = 0.8
OP_SERVER_ATTACK_SUCCESS_PROB = 0.4

# Observation noise: each per-host indicator flips independently.
# Indicator truth: anomalous-process and suspicious-connection fire once a
# host holds user-level access or worse, new-file only once it is rooted.
# Reconnaissance (Scanned) is quiet, so false positives aside, a host only
# lights up after it has actually been compromised.
OBS_FALSE_POSITIVE_RATE = 0.05
OBS_FALSE_NEGATIVE_RATE = 0.10

# Blue action effects.
ANALYSE_REVEAL_PROB = 0.95   # chance Analyse reports the true level
REMOVE_SUCCESS_PROB = 0.75   # Remove clears user-level access only, never root

# Action costs in tenths. Only Restore carries an operational cost: a cost
# on Analyse/Remove/Decoy would create per-step rewards outside the groups
# above (e.g. -0.3 alone, or -1.3 stacked on a small failure).
RESTORE_COST_TENTHS = -10

# Compromise penalties in tenths, classified from the post-transition state.
SMALL_USER_LEVEL_TENTHS = -11        # user-subnet host at user-level access
SMALL_ROOT_TENTHS = -12              # user-subnet host rooted
MODERATE_BASE_TENTHS = -20           # a server host holds user-level access
MODERATE_ROOT_TENTHS = -21           # a server host is rooted (op server excluded)
MODERATE_USER_EXTRA_TENTHS = -1      # ongoing user-subnet compromise on top
SEVERE_BASE_TENTHS = -110            # operational server rooted
SEVERE_ENTERPRISE_EXTRA_TENTHS = -3  # enterprise compromise on top
SEVERE_USER_EXTRA_TENTHS = -2        # user compromise on top

# Reference baseline returns used by the calibration report and its tests.
REFERENCE_SLEEP_RETURN = -218.65
REFERENCE_RANDOM_RETURN = -154.06
REFERENCE_HEURISTIC_RETURN = -58.83
