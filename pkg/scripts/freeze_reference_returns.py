#!/usr/bin/env python3
"""Recompute the frozen scripted-oracle and random-policy reference returns.

The acceptance suite pins the values this script prints (seed 12345,
10000 episodes per estimate). Rerun it only to audit the constants; the
pinned numbers in tests/test_acceptance.py are the contract.
"""

import numpy as np

from mbmpo.envs import random_policy_return, scripted_oracle_return

N_EPISODES = 10_000
SEED = 12345

if __name__ == "__main__":
    for env_id in ("point2d", "pointmass"):
        rng = np.random.default_rng(np.random.SeedSequence(SEED))
        oracle = scripted_oracle_return(env_id, N_EPISODES, rng)
        rng = np.random.default_rng(np.random.SeedSequence(SEED))
        rand = random_policy_return(env_id, N_EPISODES, rng)
        print(f"{env_id}: oracle={oracle!r} random={rand!r}")
        print(f"{env_id}: 90% normalized target={rand + 0.9 * (oracle - rand)!r}")
