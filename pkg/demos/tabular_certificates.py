"""Exact tabular checks of the expectile and advantage operators.

Runs the certificate suite over random MDPs and prints one row per
check. The deterministic tau = 0.999 row is expected to be red at the
1e-2 tolerance; the row after it shows the gap shrinking tenfold per
decade of 1 - tau.
"""
import sys

import numpy as np

from adac.envs import make_random_mdp
from adac.verify import certify_propositions, dataset_optimal_v, exact_expectile, fixed_point_v_tau

print("expectiles of {0, 1} equiprobable:",
      [round(exact_expectile([0.0, 1.0], [0.5, 0.5], t), 6) for t in (0.1, 0.5, 0.9)])

mdp = make_random_mdp(6, 3, 0.6, True, np.random.default_rng(4), gamma=0.9)
star = dataset_optimal_v(mdp)
for tau in (0.5, 0.9, 0.99, 0.999, 0.9999):
    gap = np.max(np.abs(fixed_point_v_tau(mdp, tau) - star))
    print(f"tau {tau:<7} |V_tau - V*_mu| = {gap:.2e}")

trials = int(sys.argv[1]) if len(sys.argv) > 1 else 40
print(certify_propositions(trials, np.random.default_rng(0)).table())
