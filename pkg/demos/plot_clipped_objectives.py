"""
Clipped surrogates on a single sample
=====================================

Compare the per-sample PPO and COPG objectives as the probability ratio
moves away from 1, for a positive and a negative advantage.
"""

import numpy as np

from copg.objectives import ClipConfig, SampleBatch, copg, ppo_clip
from copg.nn import Mlp
from copg.policy import GaussianPolicy

###############################################################################
# A one-dimensional policy whose mean ignores the state. Shifting the stored
# old log-probability sets the ratio directly.

net = Mlp.zeros((1, 1))
policy = GaussianPolicy(net, [0.0], [-5.0], [5.0])
clip = ClipConfig(0.2)


def one_sample(log_ratio, adv):
    new_lp = -0.5 * np.log(2 * np.pi)
    return SampleBatch(states=np.zeros((1, 1)), raw_actions=np.zeros((1, 1)),
                       executed_actions=np.zeros((1, 1)), advantages=np.array([adv]),
                       old_log_probs=np.array([new_lp - log_ratio]), episode_ids=np.zeros(1, int),
                       step_index=np.zeros(1, int), bounded=False)


###############################################################################
# Sweep the ratio. The new log-probability is held fixed, so the unclipped
# COPG value does not move. Clipped samples take the boundary value
# ``A * (log(1 +- eps) + old log-prob)`` and carry no gradient.

for adv in (1.0, -1.0):
    print(f"advantage {adv:+.0f}")
    print("   ratio      ppo     copg  clipped")
    for rho in (0.5, 0.8, 0.95, 1.0, 1.05, 1.2, 1.5, 2.0):
        b = one_sample(np.log(rho), adv)
        p = ppo_clip(policy, b, clip)
        c = copg(policy, b, clip)
        print(f"{rho:8.2f} {p.per_sample_objective[0]:8.3f} {c.per_sample_objective[0]:8.3f}"
              f"  {bool(p.per_sample_clipped[0])}")
