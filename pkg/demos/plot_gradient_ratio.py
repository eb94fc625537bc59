"""
Per-sample gradient ratio after a few updates
=============================================

Collect one PointNav batch, take three COPG steps on it and compare the
per-sample gradient norms of COPG and PPO. Unclipped samples follow the
inverse probability ratio exactly.
"""

import numpy as np

from copg.nn import AdamState, adam_step
from copg.objectives import CLIPPED_HIGH, CLIPPED_LOW, DEAD, copg, gradient_ratio_diagnostic
from copg.trainer import EnvPool, TrainConfig, _streams, build_batch, collect_rollout, initial_networks

config = TrainConfig(algorithm="copg", env="pointnav", env_config={"max_steps": 250},
                     steps_per_batch=2000, num_envs=2, seed=0)
init_rng, _, _, env_seqs = _streams(config)
pool = EnvPool(config.env, config.env_config, env_seqs)
env = pool.envs[0]
policy, value = initial_networks(config, pool.observation_dim, env.action_low, env.action_high, init_rng)
batch = build_batch(policy, value, collect_rollout(policy, pool, config.steps_per_batch), config)

###############################################################################
# A large learning rate pushes some ratios past the clip range.

adam = AdamState.fresh(policy.params, 3e-3)
for _ in range(3):
    params, adam = adam_step(adam, policy.params, copg(policy, batch, config.clip).grad)
    policy = policy.with_params(params)

diag = gradient_ratio_diagnostic(policy, batch, config.clip)
print(diag.summary())

live = diag.labels != DEAD
expected = np.where(diag.labels == CLIPPED_HIGH, 1 / 1.2,
                    np.where(diag.labels == CLIPPED_LOW, 1 / 0.8, 1 / diag.prob_ratio))
print("max relative deviation from 1/ratio:", np.max(np.abs(diag.ratios[live] / expected[live] - 1)))

###############################################################################
# A coarse histogram of the ratio over unclipped samples.

counts, edges = np.histogram(diag.ratios[diag.labels == "unclipped"], bins=8)
for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
    print(f"[{lo:.3f}, {hi:.3f})  {'#' * int(60 * c / counts.max())}")
