"""
Lagrangian cost control on PointNav
===================================

Train COPG with a cost budget. The multiplier grows while the episodic
cost is above the budget and the shaped reward ``r - lambda * c`` steers
the policy away from hazards.
"""

from copg.constrained import ConstraintSpec
from copg.trainer import TrainConfig, train

config = TrainConfig(algorithm="copg", env="pointnav",
                     env_config={"max_steps": 250, "cost_mode": "separate"},
                     constrained=ConstraintSpec(cost_limit=8.0, multiplier_lr=0.002),
                     steps_per_batch=2000, num_envs=2, total_batches=30, seed=0)
result = train(config)

###############################################################################
# One line per batch: return, cost and multiplier.

for m in result.metrics:
    print(f"batch {m.batch_index:3d}  return {m.mean_episode_return:7.2f}  "
          f"cost {m.mean_episode_cost:6.2f}  lambda {m.lam:.4f}")
