"""
PPO and COPG side by side
=========================

Two short PointNav runs from the same seed. Returns and policy entropy are
printed every few batches; COPG tends to keep a wider policy.
"""

from copg.trainer import TrainConfig, train

runs = {}
for algorithm in ("ppo", "copg"):
    config = TrainConfig(algorithm=algorithm, env="pointnav", env_config={"max_steps": 250},
                         steps_per_batch=2000, num_envs=2, total_batches=25, seed=1)
    runs[algorithm] = train(config).metrics

print("batch   ppo return  copg return   ppo entropy  copg entropy")
for p, c in zip(runs["ppo"], runs["copg"]):
    if p.batch_index % 3 == 0:
        print(f"{p.batch_index:5d} {p.mean_episode_return:12.2f} {c.mean_episode_return:12.2f}"
              f" {p.policy_entropy:13.3f} {c.policy_entropy:13.3f}")
