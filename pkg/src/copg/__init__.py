"""On-policy policy-gradient library for continuous control: vanilla, off-policy,
PPO-clip and clipped-objective policy gradients, TRPO, and RCPO cost shaping."""
__version__ = "0.1.0"
