"""Reward-constrained policy optimization: a projected dual-ascent multiplier
that folds per-step costs into the reward before advantage estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConstraintSpec:
    cost_limit: float
    multiplier_lr: float = 0.05
    multiplier_init: float = 0.0

    def __post_init__(self):
        if self.cost_limit < 0:
            raise ValueError("cost_limit must be >= 0")
        if self.multiplier_lr <= 0:
            raise ValueError("multiplier_lr must be > 0")
        if self.multiplier_init < 0:
            raise ValueError("multiplier_init must be >= 0")


@dataclass(frozen=True)
class LagrangeState:
    lam: float = 0.0
    last_episodic_cost: float = 0.0

    @classmethod
    def initial(cls, spec: ConstraintSpec) -> "LagrangeState":
        return cls(spec.multiplier_init, 0.0)


def shaped_reward(r, c, state: LagrangeState):
    """``r - lambda * c``; works elementwise on arrays."""
    return r - state.lam * c


def multiplier_update(state: LagrangeState, mean_episodic_cost: float, spec: ConstraintSpec) -> LagrangeState:
    if not np.isfinite(mean_episodic_cost):
        raise ValueError("mean episodic cost must be finite")
    lam = max(0.0, state.lam + spec.multiplier_lr * (mean_episodic_cost - spec.cost_limit))
    return LagrangeState(lam, float(mean_episodic_cost))
