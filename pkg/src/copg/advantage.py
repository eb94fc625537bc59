"""Generalized advantage estimation and per-batch advantage normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdvantageConfig:
    gamma: float = 0.99
    lambda_gae: float = 0.95
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lambda_gae <= 1.0:
            raise ValueError(f"lambda_gae must lie in [0, 1], got {self.lambda_gae}")


@dataclass
class AdvantageRecord:
    """Per-step arrays for one episode segment."""

    advantage: np.ndarray
    return_to_go: np.ndarray
    value_target: np.ndarray

    def __len__(self):
        return self.advantage.size


def gae(rewards, values, terminal_value: float, config: AdvantageConfig) -> AdvantageRecord:
    """GAE over one contiguous episode segment.

    ``terminal_value`` bootstraps V(s_{T+1}); pass 0 when the episode
    terminated. ``return_to_go`` is the discounted reward-to-go with the same
    bootstrap, and ``value_target = advantage + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("gae needs a non-empty 1-D reward sequence")
    if values.shape != rewards.shape:
        raise ValueError("values and rewards must have the same length")
    if not (np.all(np.isfinite(rewards)) and np.all(np.isfinite(values)) and np.isfinite(terminal_value)):
        raise ValueError("gae inputs must be finite")
    gamma, lam = config.gamma, config.lambda_gae
    T = rewards.size
    adv = np.empty(T)
    rtg = np.empty(T)
    next_value = float(terminal_value)
    running_adv = 0.0
    running_ret = float(terminal_value)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running_adv = delta + gamma * lam * running_adv
        running_ret = rewards[t] + gamma * running_ret
        adv[t] = running_adv
        rtg[t] = running_ret
        next_value = values[t]
    return AdvantageRecord(adv, rtg, adv + values)


def normalize(advantages, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean, unit population std. A constant batch maps to zeros."""
    a = np.asarray(advantages, dtype=np.float64)
    if a.size < 2:
        raise ValueError("normalization needs at least two advantages")
    centered = a - a.mean()
    return centered / max(float(centered.std()), eps)


def discounted_cumsum(x, gamma: float) -> np.ndarray:
    out = np.empty(len(x))
    running = 0.0
    for t in range(len(x) - 1, -1, -1):
        running = x[t] + gamma * running
        out[t] = running
    return out
