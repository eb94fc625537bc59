"""Trust-region policy update: importance-sampled surrogate, Fisher-vector
products of the mean Gaussian KL, conjugate gradient, backtracking line search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import ParameterVector
from .objectives import SampleBatch
from .policy import GaussianPolicy, log_prob_terms, weighted_log_prob_grad


@dataclass(frozen=True)
class TrustRegionConfig:
    kl_limit: float = 0.01
    cg_iterations: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.8
    max_backtracks: int = 10

    def __post_init__(self):
        if self.kl_limit <= 0 or self.cg_damping <= 0:
            raise ValueError("kl_limit and cg_damping must be positive")
        if not 0 < self.backtrack_ratio < 1:
            raise ValueError("backtrack_ratio must lie in (0, 1)")
        if self.cg_iterations < 1 or self.max_backtracks < 1:
            raise ValueError("cg_iterations and max_backtracks must be >= 1")


@dataclass
class UpdateOutcome:
    accepted: bool
    policy: GaussianPolicy
    kl: float
    improvement: float
    backtracks: int
    step_direction: np.ndarray


def surrogate(policy: GaussianPolicy, batch: SampleBatch):
    """``mean_t ratio_t * A_t`` and its gradient (for ascent) at the policy's parameters."""
    lp, _, _, cache = log_prob_terms(policy, batch.states, batch.actions, batch.bounded)
    ratio = np.exp(lp - batch.old_log_probs)
    n = len(batch)
    value = float(np.mean(ratio * batch.advantages))
    grad = weighted_log_prob_grad(policy, batch.states, batch.actions,
                                  ratio * batch.advantages / n, batch.bounded, cache=cache)
    return value, grad


def _old_dist(policy: GaussianPolicy, batch: SampleBatch):
    old_mean = batch.old_means if batch.old_means is not None else policy.mean(batch.states)
    old_log_std = batch.old_log_std if batch.old_log_std is not None else policy.effective_log_std()
    return old_mean, np.asarray(old_log_std)


def mean_kl(policy: GaussianPolicy, batch: SampleBatch, old_mean=None, old_log_std=None) -> float:
    """Closed-form mean KL(old || policy) over the batch states."""
    if old_mean is None:
        old_mean, old_log_std = _old_dist(policy, batch)
    mean = policy.mean(batch.states)
    ls = policy.effective_log_std()
    var_ratio = np.exp(2.0 * (old_log_std - ls))
    kl = ls - old_log_std + 0.5 * (var_ratio + (old_mean - mean) ** 2 * np.exp(-2.0 * ls)) - 0.5
    return float(np.mean(kl.sum(axis=1)))


def mean_kl_grad(policy: GaussianPolicy, batch: SampleBatch, old_mean, old_log_std) -> ParameterVector:
    """Gradient of :func:`mean_kl` with respect to the policy parameters."""
    mean, cache = policy.mean_net.forward_cached(batch.states)
    ls = policy.effective_log_std()
    inv_var = np.exp(-2.0 * ls)
    n = len(batch)
    d_mean = (mean - old_mean) * inv_var / n
    d_ls = 1.0 - (np.exp(2.0 * old_log_std) + (old_mean - mean) ** 2) * inv_var
    g_net = policy.mean_net.backward(None, d_mean, cache=cache)
    mask = ((policy.log_std >= -20.0) & (policy.log_std <= 2.0)).astype(float)
    g_ls = d_ls.mean(axis=0) * mask
    return policy.params.with_values(np.concatenate([g_net.values, g_ls]))


def fisher_vector_product(policy: GaussianPolicy, batch: SampleBatch, v, damping: float) -> ParameterVector:
    """``(H + damping I) v`` with H the Hessian of mean KL(policy || .) at the policy itself.

    At coincident parameters the KL's first derivative in the mean vanishes,
    so H is exactly the Gauss-Newton form ``J^T diag(1/var) J`` for the mean
    network plus ``2 I`` on the log-std block. J v comes from a forward-mode
    pass and J^T from the reverse pass.
    """
    values = v.values if isinstance(v, ParameterVector) else np.asarray(v, dtype=np.float64)
    n_net = policy.mean_net.params.values.size
    states = np.atleast_2d(batch.states)
    _, cache = policy.mean_net.forward_cached(states)
    jv = policy.mean_net.jvp(states, values[:n_net], cache=cache)
    inv_var = np.exp(-2.0 * policy.effective_log_std())
    hv_net = policy.mean_net.backward(None, jv * inv_var / states.shape[0], cache=cache).values
    mask = ((policy.log_std >= -20.0) & (policy.log_std <= 2.0)).astype(float)
    hv_ls = 2.0 * values[n_net:] * mask
    out = np.concatenate([hv_net, hv_ls]) + damping * values
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Fisher-vector product")
    return policy.params.with_values(out)


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b, iterations: int,
                       residual_tol: float = 1e-10):
    """Solve ``A x = b`` for SPD ``A``; returns ``(x, residual_norm)``."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    for _ in range(iterations):
        if rr <= residual_tol ** 2:
            break
        Ap = np.asarray(matvec(p), dtype=np.float64)
        alpha = rr / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(r @ r)
        if not (np.all(np.isfinite(x)) and np.isfinite(rr_new)):
            raise FloatingPointError("non-finite conjugate-gradient iterate")
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, float(np.sqrt(rr))


def trpo_update(policy: GaussianPolicy, batch: SampleBatch, config: TrustRegionConfig) -> UpdateOutcome:
    """One natural-gradient step with backtracking until the surrogate improves within the KL limit."""
    old_mean, old_log_std = _old_dist(policy, batch)
    s0, g = surrogate(policy, batch)
    if not np.any(g.values):
        return UpdateOutcome(False, policy, 0.0, 0.0, 0, np.zeros_like(g.values))

    def hvp(x):
        return fisher_vector_product(policy, batch, x, config.cg_damping).values

    direction, _ = conjugate_gradient(hvp, g.values, config.cg_iterations)
    shs = float(direction @ hvp(direction))
    full_step = np.sqrt(2.0 * config.kl_limit / max(shs, 1e-300)) * direction
    theta = policy.params.values
    for k in range(config.max_backtracks):
        candidate = policy.with_params(theta + config.backtrack_ratio ** k * full_step)
        kl = mean_kl(candidate, batch, old_mean, old_log_std)
        improvement = surrogate_value(candidate, batch) - s0
        if np.isfinite(kl) and kl <= config.kl_limit and improvement > 0:
            return UpdateOutcome(True, candidate, kl, improvement, k, direction)
    return UpdateOutcome(False, policy, 0.0, 0.0, config.max_backtracks, direction)


def surrogate_value(policy: GaussianPolicy, batch: SampleBatch) -> float:
    lp = log_prob_terms(policy, batch.states, batch.actions, batch.bounded)[0]
    return float(np.mean(np.exp(lp - batch.old_log_probs) * batch.advantages))
