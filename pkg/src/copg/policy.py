"""Diagonal Gaussian policy over box-bounded continuous actions.

Actions are drawn unbounded (the *raw* action) and clipped into the box before
execution. ``log_prob`` scores the raw action under the Gaussian density;
``log_prob_bounded`` scores the executed action under the clipped
distribution, where a saturated dimension carries the Gaussian tail mass
beyond its bound instead of a density.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .nn import Mlp, ParameterVector, ShapeError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass(frozen=True)
class GaussianPolicy:
    mean_net: Mlp
    log_std: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray

    def __post_init__(self):
        for name in ("log_std", "action_low", "action_high"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64).ravel())
        dim = self.mean_net.layer_sizes[-1]
        if not (self.log_std.size == self.action_low.size == self.action_high.size == dim):
            raise ShapeError("log_std / bounds must match the mean network's output width")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be strictly below action_high")

    @classmethod
    def init(cls, obs_dim: int, action_low, action_high, rng: np.random.Generator,
             hidden_sizes=(64, 64), log_std_init: float = 0.0) -> "GaussianPolicy":
        low = np.atleast_1d(np.asarray(action_low, dtype=np.float64))
        net = Mlp.init((obs_dim, *hidden_sizes, low.size), rng, output_scale=0.01)
        return cls(net, np.full(low.size, log_std_init), low, action_high)

    @property
    def obs_dim(self) -> int:
        return self.mean_net.layer_sizes[0]

    @property
    def action_dim(self) -> int:
        return self.log_std.size

    @property
    def params(self) -> ParameterVector:
        net = self.mean_net.params
        layout = tuple((f"mean.{n}", s) for n, s in net.layout) + (("log_std", (self.action_dim,)),)
        return ParameterVector(np.concatenate([net.values, self.log_std]), layout)

    def with_params(self, params: ParameterVector | np.ndarray) -> "GaussianPolicy":
        values = params.values if isinstance(params, ParameterVector) else np.asarray(params)
        n = self.mean_net.params.values.size
        return GaussianPolicy(self.mean_net.with_params(values[:n].copy()), values[n:].copy(),
                              self.action_low, self.action_high)

    def effective_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def std(self) -> np.ndarray:
        return np.exp(self.effective_log_std())

    def mean(self, states: np.ndarray) -> np.ndarray:
        return self.mean_net.forward(states)


def sample(policy: GaussianPolicy, state: np.ndarray, rng: np.random.Generator):
    """Draw ``(raw_action, executed_action)`` for one state or a batch of states."""
    mean = policy.mean(state)
    raw = mean + policy.std() * rng.standard_normal(mean.shape)
    return raw, np.clip(raw, policy.action_low, policy.action_high)


def saturated(policy: GaussianPolicy, raw_action: np.ndarray) -> np.ndarray:
    """Per-dimension flags: raw action lies outside the bounds."""
    return (raw_action < policy.action_low) | (raw_action > policy.action_high)


@dataclass
class PolicyEval:
    log_prob: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    per_dim_clipped: np.ndarray


def _gaussian_terms(mean, log_std, actions):
    std = np.exp(log_std)
    z = (actions - mean) / std
    lp = -0.5 * z * z - log_std - _HALF_LOG_2PI
    return lp, z / std, z * z - 1.0


def _tail_terms(mean, log_std, actions, low, high):
    """Per-dimension log-prob and partials under the clipped distribution."""
    std = np.exp(log_std)
    lp, d_mean, d_log_std = _gaussian_terms(mean, log_std, actions)
    at_high = actions >= high
    at_low = actions <= low
    if at_high.any() or at_low.any():
        # tail mass: log Phi(u); u = (mean - high)/std upper, (low - mean)/std lower
        u = np.where(at_high, (mean - high) / std, (low - mean) / std)
        log_tail = log_ndtr(u)
        mills = np.exp(-0.5 * u * u - _HALF_LOG_2PI - log_tail)
        sat = at_high | at_low
        sign = np.where(at_high, 1.0, -1.0)
        lp = np.where(sat, log_tail, lp)
        d_mean = np.where(sat, sign * mills / std, d_mean)
        d_log_std = np.where(sat, -u * mills, d_log_std)
    return lp, d_mean, d_log_std


def log_prob_terms(policy: GaussianPolicy, states, actions, bounded: bool, cache=None):
    """Per-sample log-prob and its partials w.r.t. the mean and log-std.

    Returns ``(log_prob[N], d_mean[N, A], d_log_std[N, A], cache)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if cache is None:
        mean, cache = policy.mean_net.forward_cached(states)
    else:
        mean = cache[-1]
    if actions.shape != mean.shape:
        raise ShapeError(f"actions shape {actions.shape} does not match means {mean.shape}")
    log_std = np.broadcast_to(policy.effective_log_std(), mean.shape)
    if bounded:
        if np.any(actions > policy.action_high) or np.any(actions < policy.action_low):
            raise ValueError("executed action outside the action bounds")
        lp, dm, ds = _tail_terms(mean, log_std, actions, policy.action_low, policy.action_high)
    else:
        lp, dm, ds = _gaussian_terms(mean, log_std, actions)
    return lp.sum(axis=1), dm, ds, cache


def _log_std_mask(policy: GaussianPolicy) -> np.ndarray:
    return ((policy.log_std >= LOG_STD_MIN) & (policy.log_std <= LOG_STD_MAX)).astype(np.float64)


def log_prob(policy: GaussianPolicy, state, raw_action):
    """Gaussian log-density of the raw (unclipped) action, summed over dimensions."""
    lp = log_prob_terms(policy, state, raw_action, bounded=False)[0]
    return float(lp[0]) if np.ndim(raw_action) == 1 else lp


def log_prob_bounded(policy: GaussianPolicy, state, executed_action):
    """Log-probability of an executed action under the clipped-action distribution."""
    lp = log_prob_terms(policy, state, executed_action, bounded=True)[0]
    return float(lp[0]) if np.ndim(executed_action) == 1 else lp


def evaluate(policy: GaussianPolicy, state, raw_action, bounded: bool = True) -> PolicyEval:
    executed = np.clip(raw_action, policy.action_low, policy.action_high)
    lp = log_prob_terms(policy, state, executed if bounded else raw_action, bounded)[0]
    return PolicyEval(lp, policy.mean(state), policy.std(), saturated(policy, raw_action))


def weighted_log_prob_grad(policy: GaussianPolicy, states, actions, weights, bounded: bool,
                           cache=None) -> ParameterVector:
    """Gradient of ``sum_i weights[i] * log_prob_i`` with respect to ``policy.params``."""
    _, dm, ds, cache = log_prob_terms(policy, states, actions, bounded, cache)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    g_net = policy.mean_net.backward(None, w * dm, cache=cache)
    g_std = (w * ds).sum(axis=0) * _log_std_mask(policy)
    return policy.params.with_values(np.concatenate([g_net.values, g_std]))


def per_sample_log_prob_grads(policy: GaussianPolicy, states, actions, coeffs, bounded: bool,
                              chunk: int = 256) -> np.ndarray:
    """Row i is ``coeffs[i] * grad log_prob_i``; shape ``(N, n_params)``."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    net = policy.mean_net
    weights = [W for W, _ in net._weights()]
    rows = []
    mask = _log_std_mask(policy)
    for start in range(0, states.shape[0], chunk):
        sl = slice(start, start + chunk)
        _, dm, ds, cache = log_prob_terms(policy, states[sl], actions[sl], bounded)
        c = coeffs[sl, None]
        g = c * dm
        parts = [None] * (2 * net.n_layers)
        for i in range(net.n_layers - 1, -1, -1):
            if i < net.n_layers - 1:
                g = g * (1.0 - cache[i + 1] * cache[i + 1])
            parts[2 * i] = np.einsum("no,ni->noi", g, cache[i]).reshape(g.shape[0], -1)
            parts[2 * i + 1] = g
            if i > 0:
                g = g @ weights[i]
        parts.append(c * ds * mask)
        rows.append(np.concatenate(parts, axis=1))
    return np.concatenate(rows, axis=0)


def entropy(policy: GaussianPolicy, state=None) -> float:
    """Differential entropy of the unclipped Gaussian; independent of ``state``."""
    return float(np.sum(_HALF_LOG_2PIE + policy.effective_log_std()))


def entropy_bounded(policy: GaussianPolicy, states, sample_count: int, rng: np.random.Generator,
                    return_stderr: bool = False):
    """Monte-Carlo ``-E[log p_bounded]`` over clipped draws, averaged over ``states``.

    The clipped distribution mixes a density with atoms at the bounds, so this
    is the expected negative log-probability under that mixed measure rather
    than a proper differential entropy.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    mean = policy.mean(states)
    std = policy.std()
    draws = mean[:, None, :] + std * rng.standard_normal((mean.shape[0], sample_count, mean.shape[1]))
    executed = np.clip(draws, policy.action_low, policy.action_high)
    mean_rep = np.broadcast_to(mean[:, None, :], executed.shape)
    log_std = np.broadcast_to(policy.effective_log_std(), executed.shape)
    lp = _tail_terms(mean_rep, log_std, executed, policy.action_low, policy.action_high)[0].sum(axis=-1)
    neg = -lp.ravel()
    est = float(neg.mean())
    if return_stderr:
        return est, float(neg.std(ddof=1) / np.sqrt(neg.size)) if neg.size > 1 else float("nan")
    return est
