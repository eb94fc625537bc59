"""Shared builders for small policies and batches."""
import numpy as np

from copg.nn import Mlp
from copg.objectives import SampleBatch
from copg.policy import GaussianPolicy, log_prob_terms


def const_policy(mean, log_std, low=-5.0, high=5.0, obs_dim=2):
    """Policy whose mean ignores the state: zero weights, bias = mean."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    net = Mlp.zeros((obs_dim, mean.size))
    net.params.unflatten()["b0"][:] = mean
    return GaussianPolicy(net, np.broadcast_to(log_std, mean.shape), np.broadcast_to(low, mean.shape),
                          np.broadcast_to(high, mean.shape))


def rand_policy(seed, obs=3, act=2, bound=1.0, hidden=(5, 4)):
    rng = np.random.default_rng(seed)
    p = GaussianPolicy.init(obs, -bound * np.ones(act), bound * np.ones(act), rng, hidden)
    values = p.params.values.copy()
    values[-act:] = rng.normal(-0.3, 0.3, size=act)
    p = p.with_params(values)
    p.mean_net.params.unflatten()[f"W{len(hidden)}"][:] *= 50
    return p


def make_batch(policy, states, raw, adv, old_lp=None, bounded=False, episode_ids=None, rewards=None,
               log_ratio=None):
    """Batch scored by ``policy``; ``log_ratio`` shifts old log-probs so that new/old = exp(log_ratio)."""
    states = np.atleast_2d(states)
    raw = np.atleast_2d(raw)
    executed = np.clip(raw, policy.action_low, policy.action_high)
    n = len(states)
    if old_lp is None:
        old_lp = log_prob_terms(policy, states, executed if bounded else raw, bounded)[0]
        if log_ratio is not None:
            old_lp = old_lp - log_ratio
    if episode_ids is None:
        episode_ids = np.zeros(n, dtype=int)
    return SampleBatch(states=states, raw_actions=raw, executed_actions=executed,
                       advantages=np.asarray(adv, dtype=float), old_log_probs=np.asarray(old_lp, dtype=float),
                       episode_ids=np.asarray(episode_ids), step_index=np.arange(n),
                       rewards=None if rewards is None else np.asarray(rewards, dtype=float),
                       bounded=bounded)


def fd_grad(f, x, h=1e-5):
    out = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-6, atol=1e-8):
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    big = scale > floor
    err = np.abs(analytic - numeric)
    assert np.all(err[big] / scale[big] < rtol), (err[big] / scale[big]).max()
    assert np.all(err[~big] < atol)
