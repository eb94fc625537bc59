"""Policy objectives and their parameter gradients.

Every objective returns an :class:`ObjectiveReport` whose ``loss`` is the
negated objective and whose ``grad`` is the gradient of that loss, ready for
a minimizing optimizer.

Clip selection is decided from the probability ratio rather than by
comparing the two branch values: for a positive advantage the clipped branch
is active iff ``ratio > 1 + eps``, for a negative one iff ``ratio < 1 - eps``.
This is the same set the ``min`` picks, but immune to the last-bit rounding
that makes ``log(ratio) + old_log_prob`` differ from ``new_log_prob`` when the
ratio is inside the clip range.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import ParameterVector
from .policy import GaussianPolicy, log_prob_terms, per_sample_log_prob_grads, weighted_log_prob_grad

LOG_PROB_FLOOR = -30.0
LONG_EPISODE = 1000


@dataclass(frozen=True)
class ClipConfig:
    epsilon: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


@dataclass
class SampleBatch:
    """Transitions grouped by episode, in time order within each episode.

    ``old_log_probs`` follow the convention named by ``bounded``: executed
    actions scored with the clipped-action correction when true, raw actions
    under the plain Gaussian density otherwise.
    """

    states: np.ndarray
    raw_actions: np.ndarray
    executed_actions: np.ndarray
    advantages: np.ndarray
    old_log_probs: np.ndarray
    episode_ids: np.ndarray
    step_index: np.ndarray
    rewards: np.ndarray | None = None
    costs: np.ndarray | None = None
    value_targets: np.ndarray | None = None
    old_means: np.ndarray | None = None
    old_log_std: np.ndarray | None = None
    bounded: bool = True

    def __post_init__(self):
        n = len(self.states)
        for name in ("raw_actions", "executed_actions", "advantages", "old_log_probs",
                     "episode_ids", "step_index"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"batch field {name} has {len(getattr(self, name))} rows, expected {n}")
        if not np.all(np.isfinite(self.old_log_probs)):
            raise ValueError("old_log_probs must be finite")
        if not np.all(np.isfinite(self.advantages)):
            raise ValueError("advantages must be finite")

    def __len__(self):
        return len(self.states)

    @property
    def actions(self) -> np.ndarray:
        return self.executed_actions if self.bounded else self.raw_actions

    def subset(self, idx) -> "SampleBatch":
        def pick(x):
            return None if x is None else x[idx]
        return replace(
            self, states=self.states[idx], raw_actions=self.raw_actions[idx],
            executed_actions=self.executed_actions[idx], advantages=self.advantages[idx],
            old_log_probs=self.old_log_probs[idx], episode_ids=self.episode_ids[idx],
            step_index=self.step_index[idx], rewards=pick(self.rewards), costs=pick(self.costs),
            value_targets=pick(self.value_targets), old_means=pick(self.old_means))

    def episodes(self):
        """Yield index arrays, one per contiguous episode run."""
        ids = self.episode_ids
        if len(ids) == 0:
            return
        breaks = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        start = 0
        for stop in [*breaks, len(ids)]:
            yield np.arange(start, stop)
            start = stop


@dataclass
class ObjectiveReport:
    loss: float
    grad: ParameterVector
    clip_fraction: float
    approx_kl: float
    per_sample_clipped: np.ndarray
    per_sample_objective: np.ndarray = field(repr=False)
    new_log_probs: np.ndarray = field(repr=False)
    floored: np.ndarray | None = field(default=None, repr=False)


def approx_kl(batch: SampleBatch, new_log_probs) -> float:
    """Sample estimate of KL(old || new): mean of ``old_log_prob - new_log_prob``. May be slightly negative."""
    return float(np.mean(batch.old_log_probs - np.asarray(new_log_probs)))


def _new_log_probs(policy: GaussianPolicy, batch: SampleBatch):
    lp, _, _, cache = log_prob_terms(policy, batch.states, batch.actions, batch.bounded)
    return lp, cache


def _report(policy, batch, objective, coeffs, clipped, new_lp, cache, floored=None):
    n = len(batch)
    grad = weighted_log_prob_grad(policy, batch.states, batch.actions, -coeffs / n,
                                  batch.bounded, cache=cache)
    return ObjectiveReport(
        loss=-float(np.mean(objective)), grad=grad,
        clip_fraction=float(np.mean(clipped)) if n else 0.0,
        approx_kl=approx_kl(batch, new_lp), per_sample_clipped=clipped,
        per_sample_objective=objective, new_log_probs=new_lp, floored=floored)


def vanilla_pg(policy: GaussianPolicy, batch: SampleBatch) -> ObjectiveReport:
    """mean_t log pi(a_t|s_t) * A_t."""
    new_lp, cache = _new_log_probs(policy, batch)
    adv = batch.advantages
    return _report(policy, batch, new_lp * adv, adv.copy(), np.zeros(len(batch), bool), new_lp, cache)


def clip_mask(ratio: np.ndarray, advantages: np.ndarray, clip: ClipConfig) -> np.ndarray:
    """True where the pessimistic min selects a (strictly smaller) clipped branch."""
    eps = clip.epsilon
    return ((advantages > 0) & (ratio > 1.0 + eps)) | ((advantages < 0) & (ratio < 1.0 - eps))


def ppo_clip(policy: GaussianPolicy, batch: SampleBatch, clip: ClipConfig) -> ObjectiveReport:
    """PPO clipped surrogate: mean_t min(r A, clip(r, 1-eps, 1+eps) A)."""
    new_lp, cache = _new_log_probs(policy, batch)
    adv = batch.advantages
    ratio = np.exp(new_lp - batch.old_log_probs)
    clipped_ratio = np.clip(ratio, 1.0 - clip.epsilon, 1.0 + clip.epsilon)
    objective = np.minimum(ratio * adv, clipped_ratio * adv)
    clipped = clip_mask(ratio, adv, clip)
    coeffs = np.where(clipped, 0.0, ratio * adv)
    return _report(policy, batch, objective, coeffs, clipped, new_lp, cache)


def copg(policy: GaussianPolicy, batch: SampleBatch, clip: ClipConfig) -> ObjectiveReport:
    """Clipped-objective policy gradient.

    Per sample: ``min(log pi' * A, (log clip(r, 1-eps, 1+eps) + old_log_prob) * A)``.
    New log-probs are floored at ``LOG_PROB_FLOOR`` for evaluation; floored
    samples are reported in ``floored`` and contribute no gradient.
    """
    raw_lp, cache = _new_log_probs(policy, batch)
    floored = raw_lp < LOG_PROB_FLOOR
    new_lp = np.maximum(raw_lp, LOG_PROB_FLOOR)
    adv = batch.advantages
    ratio = np.exp(new_lp - batch.old_log_probs)
    log_clipped = np.log(np.clip(ratio, 1.0 - clip.epsilon, 1.0 + clip.epsilon))
    unclipped_branch = new_lp * adv
    clipped_branch = (log_clipped + batch.old_log_probs) * adv
    objective = np.minimum(unclipped_branch, clipped_branch)
    clipped = clip_mask(ratio, adv, clip)
    coeffs = np.where(clipped | floored, 0.0, adv)
    return _report(policy, batch, objective, coeffs, clipped, raw_lp, cache, floored)


def _episode_matrix(batch: SampleBatch):
    """``(n_episodes, T)`` index matrix when every episode has the same length, else None."""
    ids = batch.episode_ids
    n = len(ids)
    if n == 0:
        return None
    breaks = np.flatnonzero(ids[1:] != ids[:-1]) + 1
    lengths = np.diff(np.concatenate([[0], breaks, [n]]))
    if np.all(lengths == lengths[0]):
        return np.arange(n).reshape(-1, lengths[0])
    return None


def importance_weights(batch: SampleBatch, new_log_probs, use_advantages: bool = False,
                       exact_causal: bool = False) -> np.ndarray:
    """Per-step coefficients of grad log pi'(a_t|s_t) in the causal off-policy gradient.

    With ratios ``r_t = pi'/pi`` and ``P_t = prod_{t'<=t} r_t'`` the
    state-reaching product, step t gets ``P_t * sum_{t'>=t} reward_t' * prod_{t''=t..t'} r_t''``.
    The two products share the factor ``r_t``, so this equals
    ``r_t * sum_{t'>=t} reward_t' P_t'``. ``exact_causal`` starts the reward
    product at ``t + 1`` instead, giving ``sum_{t'>=t} reward_t' P_t'``: the
    unbiased gradient of the importance-sampled return.

    ``use_advantages`` swaps the bracketed reward sum for ``A_t`` (times
    ``r_t`` unless ``exact_causal``), keeping the state-reaching product.
    """
    log_ratio = np.asarray(new_log_probs, dtype=np.float64) - batch.old_log_probs
    if not use_advantages and batch.rewards is None:
        raise ValueError("the reference off-policy estimator needs per-step rewards")
    blocks = _episode_matrix(batch)
    if blocks is None:
        blocks = list(batch.episodes())
    elif blocks.shape[1] > LONG_EPISODE:
        warnings.warn(f"episodes of {blocks.shape[1]} steps: importance products may underflow",
                      RuntimeWarning, stacklevel=3)
    else:
        blocks = [blocks]
    coeffs = np.empty(len(batch))
    for idx in blocks:
        if idx.ndim == 1 and idx.size > LONG_EPISODE:
            warnings.warn(f"episode of {idx.size} steps: importance products may underflow",
                          RuntimeWarning, stacklevel=3)
        lr = log_ratio[idx]
        reach = np.exp(np.cumsum(lr, axis=-1))
        if use_advantages:
            c = reach * batch.advantages[idx]
        else:
            weighted = batch.rewards[idx] * reach
            c = np.flip(np.cumsum(np.flip(weighted, -1), axis=-1), -1)
        if not exact_causal:
            c = c * np.exp(lr)
        if not np.all(np.isfinite(c)):
            raise FloatingPointError("non-finite importance product in off-policy gradient")
        coeffs[idx] = c
    return coeffs


def offpolicy_pg(policy: GaussianPolicy, batch: SampleBatch, use_advantages: bool = False,
                 exact_causal: bool = False, per_episode: bool = False) -> ObjectiveReport:
    """Off-policy importance-sampled policy gradient with causality.

    A reference estimator: the importance coefficients are held fixed and the
    gradient flows only through the ``log pi'`` factors, so the reported loss
    is the surrogate ``-mean_t c_t log pi'_t`` whose gradient is the estimator.
    ``per_episode`` averages over episodes instead of steps.
    """
    new_lp, cache = _new_log_probs(policy, batch)
    coeffs = importance_weights(batch, new_lp, use_advantages, exact_causal)
    n = len(batch)
    scale = n / sum(1 for _ in batch.episodes()) if per_episode else 1.0
    objective = coeffs * new_lp * scale
    return _report(policy, batch, objective, coeffs * scale, np.zeros(n, bool), new_lp, cache)


# -- gradient ratio diagnostic ---------------------------------------------

UNCLIPPED, CLIPPED_HIGH, CLIPPED_LOW, DEAD = "unclipped", "clipped-high", "clipped-low", "dead"


@dataclass
class RatioDiagnostic:
    ratios: np.ndarray          # nan for dead samples
    labels: np.ndarray          # one of the four label strings
    prob_ratio: np.ndarray      # pi_theta' / pi_theta per sample
    advantages: np.ndarray

    def summary(self) -> dict:
        out = {}
        for lab in (UNCLIPPED, CLIPPED_HIGH, CLIPPED_LOW, DEAD):
            sel = self.labels == lab
            out[lab] = int(sel.sum())
        return out


def gradient_ratio_diagnostic(policy: GaussianPolicy, batch: SampleBatch, clip: ClipConfig) -> RatioDiagnostic:
    """Per-sample ``||grad J_copg|| / ||grad J_ppo||`` from analytic per-sample gradients.

    Where the objective is clipped both gradients vanish, so the ratio is
    taken from the one-sided gradients at the clip boundary
    (``ratio = 1 +- eps``): ``A grad log pi'`` against ``(1 +- eps) A grad log pi'``.
    Samples with zero advantage, zero score, or a floored log-prob are dead.
    """
    new_lp, _ = _new_log_probs(policy, batch)
    adv = batch.advantages
    ratio = np.exp(new_lp - batch.old_log_probs)
    clipped = clip_mask(ratio, adv, clip)
    high = clipped & (adv > 0)
    low = clipped & (adv < 0)
    eps = clip.epsilon
    ppo_scale = np.where(high, 1.0 + eps, np.where(low, 1.0 - eps, ratio))
    g_copg = per_sample_log_prob_grads(policy, batch.states, batch.actions, adv, batch.bounded)
    g_ppo = per_sample_log_prob_grads(policy, batch.states, batch.actions, ppo_scale * adv, batch.bounded)
    n_copg = np.linalg.norm(g_copg, axis=1)
    n_ppo = np.linalg.norm(g_ppo, axis=1)
    dead = (n_copg == 0) | (n_ppo == 0) | (new_lp < LOG_PROB_FLOOR)
    labels = np.where(high, CLIPPED_HIGH, np.where(low, CLIPPED_LOW, UNCLIPPED)).astype(object)
    labels[dead] = DEAD
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(dead, np.nan, n_copg / n_ppo)
    return RatioDiagnostic(ratios, labels, ratio, adv.copy())


def minibatch_grad_norm_variance(policy: GaussianPolicy, batch: SampleBatch, objective: str,
                                 clip: ClipConfig, minibatch_count: int,
                                 rng: np.random.Generator, use_advantages: bool = True,
                                 exact_causal: bool = False) -> float:
    """Variance across a random minibatch partition of the gradient norm of ``objective``.

    Off-policy coefficients need whole episodes, so they are computed on the
    full batch and only the sample average is restricted to each minibatch.
    """
    new_lp, _ = _new_log_probs(policy, batch)
    adv = batch.advantages
    ratio = np.exp(new_lp - batch.old_log_probs)
    clipped = clip_mask(ratio, adv, clip)
    if objective == "offpolicy":
        coeffs = importance_weights(batch, new_lp, use_advantages, exact_causal)
    elif objective == "ppo":
        coeffs = np.where(clipped, 0.0, ratio * adv)
    elif objective == "copg":
        coeffs = np.where(clipped, 0.0, adv)
    elif objective == "vanilla":
        coeffs = adv.copy()
    else:
        raise ValueError(f"unknown objective {objective!r}")
    norms = []
    for idx in np.array_split(rng.permutation(len(batch)), minibatch_count):
        g = weighted_log_prob_grad(policy, batch.states[idx], batch.actions[idx],
                                   coeffs[idx] / idx.size, batch.bounded)
        norms.append(np.linalg.norm(g.values))
    return float(np.var(norms))
