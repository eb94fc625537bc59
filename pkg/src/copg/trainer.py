"""On-policy training loop shared by PPO, COPG and TRPO, with optional RCPO
cost shaping.

A run is a pure function of its :class:`TrainConfig`. All randomness flows
from ``numpy.random.SeedSequence(config.seed)``, spawned into fixed streams for
initialization, minibatch shuffling, entropy logging and one action-noise /
reset stream per environment instance.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .advantage import AdvantageConfig, gae, normalize
from .constrained import ConstraintSpec, LagrangeState, multiplier_update, shaped_reward
from .envs import ConfigurationError, make_env
from .nn import AdamState, Mlp, adam_step, mlp_segments, save_checkpoint
from .objectives import ClipConfig, ObjectiveReport, SampleBatch, approx_kl, copg, ppo_clip
from .policy import GaussianPolicy, entropy, entropy_bounded, log_prob_terms
from .trpo import TrustRegionConfig, trpo_update

log = logging.getLogger(__name__)

ALGORITHMS = ("ppo", "copg", "trpo")
OBJECTIVES = {"ppo": ppo_clip, "copg": copg}


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "copg"
    env: str = "pointnav"
    env_config: dict = field(default_factory=dict)
    constrained: ConstraintSpec | None = None
    steps_per_batch: int = 4000
    total_batches: int = 100
    epochs_per_batch: int = 80
    value_epochs: int = 80
    minibatch_count: int = 1
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    kl_stop_threshold: float = 0.015
    clip: ClipConfig = field(default_factory=ClipConfig)
    advantage: AdvantageConfig = field(default_factory=AdvantageConfig)
    trust_region: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    seed: int = 0
    entropy_log_samples: int = 128
    entropy_draws_per_state: int = 16
    num_envs: int = 4
    hidden_sizes: tuple = (64, 64)
    bounded_log_prob: bool = True
    log_std_init: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("steps_per_batch", "epochs_per_batch", "value_epochs", "minibatch_count",
                     "entropy_log_samples", "entropy_draws_per_state", "num_envs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.total_batches < 0:
            raise ConfigurationError("total_batches must be >= 0")
        if self.policy_lr <= 0 or self.value_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.kl_stop_threshold < 0:
            raise ConfigurationError("kl_stop_threshold must be >= 0")
        if self.num_envs > self.steps_per_batch:
            raise ConfigurationError("num_envs cannot exceed steps_per_batch")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.constrained is not None and self.env == "pointnav" \
                and self.env_config.get("cost_mode", "in_reward") != "separate":
            raise ConfigurationError("constrained training needs env_config.cost_mode = 'separate'")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class MetricRecord:
    batch_index: int
    mean_episode_return: float
    mean_episode_cost: float
    policy_entropy: float
    policy_entropy_bounded: float
    approx_kl_final: float
    clip_fraction: float
    lam: float
    value_loss: float
    epochs_used: int


METRIC_COLUMNS = [f.name if f.name != "lam" else "lambda" for f in fields(MetricRecord)]
CSV_NOTE = "# entropies logged after the policy update of each batch"


# -- rollout collection ----------------------------------------------------

@dataclass
class EpisodeStats:
    returns: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    partial_returns: list = field(default_factory=list)
    partial_costs: list = field(default_factory=list)

    def mean_return(self) -> float:
        src = self.returns or self.partial_returns
        return float(np.mean(src)) if src else 0.0

    def mean_cost(self) -> float:
        src = self.costs or self.partial_costs
        return float(np.mean(src)) if src else 0.0


class EnvPool:
    """Environment instances with their own seeded reset and action-noise streams.

    Episodes carry over between batches; a batch boundary cuts an episode into
    segments that are bootstrapped with the value estimate.
    """

    def __init__(self, env_name: str, env_config: dict, seed_seqs):
        self.envs = [make_env(env_name, env_config) for _ in seed_seqs]
        children = [s.spawn(2) for s in seed_seqs]
        self.noise_rngs = [np.random.default_rng(c[0]) for c in children]
        self.reset_rngs = [np.random.default_rng(c[1]) for c in children]
        self.obs = [env.reset(int(r.integers(2**63))) for env, r in zip(self.envs, self.reset_rngs)]
        self.ep_return = [0.0] * len(self.envs)
        self.ep_cost = [0.0] * len(self.envs)
        self.ep_len = [0] * len(self.envs)

    @property
    def observation_dim(self) -> int:
        return self.envs[0].observation_dim

    def __len__(self):
        return len(self.envs)


@dataclass
class Rollout:
    states: np.ndarray
    raw_actions: np.ndarray
    executed_actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    episode_ids: np.ndarray
    step_index: np.ndarray
    # per segment: (start, stop, bootstrap observation or None if terminated)
    segments: list
    stats: EpisodeStats


def collect_rollout(policy: GaussianPolicy, pool: EnvPool, steps_per_batch: int) -> Rollout:
    """Run the pool in lockstep until exactly ``steps_per_batch`` transitions are
    collected, then merge them in instance order."""
    n_envs = len(pool)
    counts = [len(c) for c in np.array_split(np.arange(steps_per_batch), n_envs)]
    per_env = [dict(s=[], raw=[], exe=[], r=[], c=[], seg=[], seg_start=0) for _ in range(n_envs)]
    stats = EpisodeStats()
    std = policy.std()
    for t in range(max(counts)):
        active = [i for i in range(n_envs) if counts[i] > t]
        means = policy.mean(np.array([pool.obs[i] for i in active]))
        for row, i in enumerate(active):
            buf = per_env[i]
            raw = means[row] + std * pool.noise_rngs[i].standard_normal(std.size)
            exe = np.clip(raw, policy.action_low, policy.action_high)
            out = pool.envs[i].step(exe)
            buf["s"].append(pool.obs[i])
            buf["raw"].append(raw)
            buf["exe"].append(exe)
            buf["r"].append(out.reward)
            buf["c"].append(out.cost)
            pool.ep_return[i] += out.reward
            pool.ep_cost[i] += out.cost
            pool.ep_len[i] += 1
            n = len(buf["r"])
            if out.terminated or out.truncated:
                buf["seg"].append((buf["seg_start"], n, None if out.terminated else out.observation))
                buf["seg_start"] = n
                stats.returns.append(pool.ep_return[i])
                stats.costs.append(pool.ep_cost[i])
                stats.lengths.append(pool.ep_len[i])
                pool.ep_return[i] = pool.ep_cost[i] = 0.0
                pool.ep_len[i] = 0
                pool.obs[i] = pool.envs[i].reset(int(pool.reset_rngs[i].integers(2**63)))
            else:
                pool.obs[i] = out.observation
    for i, buf in enumerate(per_env):
        if buf["seg_start"] < len(buf["r"]):
            buf["seg"].append((buf["seg_start"], len(buf["r"]), pool.obs[i]))
            stats.partial_returns.append(pool.ep_return[i])
            stats.partial_costs.append(pool.ep_cost[i])

    segments, ids, steps = [], [], []
    offset = 0
    for buf in per_env:
        for start, stop, boot in buf["seg"]:
            segments.append((offset + start, offset + stop, boot))
            ids.append(np.full(stop - start, len(segments) - 1))
            steps.append(np.arange(stop - start))
        offset += len(buf["r"])

    def cat(key):
        return np.array([x for buf in per_env for x in buf[key]], dtype=np.float64)

    return Rollout(cat("s"), cat("raw"), cat("exe"), cat("r"), cat("c"),
                   np.concatenate(ids), np.concatenate(steps), segments, stats)


def build_batch(policy: GaussianPolicy, value_net: Mlp, rollout: Rollout, config: TrainConfig,
                lagrange: LagrangeState | None = None) -> SampleBatch:
    """Attach old log-probs, value estimates, GAE advantages and value targets."""
    bounded = config.bounded_log_prob
    actions = rollout.executed_actions if bounded else rollout.raw_actions
    old_lp, _, _, cache = log_prob_terms(policy, rollout.states, actions, bounded)
    values = value_net.forward(rollout.states)[:, 0]
    rewards = rollout.rewards
    if lagrange is not None:
        rewards = shaped_reward(rewards, rollout.costs, lagrange)
    boot_obs = [b for _, _, b in rollout.segments if b is not None]
    boot_vals = iter(value_net.forward(np.array(boot_obs))[:, 0] if boot_obs else [])
    adv = np.empty(len(rewards))
    targets = np.empty(len(rewards))
    for start, stop, boot in rollout.segments:
        terminal = 0.0 if boot is None else float(next(boot_vals))
        rec = gae(rewards[start:stop], values[start:stop], terminal, config.advantage)
        adv[start:stop] = rec.advantage
        targets[start:stop] = rec.value_target
    if config.advantage.normalize_advantages and len(adv) >= 2:
        adv = normalize(adv)
    return SampleBatch(
        states=rollout.states, raw_actions=rollout.raw_actions,
        executed_actions=rollout.executed_actions, advantages=adv, old_log_probs=old_lp,
        episode_ids=rollout.episode_ids, step_index=rollout.step_index, rewards=rewards,
        costs=rollout.costs, value_targets=targets, old_means=cache[-1].copy(),
        old_log_std=policy.effective_log_std().copy(), bounded=bounded)


# -- updates ---------------------------------------------------------------

def minibatch_partition(n: int, minibatch_count: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled near-equal partition of ``range(n)``; the identity order for a single minibatch."""
    if minibatch_count == 1:
        return [np.arange(n)]
    return np.array_split(rng.permutation(n), minibatch_count)


@dataclass
class PolicyUpdate:
    policy: GaussianPolicy
    adam: AdamState
    epochs_used: int
    report: ObjectiveReport | None
    approx_kl_final: float
    aborted: bool = False
    sample_visits: np.ndarray | None = None


def update_policy_firstorder(policy: GaussianPolicy, adam: AdamState, batch: SampleBatch,
                             config: TrainConfig, rng: np.random.Generator) -> PolicyUpdate:
    """Multi-epoch minibatch updates with KL early stopping.

    The full-batch approximate KL, clamped at zero, is checked before every
    epoch; once it exceeds ``kl_stop_threshold`` no further epochs run. A zero
    threshold therefore allows exactly one epoch. A non-finite loss or
    gradient rolls everything back to the start-of-batch parameters.
    """
    if config.algorithm not in OBJECTIVES:
        raise ValueError(f"first-order update needs ppo or copg, got {config.algorithm!r}")
    objective = OBJECTIVES[config.algorithm]
    start_policy, start_adam = policy, adam.copy()
    n = len(batch)
    full_batch = config.minibatch_count == 1
    visits = np.zeros(n, dtype=int)
    epochs_used = 0
    report = None
    for _ in range(config.epochs_per_batch):
        # with a single minibatch the full-batch report doubles as the KL check
        report = objective(policy, batch, config.clip) if full_batch else None
        new_lp = report.new_log_probs if full_batch else \
            log_prob_terms(policy, batch.states, batch.actions, batch.bounded)[0]
        kl = approx_kl(batch, new_lp)
        # a zero budget is spent by any movement, even when the sample estimate is <= 0
        if max(kl, 0.0) > config.kl_stop_threshold or (config.kl_stop_threshold == 0.0 and epochs_used):
            break
        for idx in minibatch_partition(n, config.minibatch_count, rng):
            mb_report = report if full_batch else objective(policy, batch.subset(idx), config.clip)
            try:
                if not np.isfinite(mb_report.loss):
                    raise FloatingPointError("non-finite policy loss")
                params, adam = adam_step(adam, policy.params, mb_report.grad)
            except FloatingPointError as exc:
                log.warning("policy update aborted and rolled back: %s", exc)
                return PolicyUpdate(start_policy, start_adam, 0, None, 0.0, True, np.zeros(n, dtype=int))
            policy = policy.with_params(params)
            visits[idx] += 1
        epochs_used += 1
        report = None
    if report is None:
        report = objective(policy, batch, config.clip)
        kl = report.approx_kl
    return PolicyUpdate(policy, adam, epochs_used, report, kl, False, visits)


def value_loss(value_net: Mlp, states, targets) -> float:
    pred = value_net.forward(states)[:, 0]
    return float(np.mean((pred - targets) ** 2))


def value_loss_grad(value_net: Mlp, states, targets):
    pred, cache = value_net.forward_cached(states)
    resid = pred[:, 0] - targets
    g = value_net.backward(None, (2.0 / len(targets)) * resid[:, None], cache=cache)
    return float(np.mean(resid ** 2)), g


def fit_value(value_net: Mlp, adam: AdamState, batch: SampleBatch, epochs: int,
              minibatch_count: int, rng: np.random.Generator):
    """MSE regression onto ``batch.value_targets``. Returns ``(net, adam, loss_trace)``
    where ``loss_trace[k]`` is the full-batch loss before epoch k and the last
    entry is the loss after fitting."""
    trace = []
    n = len(batch)
    for _ in range(epochs):
        parts = minibatch_partition(n, minibatch_count, rng)
        if len(parts) > 1:
            trace.append(value_loss(value_net, batch.states, batch.value_targets))
        for idx in parts:
            loss, g = value_loss_grad(value_net, batch.states[idx], batch.value_targets[idx])
            if len(parts) == 1:
                trace.append(loss)
            params, adam = adam_step(adam, value_net.params, g)
            value_net = value_net.with_params(params)
    trace.append(value_loss(value_net, batch.states, batch.value_targets))
    return value_net, adam, trace


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    config: TrainConfig
    metrics: list[MetricRecord]
    policy: GaussianPolicy
    value_net: Mlp
    lagrange: LagrangeState | None


def _streams(config: TrainConfig):
    root = np.random.SeedSequence(config.seed)
    init, shuffle, logging_seq, envs = root.spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(logging_seq), envs.spawn(config.num_envs))


def initial_networks(config: TrainConfig, obs_dim: int, low, high, rng):
    policy = GaussianPolicy.init(obs_dim, low, high, rng, config.hidden_sizes, config.log_std_init)
    value_net = Mlp.init((obs_dim, *config.hidden_sizes, 1), rng)
    return policy, value_net


def train(config: TrainConfig, on_batch: Callable[..., None] | None = None) -> TrainResult:
    """Collect, estimate advantages, update the policy, fit the value net,
    update the multiplier, log; repeated ``total_batches`` times.

    ``on_batch(index, batch, old_policy, new_policy, info)`` is called after
    every policy update, where ``info`` is the update outcome.
    """
    init_rng, shuffle_rng, log_rng, env_seqs = _streams(config)
    pool = EnvPool(config.env, config.env_config, env_seqs)
    env0 = pool.envs[0]
    policy, value_net = initial_networks(config, pool.observation_dim, env0.action_low,
                                         env0.action_high, init_rng)
    policy_adam = AdamState.fresh(policy.params, config.policy_lr)
    value_adam = AdamState.fresh(value_net.params, config.value_lr)
    lagrange = LagrangeState.initial(config.constrained) if config.constrained else None
    metrics: list[MetricRecord] = []

    for k in range(config.total_batches):
        try:
            rollout = collect_rollout(policy, pool, config.steps_per_batch)
            batch = build_batch(policy, value_net, rollout, config, lagrange)
            old_policy = policy
            if config.algorithm == "trpo":
                outcome = trpo_update(policy, batch, config.trust_region)
                policy = outcome.policy
                epochs_used, clip_fraction = int(outcome.accepted), 0.0
                kl_final = approx_kl(batch, log_prob_terms(policy, batch.states, batch.actions,
                                                           batch.bounded)[0])
                info = outcome
            else:
                upd = update_policy_firstorder(policy, policy_adam, batch, config, shuffle_rng)
                policy, policy_adam = upd.policy, upd.adam
                epochs_used, kl_final = upd.epochs_used, upd.approx_kl_final
                clip_fraction = upd.report.clip_fraction if upd.report is not None else 0.0
                info = upd
            if on_batch is not None:
                on_batch(k, batch, old_policy, policy, info)
            value_net, value_adam, trace = fit_value(value_net, value_adam, batch, config.value_epochs,
                                                     config.minibatch_count, shuffle_rng)
            if lagrange is not None:
                lagrange = multiplier_update(lagrange, rollout.stats.mean_cost(), config.constrained)
            pick = log_rng.choice(len(batch), size=min(config.entropy_log_samples, len(batch)),
                                  replace=False)
            ent_b = entropy_bounded(policy, batch.states[pick], config.entropy_draws_per_state, log_rng)
        except Exception as exc:
            raise RuntimeError(f"training failed at batch {k}: {exc}") from exc
        rec = MetricRecord(
            batch_index=k, mean_episode_return=rollout.stats.mean_return(),
            mean_episode_cost=rollout.stats.mean_cost(), policy_entropy=entropy(policy),
            policy_entropy_bounded=ent_b, approx_kl_final=kl_final, clip_fraction=clip_fraction,
            lam=lagrange.lam if lagrange is not None else 0.0, value_loss=trace[-1],
            epochs_used=epochs_used)
        metrics.append(rec)
        log.info("batch %d return %.4f cost %.2f entropy %.4f kl %.5f epochs %d", k,
                 rec.mean_episode_return, rec.mean_episode_cost, rec.policy_entropy,
                 rec.approx_kl_final, rec.epochs_used)
    return TrainResult(config, metrics, policy, value_net, lagrange)


# -- output ----------------------------------------------------------------

def metrics_csv(metrics: list[MetricRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_NOTE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in metrics:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(m).values()])
    return buf.getvalue()


def write_metrics_csv(path: str | Path, metrics: list[MetricRecord]) -> None:
    Path(path).write_text(metrics_csv(metrics), encoding="utf-8")


def read_metrics_csv(path: str | Path) -> dict[str, np.ndarray]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[j]) for r in body]) for j, name in enumerate(header)}


def checkpoint_segments(policy: GaussianPolicy, value_net: Mlp) -> dict[str, np.ndarray]:
    seg = mlp_segments(policy.mean_net, "policy.mean.")
    seg["policy.log_std"] = policy.log_std
    seg["policy.action_low"] = policy.action_low
    seg["policy.action_high"] = policy.action_high
    seg.update(mlp_segments(value_net, "value."))
    return seg


def save_run_checkpoint(path: str | Path, policy: GaussianPolicy, value_net: Mlp) -> None:
    save_checkpoint(path, checkpoint_segments(policy, value_net))


def load_run_checkpoint(path: str | Path):
    from .nn import load_checkpoint, mlp_from_segments
    seg = load_checkpoint(path)
    policy = GaussianPolicy(mlp_from_segments(seg, "policy.mean."), seg["policy.log_std"],
                            seg["policy.action_low"], seg["policy.action_high"])
    return policy, mlp_from_segments(seg, "value.")


def random_policy_return(env_name: str, env_config: dict, episodes: int, seed: int) -> tuple[float, float]:
    """Mean episodic (return, cost) of uniformly random actions."""
    rng = np.random.default_rng(seed)
    env = make_env(env_name, env_config)
    rets, costs = [], []
    for _ in range(episodes):
        env.reset(int(rng.integers(2**63)))
        total = cost = 0.0
        while True:
            out = env.step(rng.uniform(env.action_low, env.action_high))
            total += out.reward
            cost += out.cost
            if out.terminated or out.truncated:
                break
        rets.append(total)
        costs.append(cost)
    return float(np.mean(rets)), float(np.mean(costs))


def greedy_rollouts(policy: GaussianPolicy, env_name: str, env_config: dict, episodes: int,
                    seed: int) -> tuple[float, float]:
    """Mean episodic (return, cost) acting with the clipped policy mean."""
    rng = np.random.default_rng(seed)
    env = make_env(env_name, env_config)
    rets, costs = [], []
    for _ in range(episodes):
        obs = env.reset(int(rng.integers(2**63)))
        total = cost = 0.0
        while True:
            out = env.step(np.clip(policy.mean(obs), policy.action_low, policy.action_high))
            total += out.reward
            cost += out.cost
            obs = out.observation
            if out.terminated or out.truncated:
                break
        rets.append(total)
        costs.append(cost)
    return float(np.mean(rets)), float(np.mean(costs))
