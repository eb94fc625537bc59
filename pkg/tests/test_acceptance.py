"""The twelve acceptance criteria, each reported as one PASS/FAIL line.

PointNav runs use 250-step episodes and 2000-step batches from two
environment instances so the five-seed experiments fit a desk-scale budget.
The training runs are shared between criteria through session fixtures.
"""
import time

import numpy as np
import pytest
from scipy import integrate, stats

from helpers import const_policy, fd_grad as fd, make_batch, rand_policy
from copg.advantage import AdvantageConfig, gae
from copg.constrained import ConstraintSpec
from copg.nn import AdamState, Mlp, adam_step
from copg.objectives import (CLIPPED_HIGH, CLIPPED_LOW, DEAD, ClipConfig, copg, gradient_ratio_diagnostic,
                             importance_weights,
                             minibatch_grad_norm_variance, offpolicy_pg, ppo_clip, vanilla_pg)
from copg.policy import log_prob_bounded, log_prob_terms
from copg.trainer import (EnvPool, TrainConfig, _streams, build_batch, collect_rollout, initial_networks,
                          metrics_csv, random_policy_return, train, value_loss, value_loss_grad)
from copg.trpo import TrustRegionConfig, fisher_vector_product, mean_kl, mean_kl_grad, surrogate_value

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]
BATCHES = 60
WINDOW = 10
NAV_ENV = {"max_steps": 250}
NAV = dict(env="pointnav", steps_per_batch=2000, num_envs=2, total_batches=BATCHES)


def nav_config(algorithm, seed, env_config=NAV_ENV, **kw):
    return TrainConfig(algorithm=algorithm, seed=seed, env_config=dict(env_config), **{**NAV, **kw})


def fresh_batch(config):
    init_rng, _, _, seqs = _streams(config)
    pool = EnvPool(config.env, config.env_config, seqs)
    env0 = pool.envs[0]
    policy, value = initial_networks(config, pool.observation_dim, env0.action_low, env0.action_high, init_rng)
    return policy, build_batch(policy, value, collect_rollout(policy, pool, config.steps_per_batch), config)


def beats_3x(trained, baseline):
    """3x better than ``baseline``: triple a positive return, or a third of a negative one."""
    return trained >= (3 * baseline if baseline >= 0 else baseline / 3)


@pytest.fixture(scope="session")
def nav_runs():
    """Five seeds each of PPO and COPG on PointNav with cost weight 0.075 folded into the reward."""
    start = time.perf_counter()
    runs = {alg: [train(nav_config(alg, s)).metrics for s in SEEDS] for alg in ("ppo", "copg")}
    return runs, time.perf_counter() - start


def column(runs, name):
    return np.array([[getattr(m, name) for m in metrics] for metrics in runs])


# 1 ---------------------------------------------------------------------------

def test_c01_gradient_ratio_identity(verdict):
    start = time.perf_counter()
    clip = ClipConfig(0.2)
    worst, checked, clipped = 0.0, 0, 0
    for seed in SEEDS:
        cfg = nav_config("copg", seed)
        policy, batch = fresh_batch(cfg)
        adam = AdamState.fresh(policy.params, 3e-3)
        for _ in range(5):
            params, adam = adam_step(adam, policy.params, copg(policy, batch, clip).grad)
            policy = policy.with_params(params)
            d = gradient_ratio_diagnostic(policy, batch, clip)
            lp = log_prob_terms(policy, batch.states, batch.actions, batch.bounded)[0]
            expected = np.where(d.labels == CLIPPED_HIGH, 1 / 1.2,
                                np.where(d.labels == CLIPPED_LOW, 1 / 0.8, np.exp(batch.old_log_probs - lp)))
            live = d.labels != DEAD
            worst = max(worst, float(np.max(np.abs(d.ratios[live] / expected[live] - 1))))
            checked += int(live.sum())
            clipped += int(np.sum((d.labels == CLIPPED_HIGH) | (d.labels == CLIPPED_LOW)))
    elapsed = time.perf_counter() - start
    verdict("C1 gradient-ratio identity", worst < 1e-6 and elapsed < 60 and clipped > 0,
            f"max rel err {worst:.2e} over {checked} samples ({clipped} clipped), {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------

def test_c02_first_step_equivalence(verdict):
    trails = {}
    for alg in ("ppo", "copg"):
        trail = []
        train(nav_config(alg, 0, epochs_per_batch=1, total_batches=10),
              on_batch=lambda k, b, old, new, info: trail.append(new.params.values.copy()))
        trails[alg] = trail
    diffs = [float(np.max(np.abs(a - b))) for a, b in zip(trails["ppo"], trails["copg"])]
    verdict("C2 first-step equivalence", len(diffs) == 10 and max(diffs) <= 1e-10,
            f"max parameter difference {max(diffs):.1e} over {len(diffs)} batches")


# 3 ---------------------------------------------------------------------------

def test_c03_pessimism_bounds(verdict):
    rng = np.random.default_rng(2024)
    p = const_policy(0.0, 0.0)
    violations = 0
    n = 10_000
    ratios = np.exp(rng.uniform(-3, 3, n))
    advs = rng.normal(0, 3, n)
    epsilons = rng.uniform(0.01, 0.99, n)
    actions = rng.normal(size=(n, 1))
    for rho, adv, eps, a in zip(ratios, advs, epsilons, actions):
        b = make_batch(p, np.zeros((1, 2)), [a], [adv], log_ratio=[np.log(rho)])
        clip = ClipConfig(float(eps))
        lp = log_prob_terms(p, b.states, b.actions, False)[0][0]
        r = np.exp(lp - b.old_log_probs[0])
        if not ppo_clip(p, b, clip).per_sample_objective[0] <= r * adv:
            violations += 1
        if not copg(p, b, clip).per_sample_objective[0] <= lp * adv:
            violations += 1
    verdict("C3 pessimism bounds", violations == 0, f"{violations} violations over {n} triples")


# 4 ---------------------------------------------------------------------------

def rel_err(analytic, numeric):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12))


def test_c04_gradient_correctness(verdict):
    start = time.perf_counter()
    worst = {}
    clip = ClipConfig(0.2)
    for inst in range(100):
        rng = np.random.default_rng(10_000 + inst)
        p = rand_policy(inst, obs=3, act=2, hidden=(5, 4))
        n = 10
        states = rng.normal(size=(n, 3))
        raw = p.mean(states) + p.std() * rng.normal(size=(n, 2))
        bounded = bool(inst % 2)
        b = make_batch(p, states, raw, rng.normal(size=n), bounded=bounded,
                       episode_ids=np.sort(rng.integers(0, 3, n)), rewards=rng.normal(size=n),
                       log_ratio=rng.normal(0, 0.3, n))
        theta = p.params.values
        checks = {
            "vanilla": (vanilla_pg, {}), "ppo": (ppo_clip, {"clip": clip}), "copg": (copg, {"clip": clip}),
        }
        for name, (fn, kw) in checks.items():
            g = fn(p, b, **kw).grad.values
            worst[name] = max(worst.get(name, 0.0), rel_err(g, fd(lambda t: fn(p.with_params(t), b, **kw).loss, theta)))
        rep = offpolicy_pg(p, b, use_advantages=bool(inst % 3 == 0))
        coeffs = importance_weights(b, rep.new_log_probs, bool(inst % 3 == 0))
        num = fd(lambda t: -np.mean(coeffs * log_prob_terms(p.with_params(t), b.states, b.actions, bounded)[0]),
                 theta)
        worst["offpolicy"] = max(worst.get("offpolicy", 0.0), rel_err(rep.grad.values, num))

        net = Mlp.init((3, 6, 1), rng)
        y = rng.normal(size=n)
        _, gv = value_loss_grad(net, states, y)
        worst["value"] = max(worst.get("value", 0.0),
                             rel_err(gv.values, fd(lambda t: value_loss(net.with_params(t), states, y), net.params.values)))

        old_mean, old_ls = p.mean(states), p.effective_log_std()
        q = p.with_params(theta + 0.05 * rng.normal(size=theta.size))
        gk = mean_kl_grad(q, b, old_mean, old_ls).values
        worst["kl"] = max(worst.get("kl", 0.0), rel_err(
            gk, fd(lambda t: mean_kl(q.with_params(t), b, old_mean, old_ls), q.params.values)))

        v = rng.normal(size=theta.size)
        h = 1e-5
        hv = (mean_kl_grad(p.with_params(theta + h * v), b, old_mean, old_ls).values
              - mean_kl_grad(p.with_params(theta - h * v), b, old_mean, old_ls).values) / (2 * h)
        worst["fvp"] = max(worst.get("fvp", 0.0), rel_err(fisher_vector_product(p, b, v, 0.0).values, hv))
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-4 for k, e in worst.items() if k != "fvp") and worst["fvp"] < 1e-3 and elapsed < 120
    detail = ", ".join(f"{k} {e:.1e}" for k, e in worst.items())
    verdict("C4 gradient correctness", ok, f"worst rel err: {detail}; {elapsed:.1f}s")


# 5 ---------------------------------------------------------------------------

def test_c05_variance_ordering(verdict):
    cfg = nav_config("copg", 0, steps_per_batch=4000, num_envs=4)
    policy, batch = fresh_batch(cfg)
    adam = AdamState.fresh(policy.params, cfg.policy_lr)
    params, _ = adam_step(adam, policy.params, copg(policy, batch, cfg.clip).grad)
    policy = policy.with_params(params)
    wins = 0
    ratios = []
    for trial in range(20):
        v = {obj: minibatch_grad_norm_variance(policy, batch, obj, cfg.clip, 16, np.random.default_rng(trial),
                                              use_advantages=False)
             for obj in ("offpolicy", "ppo", "copg")}
        wins += v["offpolicy"] > v["ppo"] and v["offpolicy"] > v["copg"]
        ratios.append(v["offpolicy"] / max(v["ppo"], v["copg"]))
    verdict("C5 variance ordering", wins >= 18,
            f"off-policy variance highest in {wins}/20 trials (median ratio {np.median(ratios):.2f})")


# 6 ---------------------------------------------------------------------------

def test_c06_gae_oracle(verdict):
    worst = 0.0
    rng = np.random.default_rng(6)
    for _ in range(200):
        T = int(rng.integers(1, 30))
        r, v = rng.normal(size=T), rng.normal(size=T)
        term = float(rng.normal())
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0))
        v_next = np.append(v[1:], term)
        delta = r + gamma * v_next - v
        oracle = [sum((gamma * lam) ** l * delta[t + l] for l in range(T - t)) for t in range(T)]
        worst = max(worst, float(np.max(np.abs(gae(r, v, term, AdvantageConfig(gamma, lam)).advantage - oracle))))
        td = gae(r, v, term, AdvantageConfig(gamma, 0.0)).advantage
        worst = max(worst, float(np.max(np.abs(td - delta))))
        mc = gae(r, np.zeros(T), 0.0, AdvantageConfig(gamma, 1.0)).advantage
        ret = [sum(gamma ** (k - t) * r[k] for k in range(t, T)) for t in range(T)]
        worst = max(worst, float(np.max(np.abs(mc - ret))))
    verdict("C6 GAE oracle", worst <= 1e-12, f"max abs err {worst:.1e} over 200 random cases")


# 7 ---------------------------------------------------------------------------

def test_c07_trpo_safety(verdict):
    delta = 0.01
    cfg = TrainConfig(algorithm="trpo", env="pendulum", steps_per_batch=1000, num_envs=1, total_batches=130,
                      trust_region=TrustRegionConfig(kl_limit=delta), value_epochs=40, seed=7)
    kls, gains = [], []

    def hook(k, batch, old, new, info):
        if info.accepted:
            kls.append(mean_kl(new, batch, batch.old_means, batch.old_log_std))
            gains.append(surrogate_value(new, batch) - surrogate_value(old, batch))

    train(cfg, on_batch=hook)
    kls, gains = kls[:100], gains[:100]
    ok = len(kls) == 100 and max(kls) <= 1.1 * delta and min(gains) >= 0
    verdict("C7 TRPO safety", ok, f"{len(kls)} accepted updates, max KL {max(kls):.5f} "
                                 f"(limit {1.1 * delta:.4f}), min improvement {min(gains):.2e}")


# 8 ---------------------------------------------------------------------------

def test_c08_entropy_claim(verdict, nav_runs):
    runs, elapsed = nav_runs
    parts = []
    ok = elapsed <= 30 * 60
    for name in ("policy_entropy", "policy_entropy_bounded"):
        ppo = column(runs["ppo"], name).mean(axis=0)[11:]
        cop = column(runs["copg"], name).mean(axis=0)[11:]
        share = float(np.mean(cop >= ppo))
        ok &= share >= 0.7
        parts.append(f"{name} COPG>=PPO in {share:.0%} of batches")
    verdict("C8 entropy claim", ok, "; ".join(parts) + f"; runs took {elapsed / 60:.1f} min")


# 9 ---------------------------------------------------------------------------

def test_c09_learning_claim(verdict, nav_runs):
    runs, _ = nav_runs
    per_seed = {alg: column(runs[alg], "mean_episode_return")[:, -WINDOW:].mean(axis=1) for alg in runs}
    final = {alg: float(v.mean()) for alg, v in per_seed.items()}
    baseline, _ = random_policy_return("pointnav", NAV_ENV, 200, 0)
    ok = final["copg"] >= final["ppo"] and beats_3x(final["copg"], baseline) and beats_3x(final["ppo"], baseline)
    verdict("C9 learning claim", ok, f"final-window return COPG {final['copg']:.3f} (seed std {per_seed['copg'].std():.3f}), "
                                     f"PPO {final['ppo']:.3f} (seed std {per_seed['ppo'].std():.3f}), "
                                     f"random {baseline:.3f}")


# 10 --------------------------------------------------------------------------

RCPO_SEEDS = [0, 1, 2]
RCPO_LR = 0.002


def test_c10_constrained_convergence(verdict):
    separate = {**NAV_ENV, "cost_mode": "separate"}
    ref = [train(nav_config("copg", s, separate)).metrics for s in RCPO_SEEDS]
    d = 0.5 * float(column(ref, "mean_episode_cost")[:, -WINDOW:].mean())
    runs = [train(nav_config("copg", s, separate, total_batches=150,
                             constrained=ConstraintSpec(d, RCPO_LR))).metrics for s in RCPO_SEEDS]
    cost = float(column(runs, "mean_episode_cost")[:, -WINDOW:].mean())
    lam = column(runs, "lam")[:, -WINDOW:]
    lam_rel = float(np.max(lam.std(axis=1) / lam.mean(axis=1)))
    ok = abs(cost - d) <= 0.2 * d and lam_rel < 0.2
    verdict("C10 constrained convergence", ok, f"target d {d:.3f}, final-window cost {cost:.3f} "
                                               f"({(cost - d) / d:+.0%}), worst lambda std/mean {lam_rel:.1%}")


# 11 --------------------------------------------------------------------------

def test_c11_tail_mass(verdict):
    worst = 0.0
    grid = 0
    for offset in np.linspace(-8, 8, 17):
        for log_std in (-1.0, 0.0, 0.5):
            std = np.exp(log_std)
            mean = 1.0 + offset * std  # z = (high - mean) / std = -offset
            p = const_policy(mean, log_std, -1.0, 1.0)
            upper, _ = integrate.quad(lambda x: stats.norm.pdf(x, mean, std), 1.0, np.inf,
                                      epsabs=0, epsrel=1e-13, limit=200)
            lower, _ = integrate.quad(lambda x: stats.norm.pdf(x, mean, std), -np.inf, -1.0,
                                      epsabs=0, epsrel=1e-13, limit=200)
            for bound, mass in ((1.0, upper), (-1.0, lower)):
                got = np.exp(log_prob_bounded(p, np.zeros(2), np.array([bound])))
                worst = max(worst, abs(got - mass) / max(mass, 1e-300) if mass > 0 else abs(got))
                grid += 1
    verdict("C11 clipped-action tail mass", worst < 1e-6,
            f"max relative error {worst:.1e} over {grid} (offset, std, bound) cases, |z| up to 8")


# 12 --------------------------------------------------------------------------

def test_c12_determinism(verdict):
    configs = [nav_config("copg", 3, total_batches=3),
               nav_config("ppo", 4, total_batches=3, minibatch_count=4),
               TrainConfig(algorithm="trpo", env="pendulum", steps_per_batch=600, num_envs=3, total_batches=3),
               nav_config("copg", 5, {**NAV_ENV, "cost_mode": "separate"}, total_batches=3,
                          constrained=ConstraintSpec(2.0, 0.05))]
    same = [metrics_csv(train(c).metrics) == metrics_csv(train(c).metrics) for c in configs]
    verdict("C12 determinism", all(same), f"{sum(same)}/{len(same)} configurations byte-identical on rerun")
