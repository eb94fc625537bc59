import math

import numpy as np
import pytest
from scipy import stats

from copg.envs import (ConfigurationError, Pendulum, PendulumConfig, PointNav, PointNavConfig,
                       env_config_dict, make_env)


def test_reset_places_agent_at_rest_at_origin():
    env = PointNav()
    obs = env.reset(seed=0)
    assert env.pos.tolist() == [0.0, 0.0] and env.speed == 0.0
    assert obs.shape == (13,) and obs[-1] == 0.0


def test_zero_hazards_zero_features():
    env = PointNav(PointNavConfig(hazard_count=0))
    obs = env.reset(seed=1)
    assert not obs[3:12].any()
    assert env.step([0.3, 0.2]).cost == 0.0


def test_same_seed_same_layout():
    a, b = PointNav(), PointNav()
    assert np.array_equal(a.reset(seed=7), b.reset(seed=7))
    assert a.describe() == b.describe()
    assert not np.array_equal(a.reset(seed=8), b.reset(seed=7))


@pytest.mark.parametrize("seed", range(20))
def test_layout_respects_clearances(seed):
    env = PointNav()
    env.reset(seed=seed)
    c = env.config
    gaps = np.linalg.norm(env.hazards - env.goal, axis=1)
    assert np.all(gaps >= c.goal_radius + c.hazard_radius)
    assert not env.in_hazard()
    assert np.all(np.abs(env.hazards) <= c.arena_half_width)


def test_goal_positions_uniform_chi_square():
    env = PointNav()
    goals = np.array([(env.reset(seed=s), env.goal)[1] for s in range(10_000)])
    edges = np.linspace(-1, 1, 6)
    counts, _, _ = np.histogram2d(goals[:, 0], goals[:, 1], bins=[edges, edges])
    assert stats.chisquare(counts.ravel()).pvalue > 0.01


def test_crowded_arena_raises():
    with pytest.raises(ConfigurationError):
        PointNav(PointNavConfig(hazard_count=1, hazard_radius=1.0, goal_radius=2.0)).reset(seed=0)


def test_zero_action_from_rest_is_a_no_op():
    env = PointNav()
    env.reset(seed=3)
    step = env.step([0.0, 0.0])
    assert env.pos.tolist() == [0.0, 0.0]
    assert step.reward == 0.0 and step.cost == 0.0
    assert not step.terminated and not step.truncated


def test_hazard_contact_costs_one():
    env = PointNav(PointNavConfig(cost_mode="in_reward", cost_weight=0.075))
    env.reset(seed=0)
    env.hazards = np.array([[0.0, 0.0]])
    step = env.step([0.0, 0.0])
    assert step.cost == 1.0
    assert step.reward == pytest.approx(-0.075, abs=1e-15)
    sep = PointNav(PointNavConfig(cost_mode="separate"))
    sep.reset(seed=0)
    sep.hazards = np.array([[0.0, 0.0]])
    assert sep.step([0.0, 0.0]).reward == 0.0


def steer_to_goal(env):
    d = env.goal - env.pos
    rel = (math.atan2(d[1], d[0]) - env.heading + math.pi) % (2 * math.pi) - math.pi
    return [1.0, float(np.clip(rel / env.config.max_turn, -1, 1))]


def test_dense_reward_telescopes():
    cfg = PointNavConfig(hazard_count=0, dense_reward_scale=2.5, goal_bonus=3.0)
    env = PointNav(cfg)
    env.reset(seed=11)
    start = env.goal_distance
    total, bonuses, travelled = 0.0, 0, 0.0
    for _ in range(400):
        before_goal = env.goal.copy()
        step = env.step(steer_to_goal(env))
        total += step.reward
        if not np.array_equal(env.goal, before_goal):
            bonuses += 1
            # distance to the old goal at contact, the reward's reference point
            travelled += start - np.linalg.norm(before_goal - env.pos)
            start = env.goal_distance
    travelled += start - env.goal_distance
    assert bonuses >= 1
    assert total == pytest.approx(2.5 * travelled + 3.0 * bonuses, abs=1e-9)


def test_truncation_at_max_steps():
    env = PointNav(PointNavConfig(max_steps=5))
    env.reset(seed=0)
    flags = [env.step([0.1, 0.1]).truncated for _ in range(5)]
    assert flags == [False] * 4 + [True]


def test_episode_cost_counts_contact_steps():
    env = PointNav()
    env.reset(seed=2)
    rng = np.random.default_rng(0)
    total, count = 0.0, 0
    for _ in range(500):
        step = env.step(rng.uniform(-1, 1, 2))
        total += step.cost
        count += env.in_hazard()
    assert total == count and float(total).is_integer()


def test_observations_bounded_and_finite():
    env = PointNav()
    env.reset(seed=5)
    rng = np.random.default_rng(1)
    for _ in range(300):
        obs = env.step(rng.uniform(-1, 1, 2)).observation
        assert np.all(np.isfinite(obs)) and np.all(np.abs(obs) <= 1.0 + 1e-12)


def test_full_determinism_of_streams():
    def run():
        env = PointNav()
        env.reset(seed=9)
        rng = np.random.default_rng(2)
        return [(s.observation.tobytes(), s.reward, s.cost) for s in
                (env.step(rng.uniform(-1, 1, 2)) for _ in range(200))]
    assert run() == run()


def test_pendulum_upright_rest_zero_reward():
    env = Pendulum()
    env.reset(state=(0.0, 0.0))
    assert env.step([0.0]).reward == 0.0


def test_pendulum_reward_formula():
    env = Pendulum()
    env.reset(state=(1.0, 2.0))
    assert env.step([1.5]).reward == pytest.approx(-(1.0 + 0.4 + 0.001 * 2.25), abs=1e-15)


def test_pendulum_truncates_at_200():
    env = Pendulum()
    env.reset(seed=0)
    flags = [env.step([0.0]).truncated for _ in range(200)]
    assert flags[-1] and not any(flags[:-1])


def test_pendulum_energy_conserved_per_step_at_fine_step():
    # symplectic Euler's per-step energy error is O(dt^2); at a fine step it is below 1e-6
    env = Pendulum(PendulumConfig(dt=5e-5, damping=0.0, max_speed=100.0))
    env.reset(state=(2.0, 0.5))
    worst = 0.0
    for _ in range(20_000):
        e0 = env.energy()
        env.step([0.0])
        worst = max(worst, abs(env.energy() - e0))
    assert worst < 1e-6


def test_pendulum_energy_has_no_secular_drift_at_default_step():
    env = Pendulum(PendulumConfig(max_speed=100.0, max_steps=10**6))
    env.reset(state=(2.0, 0.0))
    e0 = env.energy()
    drift = []
    for _ in range(20_000):
        env.step([0.0])
        drift.append(env.energy() - e0)
    drift = np.abs(drift)
    # bounded oscillation, no growth between the first and last stretch
    assert drift[-2000:].max() < 1.5 * drift[:2000].max()


def test_pendulum_determinism():
    def run():
        env = Pendulum()
        env.reset(seed=4)
        return [env.step([np.sin(k)]).observation.tobytes() for k in range(100)]
    assert run() == run()


def test_make_env_rejects_unknown_keys_and_names():
    with pytest.raises(ConfigurationError):
        make_env("pointnav", {"hazards": 3})
    with pytest.raises(ConfigurationError):
        make_env("cartpole")
    env = make_env("pendulum", {"dt": 0.01})
    assert env_config_dict(env)["dt"] == 0.01


def test_config_validation():
    with pytest.raises((ConfigurationError, ValueError)):
        PointNavConfig(hazard_radius=0.0)
    with pytest.raises((ConfigurationError, ValueError)):
        PointNavConfig(hazard_count=-1)
    with pytest.raises((ConfigurationError, ValueError)):
        PointNavConfig(cost_mode="both")
