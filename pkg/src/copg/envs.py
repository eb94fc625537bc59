"""Small deterministic continuous-control environments.

``PointNav`` is a goal-seeking unicycle in a square arena strewn with circular
hazards; stepping inside a hazard costs 1. ``Pendulum`` is the torque-limited
swing-up task with no cost signal.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

DYNAMICS_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    cost: float
    terminated: bool
    truncated: bool


@dataclass(frozen=True)
class PointNavConfig:
    arena_half_width: float = 1.0
    hazard_count: int = 8
    hazard_radius: float = 0.15
    goal_radius: float = 0.2
    max_steps: int = 1000
    dense_reward_scale: float = 1.0
    goal_bonus: float = 1.0
    # "in_reward" subtracts cost_weight * cost from the reward; "separate" leaves it out
    cost_mode: str = "in_reward"
    cost_weight: float = 0.075
    nearest_hazards: int = 3
    # dynamics, per step
    damping: float = 0.9
    max_speed_fraction: float = 0.05
    accel_fraction: float = 0.01
    max_turn: float = 0.25

    def __post_init__(self):
        if self.hazard_radius <= 0 or self.goal_radius <= 0 or self.arena_half_width <= 0:
            raise ConfigurationError("radii and arena size must be positive")
        if self.hazard_count < 0:
            raise ConfigurationError("hazard_count must be >= 0")
        if self.cost_mode not in ("in_reward", "separate"):
            raise ConfigurationError(f"cost_mode must be 'in_reward' or 'separate', got {self.cost_mode!r}")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")


class PointNav:
    name = "pointnav"

    def __init__(self, config: PointNavConfig | None = None):
        self.config = config or PointNavConfig()
        c = self.config
        self.observation_dim = 3 + 3 * c.nearest_hazards + 1
        self.action_low = np.array([-1.0, -1.0])
        self.action_high = np.array([1.0, 1.0])
        self.max_speed = c.max_speed_fraction * c.arena_half_width
        self._rng: np.random.Generator | None = None

    def _uniform_point(self) -> np.ndarray:
        a = self.config.arena_half_width
        return self._rng.uniform(-a, a, size=2)

    def _place_goal(self) -> np.ndarray:
        c = self.config
        gap = c.goal_radius + c.hazard_radius
        for _ in range(1000):
            p = self._uniform_point()
            if self.hazards.size == 0 or np.all(np.linalg.norm(self.hazards - p, axis=1) >= gap):
                return p
        raise ConfigurationError("could not place goal clear of hazards; arena too crowded")

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Agent at the origin at rest; goal first, then hazards kept clear of the goal and the spawn point."""
        c = self.config
        self._rng = np.random.default_rng(seed)
        self.pos = np.zeros(2)
        self.heading = 0.0
        self.speed = 0.0
        self.t = 0
        self.hazards = np.zeros((0, 2))
        self.goal = self._uniform_point()
        gap = c.goal_radius + c.hazard_radius
        hazards = []
        tries = 0
        while len(hazards) < c.hazard_count:
            tries += 1
            if tries > 1000:
                raise ConfigurationError("could not place hazards after 1000 samples; arena too crowded")
            p = self._uniform_point()
            if np.linalg.norm(p - self.goal) >= gap and np.linalg.norm(p) >= c.hazard_radius:
                hazards.append(p)
        self.hazards = np.array(hazards).reshape(-1, 2)
        self.goal_distance = float(np.linalg.norm(self.goal - self.pos))
        return self._observe()

    def _ego(self, target: np.ndarray):
        d = target - self.pos
        dist = math.hypot(d[0], d[1])
        rel = math.atan2(d[1], d[0]) - self.heading
        return dist, math.sin(rel), math.cos(rel)

    def _observe(self) -> np.ndarray:
        c = self.config
        scale = 2.0 * math.sqrt(2.0) * c.arena_half_width
        obs = np.zeros(self.observation_dim)
        dist, s, co = self._ego(self.goal)
        obs[0:3] = dist / scale, s, co
        if self.hazards.size:
            dists = np.linalg.norm(self.hazards - self.pos, axis=1)
            order = np.argsort(dists, kind="stable")[:c.nearest_hazards]
            for k, j in enumerate(order):
                hd, hs, hc = self._ego(self.hazards[j])
                obs[3 + 3 * k: 6 + 3 * k] = hd / scale, hs, hc
        obs[-1] = self.speed / self.max_speed
        return obs

    def in_hazard(self) -> bool:
        if self.hazards.size == 0:
            return False
        return bool(np.any(np.linalg.norm(self.hazards - self.pos, axis=1) < self.config.hazard_radius))

    def step(self, action) -> EnvStep:
        """Unicycle step: action = (forward acceleration, turn rate), each in [-1, 1]."""
        c = self.config
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        accel = c.accel_fraction * c.arena_half_width
        self.speed = float(np.clip(c.damping * self.speed + accel * a[0], -self.max_speed, self.max_speed))
        self.heading = (self.heading + c.max_turn * a[1] + math.pi) % (2 * math.pi) - math.pi
        step_vec = self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])
        self.pos = np.clip(self.pos + step_vec, -c.arena_half_width, c.arena_half_width)
        self.t += 1

        new_distance = float(np.linalg.norm(self.goal - self.pos))
        reward = c.dense_reward_scale * (self.goal_distance - new_distance)
        if new_distance < c.goal_radius:
            reward += c.goal_bonus
            self.goal = self._place_goal()
            new_distance = float(np.linalg.norm(self.goal - self.pos))
        self.goal_distance = new_distance
        cost = 1.0 if self.in_hazard() else 0.0
        if c.cost_mode == "in_reward":
            reward -= c.cost_weight * cost
        return EnvStep(self._observe(), float(reward), cost, False, self.t >= c.max_steps)

    def describe(self) -> str:
        lines = [f"pointnav t={self.t} pos=({self.pos[0]:.4f}, {self.pos[1]:.4f}) "
                 f"heading={self.heading:.4f} speed={self.speed:.4f}",
                 f"goal=({self.goal[0]:.4f}, {self.goal[1]:.4f}) r={self.config.goal_radius}"]
        for i, h in enumerate(self.hazards):
            lines.append(f"hazard[{i}]=({h[0]:.4f}, {h[1]:.4f}) r={self.config.hazard_radius}")
        return "\n".join(lines)


@dataclass(frozen=True)
class PendulumConfig:
    max_speed: float = 8.0
    max_torque: float = 2.0
    dt: float = 0.05
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.0
    max_steps: int = 200


def angle_normalize(x):
    return ((x + math.pi) % (2 * math.pi)) - math.pi


class Pendulum:
    """Swing-up; angle 0 is upright. Symplectic Euler: velocity first, then angle."""

    name = "pendulum"

    def __init__(self, config: PendulumConfig | None = None):
        self.config = config or PendulumConfig()
        self.observation_dim = 3
        self.action_low = np.array([-self.config.max_torque])
        self.action_high = np.array([self.config.max_torque])

    def reset(self, seed: int | None = None, state=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if state is None:
            self.theta = float(rng.uniform(-math.pi, math.pi))
            self.theta_dot = float(rng.uniform(-1.0, 1.0))
        else:
            self.theta, self.theta_dot = float(state[0]), float(state[1])
        self.t = 0
        return self._observe()

    def _observe(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def energy(self) -> float:
        c = self.config
        return 0.5 * self.theta_dot ** 2 + 1.5 * c.gravity / c.length * math.cos(self.theta)

    def step(self, action) -> EnvStep:
        c = self.config
        u = float(np.clip(np.ravel(action)[0], -c.max_torque, c.max_torque))
        th, thdot = self.theta, self.theta_dot
        reward = -(angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        accel = 1.5 * c.gravity / c.length * math.sin(th) + 3.0 / (c.mass * c.length ** 2) * u - c.damping * thdot
        thdot = float(np.clip(thdot + accel * c.dt, -c.max_speed, c.max_speed))
        self.theta = th + thdot * c.dt
        self.theta_dot = thdot
        self.t += 1
        return EnvStep(self._observe(), reward, 0.0, False, self.t >= c.max_steps)

    def describe(self) -> str:
        return f"pendulum t={self.t} theta={self.theta:.6f} theta_dot={self.theta_dot:.6f}"


ENV_CONFIGS = {"pointnav": PointNavConfig, "pendulum": PendulumConfig}
ENVS = {"pointnav": PointNav, "pendulum": Pendulum}


def make_env(name: str, config: dict[str, Any] | None = None):
    if name not in ENVS:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {sorted(ENVS)}")
    cfg_cls = ENV_CONFIGS[name]
    known = set(cfg_cls.__dataclass_fields__)
    unknown = set(config or {}) - known
    if unknown:
        raise ConfigurationError(f"unknown {name} config keys: {sorted(unknown)}")
    return ENVS[name](cfg_cls(**(config or {})))


def env_config_dict(env) -> dict[str, Any]:
    return asdict(env.config)
