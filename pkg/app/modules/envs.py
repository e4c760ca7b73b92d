"""
Built-in Environments
Seed-reproducible episodic environments with discrete actions:
a frame-skipped Flappy-style game and LineWorld, a corridor MDP with an
exact value-iteration oracle.
"""
from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional, Union

import numpy as np

from app.models import EnvConfig, EnvName, FlappyConfig, LineWorldConfig
from app.modules.nn_core import MlpPolicy, greedy_action
from app.modules.seeding import SplitMix64

logger = logging.getLogger(__name__)

NOOP, FLAP = 0, 1
LEFT, RIGHT = 0, 1


class EpisodeFinishedError(RuntimeError):
    """Raised when step() is called on an episode that has already ended."""
    pass


class InvalidActionError(ValueError):
    """Raised when an action index is outside the environment's action set."""
    pass


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class Environment(ABC):
    name: EnvName
    observation_dim: int
    n_actions: int
    discrete_actions: bool = True

    def __init__(self):
        self._done = True

    @property
    def done(self) -> bool:
        return self._done

    @abstractmethod
    def reset(self, seed: int = 0) -> np.ndarray:
        ...

    @abstractmethod
    def step(self, action: int) -> EnvStep:
        ...

    def _check_step(self, action: int) -> None:
        if self._done:
            raise EpisodeFinishedError(f"{self.name.value}: step() after episode end; call reset()")
        if not 0 <= int(action) < self.n_actions:
            raise InvalidActionError(f"{self.name.value}: action {action} not in [0, {self.n_actions})")


# ── Flappy ────────────────────────────────────────────────────────────────────

class FlappyEnv(Environment):
    """
    Vertical axis points down: gravity is positive, a flap sets the velocity
    to flap_impulse. The bird stays at a fixed x; each physics tick the next
    pipe column moves one tick closer. Pipe gap centers come from a
    SplitMix64 stream seeded by the episode seed.
    """
    name = EnvName.FLAPPY
    observation_dim = 5
    n_actions = 2

    def __init__(self, config: Optional[FlappyConfig] = None):
        super().__init__()
        self.config = config or FlappyConfig()
        self._rng = SplitMix64(0)
        self.y = 0.0
        self.vy = 0.0
        self.dx = 0
        self.gap_center = 0.0
        self.ticks = 0
        self.surviving_ticks = 0
        self.pipes_passed = 0
        self.crashed = False

    def _draw_gap(self) -> float:
        lo, hi = self.config.gap_center_bounds
        return self._rng.uniform(lo, hi)

    def reset(self, seed: int = 0) -> np.ndarray:
        cfg = self.config
        self._rng = SplitMix64(seed)
        self.y = cfg.world_height / 2
        self.vy = 0.0
        self.dx = cfg.pipe_spacing
        self.gap_center = self._draw_gap()
        self.ticks = 0
        self.surviving_ticks = 0
        self.pipes_passed = 0
        self.crashed = False
        self._done = False
        return self.observation()

    def observation(self) -> np.ndarray:
        cfg = self.config
        h = cfg.world_height
        v_scale = max(abs(cfg.flap_impulse), cfg.max_fall_speed)
        half_gap = cfg.pipe_gap / 2
        obs = np.array([
            2.0 * self.y / h - 1.0,
            self.vy / v_scale,
            2.0 * (self.dx + cfg.pipe_width) / (cfg.pipe_spacing + cfg.pipe_width) - 1.0,
            2.0 * (self.gap_center - half_gap) / h - 1.0,
            2.0 * (self.gap_center + half_gap) / h - 1.0,
        ])
        return np.clip(obs, -1.0, 1.0)

    def _collides(self) -> bool:
        cfg = self.config
        if self.y < 0.0 or self.y > cfg.world_height:
            return True
        in_column = self.dx <= 0 < self.dx + cfg.pipe_width
        half_gap = cfg.pipe_gap / 2
        in_gap = self.gap_center - half_gap <= self.y <= self.gap_center + half_gap
        return in_column and not in_gap

    def step(self, action: int) -> EnvStep:
        self._check_step(action)
        cfg = self.config
        reward = 0.0
        truncated = False
        for _ in range(cfg.frame_skip):
            if action == FLAP:
                self.vy = cfg.flap_impulse
            else:
                self.vy = min(self.vy + cfg.gravity, cfg.max_fall_speed)
            self.y += self.vy
            self.dx -= 1
            self.ticks += 1

            if self._collides():
                reward -= 1.0
                self.crashed = True
                self._done = True
                break

            self.surviving_ticks += 1
            reward += 0.1 / cfg.frame_skip

            if self.dx + cfg.pipe_width <= 0:
                reward += 1.0
                self.pipes_passed += 1
                self.dx += cfg.pipe_spacing
                self.gap_center = self._draw_gap()

            if self.ticks >= cfg.max_episode_ticks:
                truncated = True
                self._done = True
                break

        info = {
            "ticks": self.ticks,
            "surviving_ticks": self.surviving_ticks,
            "pipes_passed": self.pipes_passed,
            "crashed": self.crashed,
            "truncated": truncated,
        }
        return EnvStep(self.observation(), reward, self._done, info)


# ── LineWorld ─────────────────────────────────────────────────────────────────

class LineWorldEnv(Environment):
    """Cells 0..L-1, start at 0, terminal goal at L-1; the episode seed is unused."""
    name = EnvName.LINEWORLD
    n_actions = 2

    def __init__(self, config: Optional[LineWorldConfig] = None):
        super().__init__()
        self.config = config or LineWorldConfig()
        self.observation_dim = self.config.length
        self.position = 0
        self.steps = 0

    def reset(self, seed: int = 0) -> np.ndarray:
        self.position = 0
        self.steps = 0
        self._done = False
        return self.observation()

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.config.length)
        obs[self.position] = 1.0
        return obs

    def step(self, action: int) -> EnvStep:
        self._check_step(action)
        cfg = self.config
        move = 1 if action == RIGHT else -1
        self.position = min(max(self.position + move, 0), cfg.length - 1)
        self.steps += 1

        truncated = False
        if self.position == cfg.length - 1:
            reward = cfg.goal_reward
            self._done = True
        else:
            reward = -cfg.step_penalty
            if self.steps >= cfg.max_steps:
                truncated = True
                self._done = True

        info = {"position": self.position, "steps": self.steps, "truncated": truncated}
        return EnvStep(self.observation(), reward, self._done, info)


class OracleSolution(NamedTuple):
    q_values: np.ndarray       # (L, 2); terminal row stays 0
    policy: np.ndarray         # greedy action per non-terminal cell, length L-1
    residuals: list[float]     # max-norm Bellman residual per sweep


def value_iteration_oracle(
    config: LineWorldConfig,
    gamma: float,
    tol: float = 1e-12,
    max_sweeps: int = 1_000_000,
) -> OracleSolution:
    """Exact tabular Q* for LineWorld (no step cap) by synchronous Bellman sweeps."""
    L = config.length
    goal = L - 1
    next_state = np.empty((L, 2), dtype=np.int64)
    rewards = np.empty((L, 2))
    for s in range(L):
        for a, move in ((LEFT, -1), (RIGHT, 1)):
            s2 = min(max(s + move, 0), goal)
            next_state[s, a] = s2
            rewards[s, a] = config.goal_reward if s2 == goal else -config.step_penalty

    q = np.zeros((L, 2))
    residuals: list[float] = []
    for _ in range(max_sweeps):
        v = q.max(axis=1)
        v[goal] = 0.0
        bootstrap = np.where(next_state == goal, 0.0, v[next_state])
        q_new = rewards + gamma * bootstrap
        q_new[goal] = 0.0
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        residuals.append(residual)
        if residual < tol:
            break
    else:
        logger.warning("Value iteration stopped after %d sweeps (residual %.3e)", max_sweeps, residuals[-1])

    policy = np.argmax(q[:goal], axis=1)
    return OracleSolution(q, policy, residuals)


# ── Factories & rollouts ──────────────────────────────────────────────────────

EnvFactory = Callable[[], Environment]


def make_env(config: EnvConfig) -> Environment:
    if config.name == EnvName.FLAPPY:
        return FlappyEnv(config.flappy)
    return LineWorldEnv(config.lineworld)


def env_factory(config: EnvConfig) -> EnvFactory:
    return lambda: make_env(config)


def run_episode(policy: MlpPolicy, env: Environment, seed: int) -> tuple[float, int]:
    """Greedy (argmax) rollout; returns (total reward, env steps)."""
    obs = env.reset(seed)
    total, steps = 0.0, 0
    done = False
    while not done:
        result = env.step(greedy_action(policy, obs))
        total += result.reward
        steps += 1
        obs, done = result.observation, result.done
    return total, steps


def evaluate_policy(
    policy: MlpPolicy,
    env: Environment,
    seeds: Iterable[int],
) -> tuple[list[float], int]:
    rewards, steps = [], 0
    for seed in seeds:
        r, n = run_episode(policy, env, seed)
        rewards.append(r)
        steps += n
    return rewards, steps


def dump_trajectory(
    policy: MlpPolicy,
    env: Environment,
    seed: int,
    path: Union[str, Path],
) -> int:
    """Write a greedy rollout as JSON lines of {obs, action, reward, done}; returns the step count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    obs = env.reset(seed)
    steps = 0
    with open(path, "w", encoding="utf-8") as f:
        done = False
        while not done:
            action = greedy_action(policy, obs)
            result = env.step(action)
            f.write(json.dumps({
                "obs": obs.tolist(),
                "action": action,
                "reward": result.reward,
                "done": result.done,
            }) + "\n")
            obs, done = result.observation, result.done
            steps += 1
    logger.info("Trajectory of %d steps written to %s", steps, path)
    return steps
