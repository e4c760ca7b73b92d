"""
DQN Trainer
ε-greedy acting, ring replay buffer, target network and squared TD-error
regression with a hand-written Adam step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from app.models import Algorithm, CurveRow, DqnConfig, LearningCurve, MlpSpec, PolicyConfig
from app.modules.envs import EnvFactory, Environment, evaluate_policy
from app.modules.nn_core import (
    MlpPolicy,
    ShapeMismatchError,
    TdBatch,
    backward_td,
    flatten,
    forward,
    greedy_action,
    init_policy,
    save_checkpoint,
    unflatten,
)
from app.modules.seeding import derive_seed

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_INIT_SALT = 0x494E4954      # "INIT"
_TRAIN_EP_SALT = 0x54524E45  # "TRNE"
_EVAL_SALT = 0x4556414C      # "EVAL"


class UnsupportedEnvironmentError(ValueError):
    """Raised when DQN is asked to train on an environment without discrete actions."""
    pass


@dataclass(frozen=True, eq=False)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class TransitionBatch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


# ── Replay buffer ─────────────────────────────────────────────────────────────

class ReplayBuffer:
    """Fixed-capacity ring store; once full each insert overwrites the oldest entry."""

    def __init__(self, capacity: int, observation_dim: int):
        if capacity < 1:
            raise ValueError("replay buffer capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, observation_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, observation_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action: int, reward: float, next_state, done: bool) -> None:
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, transition: Transition) -> None:
        self.add(transition.state, transition.action, transition.reward, transition.next_state, transition.done)

    def gather(self, indices: np.ndarray) -> TransitionBatch:
        return TransitionBatch(
            self.states[indices],
            self.actions[indices],
            self.rewards[indices],
            self.next_states[indices],
            self.dones[indices],
        )

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        return self.gather(self.sample_indices(batch_size, rng))

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.size)]
        return [
            Transition(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                       self.next_states[i].copy(), bool(self.dones[i]))
            for i in order
        ]


# ── Acting & targets ──────────────────────────────────────────────────────────

def epsilon_at(step: int, config: DqnConfig) -> float:
    """Linear anneal eps_start → eps_end over eps_anneal_fraction · total_timesteps, then flat."""
    anneal_steps = config.eps_anneal_fraction * config.total_timesteps
    if anneal_steps <= 0 or step >= anneal_steps:
        return config.eps_end
    return config.eps_start + (config.eps_end - config.eps_start) * (step / anneal_steps)


def select_action(policy: MlpPolicy, observation, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(policy.spec.output_dim))
    return greedy_action(policy, observation)


def _as_batch(batch: Union[TransitionBatch, Sequence[Transition]]) -> TransitionBatch:
    if isinstance(batch, TransitionBatch):
        return batch
    if len(batch) == 0:
        raise ShapeMismatchError("transition batch is empty")
    return TransitionBatch(
        np.array([t.state for t in batch], dtype=np.float64),
        np.array([t.action for t in batch], dtype=np.int64),
        np.array([t.reward for t in batch], dtype=np.float64),
        np.array([t.next_state for t in batch], dtype=np.float64),
        np.array([t.done for t in batch], dtype=bool),
    )


def td_targets(
    target_policy: MlpPolicy,
    batch: Union[TransitionBatch, Sequence[Transition]],
    gamma: float,
) -> np.ndarray:
    """y = r on terminal transitions, else r + γ max_a' Q(s', a'; θ⁻)."""
    b = _as_batch(batch)
    next_q = forward(target_policy, np.atleast_2d(b.next_states)).max(axis=1)
    with np.errstate(invalid="ignore", over="ignore"):
        bootstrap = b.rewards + gamma * next_q
    return np.where(b.dones, b.rewards, bootstrap)


# ── Optimizer ─────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, d: int) -> "AdamState":
        return cls(np.zeros(d), np.zeros(d))


def adam_update(theta: np.ndarray, grad: np.ndarray, state: AdamState, learning_rate: float) -> np.ndarray:
    """One Adam descent step; updates `state` in place and returns the new θ."""
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.t)
    return theta - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ── Training ──────────────────────────────────────────────────────────────────

def train_step(
    online: MlpPolicy,
    target: MlpPolicy,
    buffer: ReplayBuffer,
    config: DqnConfig,
    optimizer: AdamState,
    rng: np.random.Generator,
    step: int,
) -> tuple[MlpPolicy, Optional[float]]:
    """
    One minibatch regression of the online net onto target-network TD targets.
    Returns (online, None) without touching anything while the buffer is
    warming up (step < learning_starts or fewer than batch_size transitions).
    """
    if len(buffer) < config.batch_size or step < (config.learning_starts or 0):
        return online, None
    batch = buffer.sample(config.batch_size, rng)
    y = td_targets(target, batch, config.gamma)
    grad, loss = backward_td(online, TdBatch(batch.states, batch.actions, y))
    theta = adam_update(flatten(online), grad, optimizer, config.learning_rate)
    return unflatten(online.spec, theta), loss


def sync_target(online: MlpPolicy, target: Optional[MlpPolicy] = None) -> MlpPolicy:
    """θ⁻ ← θ; returns a bit-exact copy of the online network."""
    if target is not None and target.spec != online.spec:
        raise ShapeMismatchError(f"target spec {target.spec} does not match online spec {online.spec}")
    return unflatten(online.spec, flatten(online))


def default_eval_seeds(seed: int, episodes: int) -> list[int]:
    """Held-out evaluation episode seeds for a run seed."""
    return [derive_seed(seed, _EVAL_SALT, i) for i in range(episodes)]


@dataclass
class DqnRunOptions:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval_seeds: Optional[list[int]] = None
    eval_episodes: int = 10
    env_steps_offset: int = 0
    clock_offset_s: float = 0.0
    checkpoint_dir: Optional[Path] = None
    algo: Algorithm = Algorithm.DQN
    run_seed: Optional[int] = None


def _check_env(env: Environment, spec: Optional[MlpSpec]) -> None:
    if not env.discrete_actions:
        raise UnsupportedEnvironmentError(f"{env.name.value} does not have a discrete action space")
    if spec is not None and (spec.input_dim != env.observation_dim or spec.output_dim != env.n_actions):
        raise ShapeMismatchError(
            f"policy maps {spec.input_dim}->{spec.output_dim}, env needs {env.observation_dim}->{env.n_actions}"
        )


def run_dqn(
    make_env: EnvFactory,
    config: DqnConfig,
    initial_policy: Optional[MlpPolicy] = None,
    options: Optional[DqnRunOptions] = None,
) -> tuple[MlpPolicy, LearningCurve]:
    """
    Full DQN loop over `config.num_envs` lock-step environments. The curve gets
    a row at step 0 and every `eval_every` training steps (plus the final step),
    each from greedy episodes on held-out seeds.
    """
    opts = options or DqnRunOptions()
    envs = [make_env() for _ in range(config.num_envs)]
    eval_env = make_env()
    _check_env(eval_env, initial_policy.spec if initial_policy is not None else None)

    spec = initial_policy.spec if initial_policy is not None else opts.policy.to_spec(
        eval_env.observation_dim, eval_env.n_actions
    )
    online = initial_policy if initial_policy is not None else init_policy(spec, derive_seed(config.seed, _INIT_SALT))
    target = sync_target(online)

    run_seed = config.seed if opts.run_seed is None else opts.run_seed
    eval_seeds = opts.eval_seeds or default_eval_seeds(run_seed, opts.eval_episodes)
    curve = LearningCurve(algo=opts.algo, seed=run_seed, env=eval_env.name)
    start = time.monotonic()
    last_loss: Optional[float] = None

    def record(step: int) -> None:
        rewards, _ = evaluate_policy(online, eval_env, eval_seeds)
        row = CurveRow(
            iteration=step,
            env_steps_cum=opts.env_steps_offset + step,
            wall_clock_s=opts.clock_offset_s + (time.monotonic() - start),
            mean_reward=float(np.mean(rewards)),
            std_reward=float(np.std(rewards)),
            epsilon=epsilon_at(step, config),
            loss=last_loss,
        )
        curve.rows.append(row)
        logger.info(
            "dqn step %d | eval %.4f ± %.4f | eps %.4f | loss %s",
            step, row.mean_reward, row.std_reward, row.epsilon,
            "n/a" if last_loss is None else f"{last_loss:.6f}",
        )

    record(0)
    if config.total_timesteps == 0:
        return online, curve

    buffer = ReplayBuffer(config.buffer_capacity, eval_env.observation_dim)
    optimizer = AdamState.zeros(spec.param_count)
    rng = np.random.default_rng(config.seed)
    episodes = [0] * len(envs)
    observations = [env.reset(derive_seed(config.seed, _TRAIN_EP_SALT, k, 0)) for k, env in enumerate(envs)]

    step = 0
    while step < config.total_timesteps:
        for k, env in enumerate(envs):
            if step >= config.total_timesteps:
                break
            action = select_action(online, observations[k], epsilon_at(step, config), rng)
            result = env.step(action)
            # a truncated episode is not terminal; keep its bootstrap
            terminal = result.done and not result.info.get("truncated", False)
            buffer.add(observations[k], action, result.reward, result.observation, terminal)
            if result.done:
                episodes[k] += 1
                observations[k] = env.reset(derive_seed(config.seed, _TRAIN_EP_SALT, k, episodes[k]))
            else:
                observations[k] = result.observation
            step += 1

            if step % config.train_every == 0:
                online, loss = train_step(online, target, buffer, config, optimizer, rng, step)
                if loss is not None:
                    last_loss = loss
            if step % config.target_sync_every == 0:
                target = sync_target(online, target)
            if config.checkpoint_every and step % config.checkpoint_every == 0 and opts.checkpoint_dir:
                save_checkpoint(online, Path(opts.checkpoint_dir) / f"checkpoint_{step}.evsd")
            if step % config.eval_every == 0 or step == config.total_timesteps:
                record(step)

    return online, curve
