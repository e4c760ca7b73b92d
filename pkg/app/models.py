"""
Pydantic models: network/algorithm/environment configs, worker wire messages,
log rows and API response schemas.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

U64_MAX = 2**64 - 1


# ── Enums ────────────────────────────────────────────────────────────────────

class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"


class FitnessShaping(str, Enum):
    RAW = "raw"
    CENTERED_RANK = "centered_rank"
    STANDARDIZED = "standardized"


class TransferMode(str, Enum):
    FULL = "full"
    HIDDEN_ONLY = "hidden_only"


class Algorithm(str, Enum):
    ES = "es"
    DQN = "dqn"
    ES_THEN_DQN = "es_then_dqn"


class EnvName(str, Enum):
    FLAPPY = "flappy"
    LINEWORLD = "lineworld"


# ── Network ──────────────────────────────────────────────────────────────────

class MlpSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_dim: int = Field(ge=1)
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = Field(ge=1)
    activation: Activation = Activation.TANH

    @field_validator("hidden_dims")
    @classmethod
    def check_hidden_dims(cls, dims: tuple[int, ...]) -> tuple[int, ...]:
        if any(h < 1 for h in dims):
            raise ValueError("hidden layer widths must be >= 1")
        return dims

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, input to output."""
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)


class PolicyConfig(BaseModel):
    """Architecture shared by ES and DQN; input/output dims come from the env."""
    model_config = ConfigDict(extra="forbid")

    hidden_dims: tuple[int, ...] = (64, 64)
    activation: Activation = Activation.TANH

    def to_spec(self, input_dim: int, output_dim: int) -> MlpSpec:
        return MlpSpec(
            input_dim=input_dim,
            hidden_dims=self.hidden_dims,
            output_dim=output_dim,
            activation=self.activation,
        )


# ── Algorithms ───────────────────────────────────────────────────────────────

class EsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma: float = Field(0.05, gt=0)
    learning_rate: float = Field(0.005, gt=0)
    population_size: int = Field(16, ge=2)
    antithetic: bool = True
    fitness_shaping: FitnessShaping = FitnessShaping.CENTERED_RANK
    master_seed: int = Field(0, ge=0, le=U64_MAX)
    max_generations: int = Field(1000, ge=0)
    episodes_per_eval: int = Field(1, ge=1)
    # all members of a generation see the same episode seeds
    common_random_numbers: bool = True
    checkpoint_every: int = Field(100, ge=0)

    @model_validator(mode="after")
    def check_population(self) -> "EsConfig":
        if self.antithetic and self.population_size % 2:
            raise ValueError("population_size must be even when antithetic sampling is on")
        return self


class DqnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.90, ge=0, le=1)
    buffer_capacity: int = Field(10_000, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(5e-5, gt=0)
    target_sync_every: int = Field(1_000, ge=1)
    eps_start: float = Field(0.2, ge=0, le=1)
    eps_end: float = Field(0.0001, ge=0, le=1)
    eps_anneal_fraction: float = Field(0.1, gt=0, le=1)
    total_timesteps: int = Field(1_000_000, ge=0)
    train_every: int = Field(4, ge=1)
    learning_starts: Optional[int] = Field(None, ge=0)
    seed: int = Field(0, ge=0, le=U64_MAX)
    num_envs: int = Field(1, ge=1)
    eval_every: int = Field(10_000, ge=1)
    checkpoint_every: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_schedule(self) -> "DqnConfig":
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        if self.learning_starts is None:
            self.learning_starts = self.batch_size * 10
        return self


# ── Environments ─────────────────────────────────────────────────────────────

class FlappyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gravity: float = 0.05             # cells / tick²
    flap_impulse: float = -0.5        # cells / tick, negative is up
    pipe_gap: float = Field(4.0, gt=0)
    pipe_spacing: int = Field(30, ge=1)   # ticks between pipes
    pipe_width: int = Field(2, ge=1)      # ticks the bird spends inside a pipe column
    gap_margin: float = Field(2.0, ge=0)  # gap never closer than this to the world bounds
    world_height: float = Field(20.0, gt=0)
    max_fall_speed: float = Field(1.0, gt=0)
    frame_skip: int = Field(4, ge=1)
    max_episode_ticks: int = Field(3000, ge=1)

    @model_validator(mode="after")
    def check_geometry(self) -> "FlappyConfig":
        if self.pipe_gap >= self.world_height:
            raise ValueError("pipe_gap must be smaller than world_height")
        if self.pipe_gap + 2 * self.gap_margin > self.world_height:
            raise ValueError("pipe_gap plus margins does not fit in world_height")
        return self

    @property
    def gap_center_bounds(self) -> tuple[float, float]:
        half = self.pipe_gap / 2
        return self.gap_margin + half, self.world_height - self.gap_margin - half


class LineWorldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    length: int = Field(10, ge=2)
    step_penalty: float = 0.01
    goal_reward: float = 1.0
    max_steps: int = Field(50, ge=1)


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: EnvName = EnvName.FLAPPY
    flappy: FlappyConfig = Field(default_factory=FlappyConfig)
    lineworld: LineWorldConfig = Field(default_factory=LineWorldConfig)


# ── Experiment ───────────────────────────────────────────────────────────────

class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    env: EnvConfig = Field(default_factory=EnvConfig)
    algo: Algorithm = Algorithm.ES
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    es: EsConfig = Field(default_factory=EsConfig)
    dqn: DqnConfig = Field(default_factory=DqnConfig)
    transfer_mode: TransferMode = TransferMode.HIDDEN_ONLY
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    eval_every: int = Field(10, ge=1)          # ES generations between evaluations
    eval_episodes: int = Field(10, ge=1)
    smoothing_window: int = Field(20, ge=1)
    output_dir: Optional[str] = None
    workers: int = Field(1, ge=0)
    remote_workers: int = Field(0, ge=0)

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, seeds: list[int]) -> list[int]:
        if any(s < 0 or s > U64_MAX for s in seeds):
            raise ValueError("seeds must be unsigned 64-bit integers")
        return seeds

    @model_validator(mode="after")
    def check_workers(self) -> "ExperimentConfig":
        if self.workers + self.remote_workers < 1:
            raise ValueError("at least one local or remote worker is required")
        return self


# ── ES population / worker wire messages ─────────────────────────────────────

class Perturbation(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0, le=U64_MAX)
    sign: Literal[1, -1] = 1


class HelloMessage(BaseModel):
    type: Literal["hello"] = "hello"
    protocol_version: int
    spec: MlpSpec
    env: EnvConfig


class HelloAck(BaseModel):
    type: Literal["hello_ack"] = "hello_ack"
    protocol_version: int
    accepted: bool
    detail: str = ""


class ParamsHeader(BaseModel):
    """Precedes exactly `nbytes` of checkpoint bytes on the stream."""
    type: Literal["params"] = "params"
    version: int = Field(ge=0)
    nbytes: int = Field(ge=0)


class ParamsAck(BaseModel):
    type: Literal["params_ack"] = "params_ack"
    version: int
    checksum: str


class TaskMessage(BaseModel):
    type: Literal["task"] = "task"
    generation: int = Field(ge=0)
    perturbations: list[Perturbation] = Field(min_length=1)
    sigma: float = Field(ge=0)
    episode_seeds: list[int] = Field(min_length=1)
    theta_version: int = Field(ge=0)


class ResultMessage(BaseModel):
    type: Literal["result"] = "result"
    generation: int = Field(ge=0)
    seed: int = Field(ge=0, le=U64_MAX)
    sign: Literal[1, -1]
    reward: float
    env_steps: int = Field(ge=0)

    @field_validator("reward")
    @classmethod
    def check_reward(cls, reward: float) -> float:
        if not math.isfinite(reward):
            raise ValueError("reward must be finite")
        return reward


class ErrorMessage(BaseModel):
    type: Literal["error"] = "error"
    code: str                      # stale_params | bad_task | internal
    detail: str = ""
    generation: Optional[int] = None
    seed: Optional[int] = None
    sign: Optional[int] = None
    held_version: Optional[int] = None
    requested_version: Optional[int] = None


class ShutdownMessage(BaseModel):
    type: Literal["shutdown"] = "shutdown"


# ── Logs & curves ────────────────────────────────────────────────────────────

class GenerationLog(BaseModel):
    generation: int
    env_steps_cum: int
    wall_clock_s: float
    mean_reward: float
    max_reward: float
    std_reward: float
    grad_norm: float
    raw_rewards: list[float] = Field(default_factory=list)


class CurveRow(BaseModel):
    iteration: int
    env_steps_cum: int
    wall_clock_s: float
    mean_reward: float
    std_reward: float
    # DQN only
    epsilon: Optional[float] = None
    loss: Optional[float] = None


class LearningCurve(BaseModel):
    algo: Algorithm
    seed: int
    env: EnvName
    rows: list[CurveRow] = Field(default_factory=list)

    @property
    def mean_rewards(self) -> list[float]:
        return [r.mean_reward for r in self.rows]


class RunMetadata(BaseModel):
    algo: Algorithm
    seed: int
    env: EnvName
    curve_file: str = "curve.csv"
    checkpoint_file: str = "policy.evsd"
    spec: MlpSpec


# ── Report ───────────────────────────────────────────────────────────────────

class ReportRow(BaseModel):
    algo: Algorithm
    seed: int
    final_smoothed_reward: float
    best_reward: float
    time_to_25: Optional[float] = None
    time_to_50: Optional[float] = None
    time_to_100: Optional[float] = None


class ComparisonReport(BaseModel):
    env: EnvName
    reference_reward: float
    smoothing_window: int
    rows: list[ReportRow]


# ── API ──────────────────────────────────────────────────────────────────────

class HealthResponse(BaseModel):
    status: str
    version: str
    protocol_version: int
    envs_supported: list[str]
    algorithms_supported: list[str]
    fitness_shaping_modes: list[str]


class EvaluationResponse(BaseModel):
    env: EnvName
    spec: MlpSpec
    episodes: int
    rewards: list[float]
    mean_reward: float
    std_reward: float
    env_steps: int
