"""
Evolution Strategies Optimizer
Seed-reconstructible Gaussian perturbations, fitness shaping, the Monte Carlo
search-gradient estimate and the plain gradient-ascent parameter update.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from app.models import EsConfig, FitnessShaping, GenerationLog, Perturbation
from app.modules.nn_core import ShapeMismatchError
from app.modules.seeding import GOLDEN_GAMMA, MASK64, SplitMix64, derive_seed, mix64, open_unit_uniforms

logger = logging.getLogger(__name__)

_EPISODE_SALT = 0x45504953  # "EPIS"
_STANDARDIZE_EPS = 1e-8

EvaluatorResult = Union[float, tuple[float, int]]
Evaluator = Callable[[np.ndarray], EvaluatorResult]


class EvaluationError(RuntimeError):
    """Raised when a population member's evaluation fails; carries generation, seed and sign."""

    def __init__(self, message: str, generation: int, seed: int, sign: int):
        super().__init__(f"{message} (generation={generation}, seed={seed}, sign={sign:+d})")
        self.generation = generation
        self.seed = seed
        self.sign = sign


@dataclass
class GradientEstimate:
    values: np.ndarray
    population_mean_reward: float
    population_max_reward: float
    population_std_reward: float

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


# ── Noise & population ───────────────────────────────────────────────────────

def derive_noise(seed: int, d: int) -> np.ndarray:
    """
    Standard-normal vector of length d from SplitMix64(seed) via Box-Muller.
    Uniform pairs (u1, u2) yield z1 = r cos(2π u2), z2 = r sin(2π u2) with
    r = sqrt(-2 ln u1); output is z1_0, z2_0, z1_1, ... truncated to d.
    """
    if d < 1:
        raise ShapeMismatchError(f"noise dimension must be >= 1, got {d}")
    n_pairs = (d + 1) // 2
    u = open_unit_uniforms(seed, 2 * n_pairs).reshape(n_pairs, 2)
    radius = np.sqrt(-2.0 * np.log(u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    z = np.empty((n_pairs, 2))
    z[:, 0] = radius * np.cos(angle)
    z[:, 1] = radius * np.sin(angle)
    return z.reshape(-1)[:d]


def perturb(theta: np.ndarray, sigma: float, sign: int, noise: np.ndarray) -> np.ndarray:
    """θ + σ·sign·ε; shared by the coordinator and every worker."""
    return theta + (sigma * sign) * noise


def generation_key(generation: int) -> int:
    return mix64((generation + 1) * GOLDEN_GAMMA & MASK64)


def make_population(config: EsConfig, generation: int) -> list[Perturbation]:
    n = config.population_size
    stream = SplitMix64(config.master_seed ^ generation_key(generation))
    if config.antithetic:
        population = []
        for _ in range(n // 2):
            seed = stream.next_u64()
            population.append(Perturbation(seed=seed, sign=1))
            population.append(Perturbation(seed=seed, sign=-1))
        return population
    return [Perturbation(seed=stream.next_u64(), sign=1) for _ in range(n)]


def episode_seeds_for(config: EsConfig, generation: int, perturbation_seed: int) -> list[int]:
    """
    Episode seeds a perturbation is evaluated on. With common random numbers
    every member of the generation shares them; otherwise each noise seed
    (and so both mirrored members) gets its own.
    """
    key = 0 if config.common_random_numbers else perturbation_seed
    return [
        derive_seed(config.master_seed, _EPISODE_SALT, generation, key, episode)
        for episode in range(config.episodes_per_eval)
    ]


# ── Shaping & estimation ─────────────────────────────────────────────────────

def shape_fitness(rewards: Sequence[float], mode: FitnessShaping) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    n = r.size
    if n < 2:
        raise ShapeMismatchError(f"fitness shaping needs at least 2 rewards, got {n}")
    if mode == FitnessShaping.RAW:
        return r.copy()
    if mode == FitnessShaping.CENTERED_RANK:
        # ascending ranks 0..n-1, ties share their average rank
        ranks = rankdata(r, method="average") - 1.0
        return ranks / (n - 1) - 0.5
    if np.ptp(r) == 0.0:
        return np.zeros(n)
    return (r - r.mean()) / (r.std() + _STANDARDIZE_EPS)


def estimate_gradient(
    config: EsConfig,
    perturbations: Sequence[Perturbation],
    shaped_rewards: Sequence[float],
    d: int,
    raw_rewards: Optional[Sequence[float]] = None,
) -> GradientEstimate:
    """
    g = (1/(nσ)) Σ_i F_i · sign_i · ε(seed_i).
    Mirrored members share one ε, so their weights are summed per seed first;
    equal rewards on a mirrored pair cancel exactly.
    """
    n = len(perturbations)
    shaped = np.asarray(shaped_rewards, dtype=np.float64)
    if shaped.size != n or n == 0:
        raise ShapeMismatchError(f"{n} perturbations but {shaped.size} shaped rewards")
    raw = np.asarray(raw_rewards if raw_rewards is not None else shaped_rewards, dtype=np.float64)
    if raw.size != n:
        raise ShapeMismatchError(f"{n} perturbations but {raw.size} raw rewards")

    weights: dict[int, float] = {}
    for p, f in zip(perturbations, shaped):
        weights[p.seed] = weights.get(p.seed, 0.0) + float(f) * p.sign

    g = np.zeros(d)
    for seed, w in weights.items():
        if w != 0.0:
            g += w * derive_noise(seed, d)
    g /= n * config.sigma

    return GradientEstimate(
        values=g,
        population_mean_reward=float(raw.mean()),
        population_max_reward=float(raw.max()),
        population_std_reward=float(raw.std()),
    )


def apply_update(theta: np.ndarray, gradient: np.ndarray, learning_rate: float) -> np.ndarray:
    """θ_{t+1} = θ_t + α g_t."""
    if learning_rate == 0.0:
        return theta.copy()
    return theta + learning_rate * gradient


def apply_generation(
    theta: np.ndarray,
    config: EsConfig,
    generation: int,
    population: Sequence[Perturbation],
    raw_rewards: Sequence[float],
    env_steps_cum: int,
    wall_clock_s: float,
) -> tuple[np.ndarray, GenerationLog]:
    """Shape, estimate and step from a fully evaluated population."""
    shaped = shape_fitness(raw_rewards, config.fitness_shaping)
    estimate = estimate_gradient(config, population, shaped, theta.size, raw_rewards=raw_rewards)
    new_theta = apply_update(theta, estimate.values, config.learning_rate)
    log = GenerationLog(
        generation=generation,
        env_steps_cum=env_steps_cum,
        wall_clock_s=wall_clock_s,
        mean_reward=estimate.population_mean_reward,
        max_reward=estimate.population_max_reward,
        std_reward=estimate.population_std_reward,
        grad_norm=estimate.norm,
        raw_rewards=[float(r) for r in raw_rewards],
    )
    logger.info(
        "gen %d | mean %.4f | max %.4f | |g| %.4f | env steps %d",
        generation, log.mean_reward, log.max_reward, log.grad_norm, env_steps_cum,
    )
    return new_theta, log


# ── Sequential generation step ───────────────────────────────────────────────

def _split_result(result: EvaluatorResult) -> tuple[float, int]:
    if isinstance(result, tuple):
        return float(result[0]), int(result[1])
    return float(result), 0


def es_step(
    theta: np.ndarray,
    config: EsConfig,
    evaluator: Evaluator,
    generation: int,
    env_steps_before: int = 0,
    clock_start: Optional[float] = None,
) -> tuple[np.ndarray, GenerationLog]:
    """
    One generation with an in-line evaluator. The evaluator maps a parameter
    vector to a reward, or to (reward, env_steps), and is called once per
    member; it owns its own episodes, so episodes_per_eval does not apply here.
    """
    start = time.monotonic() if clock_start is None else clock_start
    theta = np.asarray(theta, dtype=np.float64)
    population = make_population(config, generation)
    rewards: list[float] = []
    env_steps = env_steps_before
    noise_cache: dict[int, np.ndarray] = {}
    for p in population:
        if p.seed not in noise_cache:
            noise_cache = {p.seed: derive_noise(p.seed, theta.size)}
        candidate = perturb(theta, config.sigma, p.sign, noise_cache[p.seed])
        try:
            reward, steps = _split_result(evaluator(candidate))
        except Exception as e:
            raise EvaluationError(f"evaluator failed: {e}", generation, p.seed, p.sign) from e
        if not np.isfinite(reward):
            raise EvaluationError(f"non-finite reward {reward!r}", generation, p.seed, p.sign)
        rewards.append(reward)
        env_steps += steps

    return apply_generation(
        theta, config, generation, population, rewards,
        env_steps_cum=env_steps,
        wall_clock_s=time.monotonic() - start,
    )
