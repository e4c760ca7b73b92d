"""
Experiment Harness
Runs ES, DQN and ES-pretrained DQN under one config, writes per-run learning
curves and checkpoints, and builds the smoothed comparison report.

Run directory layout: <output_dir>/<algo>/seed_<seed>/
  curve.csv         LearningCurve rows (all algorithms)
  generations.csv   ES per-generation log
  dqn_log.csv       DQN evaluation log
  policy.evsd       final checkpoint
  run.json          run metadata
es_then_dqn runs also keep the ES phase as es_curve.csv / es_generations.csv / es_policy.evsd.
Each experiment also writes <output_dir>/<algo>/report.csv and report.svg over its seeds.
"""
from __future__ import annotations

import asyncio
import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from app.config import Settings, get_settings
from app.models import (
    Algorithm,
    ComparisonReport,
    CurveRow,
    EnvConfig,
    EnvName,
    EvaluationResponse,
    ExperimentConfig,
    GenerationLog,
    LearningCurve,
    MlpSpec,
    ReportRow,
    RunMetadata,
)
from app.modules.dqn_trainer import DqnRunOptions, default_eval_seeds, run_dqn
from app.modules.envs import env_factory, evaluate_policy, make_env
from app.modules.es_optimizer import apply_generation, episode_seeds_for, make_population
from app.modules.nn_core import MlpPolicy, ShapeMismatchError, flatten, init_policy, save_checkpoint, unflatten
from app.modules.seeding import derive_seed
from app.modules.transfer import warm_start_dqn
from app.modules.worker_protocol import WorkerPool

logger = logging.getLogger(__name__)

CURVE_FIELDS = ["iteration", "env_steps_cum", "wall_clock_s", "mean_reward", "std_reward", "epsilon", "loss"]
GENERATION_FIELDS = [
    "generation", "env_steps_cum", "wall_clock_s", "mean_reward", "max_reward", "std_reward", "grad_norm",
]
DQN_LOG_FIELDS = [
    "step", "env_steps_cum", "wall_clock_s", "mean_eval_reward", "std_eval_reward", "epsilon", "loss",
]
REPORT_FIELDS = [
    "algo", "seed", "final_smoothed_reward", "best_reward", "time_to_25", "time_to_50", "time_to_100",
]
THRESHOLD_FRACTIONS = (0.25, 0.5, 1.0)
NOT_REACHED = "not_reached"
X_AXES = ("wall_clock_s", "env_steps_cum")
DEFAULT_SMOOTHING_WINDOW = 20

_INIT_SALT = 0x504F4C49   # "POLI"
_MASTER_SALT = 0x4D535452  # "MSTR"
_DQN_SALT = 0x44514E53     # "DQNS"


class ReportError(ValueError):
    """Raised when curves cannot be compared (none given, or mixed environments)."""
    pass


@dataclass
class RunResult:
    algo: Algorithm
    seed: int
    run_dir: Path
    curve: LearningCurve
    policy: MlpPolicy


# ── CSV ───────────────────────────────────────────────────────────────────────

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_rows(path: Path, header: list[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_curve_csv(curve: LearningCurve, path: Union[str, Path]) -> Path:
    return _write_rows(Path(path), CURVE_FIELDS, (
        (r.iteration, r.env_steps_cum, r.wall_clock_s, r.mean_reward, r.std_reward, r.epsilon, r.loss)
        for r in curve.rows
    ))


def write_generations_csv(logs: Sequence[GenerationLog], path: Union[str, Path]) -> Path:
    return _write_rows(Path(path), GENERATION_FIELDS, (
        (g.generation, g.env_steps_cum, g.wall_clock_s, g.mean_reward, g.max_reward, g.std_reward, g.grad_norm)
        for g in logs
    ))


def write_dqn_log_csv(curve: LearningCurve, path: Union[str, Path]) -> Path:
    return _write_rows(Path(path), DQN_LOG_FIELDS, (
        (r.iteration, r.env_steps_cum, r.wall_clock_s, r.mean_reward, r.std_reward, r.epsilon, r.loss)
        for r in curve.rows
    ))


def read_curve_csv(path: Union[str, Path], algo: Algorithm, seed: int, env: EnvName) -> LearningCurve:
    def opt(value: str) -> Optional[float]:
        return float(value) if value else None

    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            rows.append(CurveRow(
                iteration=int(rec["iteration"]),
                env_steps_cum=int(rec["env_steps_cum"]),
                wall_clock_s=float(rec["wall_clock_s"]),
                mean_reward=float(rec["mean_reward"]),
                std_reward=float(rec["std_reward"]),
                epsilon=opt(rec.get("epsilon", "")),
                loss=opt(rec.get("loss", "")),
            ))
    return LearningCurve(algo=algo, seed=seed, env=env, rows=rows)


def load_run_curves(output_dir: Union[str, Path]) -> list[LearningCurve]:
    """Every run.json + curve.csv pair under an output directory."""
    curves = []
    for meta_path in sorted(Path(output_dir).glob("*/seed_*/run.json")):
        meta = RunMetadata.model_validate_json(meta_path.read_text(encoding="utf-8"))
        curves.append(read_curve_csv(meta_path.parent / meta.curve_file, meta.algo, meta.seed, meta.env))
    return curves


# ── Smoothing & thresholds ────────────────────────────────────────────────────

def smooth(values: Sequence[float], window: int) -> list[float]:
    """Trailing moving average; the first window-1 points average what is available."""
    if window < 1:
        raise ValueError("smoothing window must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    out = []
    for i in range(v.size):
        chunk = v[max(0, i - window + 1):i + 1]
        out.append(float(np.clip(chunk.mean(), chunk.min(), chunk.max())))
    return out


def smooth_curve(curve: LearningCurve, window: int) -> LearningCurve:
    smoothed = smooth(curve.mean_rewards, window)
    rows = [r.model_copy(update={"mean_reward": s}) for r, s in zip(curve.rows, smoothed)]
    return curve.model_copy(update={"rows": rows})


def time_to_threshold(
    curve: LearningCurve,
    fraction: float,
    reference_reward: float,
    window: int = 1,
    x_axis: str = "wall_clock_s",
) -> Optional[float]:
    """
    First x at which the smoothed reward reaches fraction·reference; None when never reached.
    The threshold scales the reference as is: with a negative reference, fractions below 1
    sit above it, so 25% is then harder to reach than 100%.
    """
    if not np.isfinite(reference_reward):
        raise ReportError("reference reward must be finite")
    threshold = fraction * reference_reward
    for row, value in zip(curve.rows, smooth(curve.mean_rewards, window)):
        if value >= threshold:
            return float(getattr(row, x_axis))
    return None


# ── Report ────────────────────────────────────────────────────────────────────

def build_report(curves: Sequence[LearningCurve], window: int, x_axis: str = "wall_clock_s") -> ComparisonReport:
    if not curves:
        raise ReportError("no learning curves to compare")
    envs = {c.env for c in curves}
    if len(envs) > 1:
        raise ReportError(f"curves come from different environments: {sorted(e.value for e in envs)}")
    if x_axis not in X_AXES:
        raise ReportError(f"x axis must be one of {X_AXES}, got {x_axis!r}")
    empty = [f"{c.algo.value}/seed_{c.seed}" for c in curves if not c.rows]
    if empty:
        raise ReportError(f"curves without rows: {', '.join(empty)}")

    smoothed = [smooth(c.mean_rewards, window) for c in curves]
    reference = max(max(s) for s in smoothed)
    rows = []
    for curve, s in zip(curves, smoothed):
        times = [time_to_threshold(curve, f, reference, window, x_axis) for f in THRESHOLD_FRACTIONS]
        rows.append(ReportRow(
            algo=curve.algo,
            seed=curve.seed,
            final_smoothed_reward=s[-1],
            best_reward=max(s),
            time_to_25=times[0],
            time_to_50=times[1],
            time_to_100=times[2],
        ))
    return ComparisonReport(env=envs.pop(), reference_reward=reference, smoothing_window=window, rows=rows)


def report_bands(
    curves: Sequence[LearningCurve],
    window: int,
    x_axis: str = "wall_clock_s",
    points: int = 200,
) -> dict[Algorithm, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-algorithm (x grid, mean, std) of smoothed rewards interpolated onto a shared grid."""
    bands = {}
    for algo in dict.fromkeys(c.algo for c in curves):
        group = [c for c in curves if c.algo == algo and c.rows]
        xs = [np.array([getattr(r, x_axis) for r in c.rows], dtype=np.float64) for c in group]
        lo = min(x[0] for x in xs)
        hi = max(x[-1] for x in xs)
        grid = np.linspace(lo, hi, points) if hi > lo else np.array([lo])
        ys = np.array([np.interp(grid, x, smooth(c.mean_rewards, window)) for x, c in zip(xs, group)])
        bands[algo] = (grid, ys.mean(axis=0), ys.std(axis=0))
    return bands


def write_report_svg(
    curves: Sequence[LearningCurve],
    path: Union[str, Path],
    window: int,
    x_axis: str = "wall_clock_s",
) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 5))
    for algo, (grid, mean, std) in report_bands(curves, window, x_axis).items():
        ax.plot(grid, mean, label=algo.value)
        ax.fill_between(grid, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("cumulative wall clock (s)" if x_axis == "wall_clock_s" else "cumulative env steps")
    ax.set_ylabel(f"mean evaluation reward (smoothed, window {window})")
    ax.set_title(f"{curves[0].env.value}: learning curves")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def compare_report(
    curves: Sequence[LearningCurve],
    out_dir: Union[str, Path],
    window: int = DEFAULT_SMOOTHING_WINDOW,
    x_axis: str = "wall_clock_s",
) -> ComparisonReport:
    """Write report.csv and report.svg into out_dir and return the table."""
    report = build_report(curves, window, x_axis)
    out = Path(out_dir)
    _write_rows(out / "report.csv", REPORT_FIELDS, (
        (r.algo.value, r.seed, r.final_smoothed_reward, r.best_reward,
         *(NOT_REACHED if t is None else t for t in (r.time_to_25, r.time_to_50, r.time_to_100)))
        for r in report.rows
    ))
    write_report_svg(curves, out / "report.svg", window, x_axis)
    logger.info("Report over %d runs written to %s", len(report.rows), out)
    return report


# ── Evaluation ────────────────────────────────────────────────────────────────

def evaluate_checkpoint(policy: MlpPolicy, env_config: EnvConfig, episodes: int, seed: int = 0) -> EvaluationResponse:
    """Greedy evaluation of a policy on held-out seeds for the given run seed."""
    env = make_env(env_config)
    if (env.observation_dim, env.n_actions) != (policy.spec.input_dim, policy.spec.output_dim):
        raise ShapeMismatchError(
            f"checkpoint maps {policy.spec.input_dim}->{policy.spec.output_dim}, "
            f"{env.name.value} needs {env.observation_dim}->{env.n_actions}"
        )
    rewards, steps = evaluate_policy(policy, env, default_eval_seeds(seed, episodes))
    return EvaluationResponse(
        env=env.name,
        spec=policy.spec,
        episodes=episodes,
        rewards=rewards,
        mean_reward=float(np.mean(rewards)),
        std_reward=float(np.std(rewards)),
        env_steps=steps,
    )


# ── Runs ──────────────────────────────────────────────────────────────────────

def policy_spec_for(config: ExperimentConfig) -> MlpSpec:
    env = make_env(config.env)
    return config.policy.to_spec(env.observation_dim, env.n_actions)


def _write_meta(run_dir: Path, algo: Algorithm, seed: int, env: EnvName, spec: MlpSpec) -> None:
    meta = RunMetadata(algo=algo, seed=seed, env=env, spec=spec)
    (run_dir / "run.json").write_text(meta.model_dump_json(indent=2), encoding="utf-8")


async def _train_es(
    config: ExperimentConfig,
    seed: int,
    pool: WorkerPool,
    run_dir: Path,
    prefix: str = "",
) -> tuple[MlpPolicy, LearningCurve, int, float]:
    """ES phase; returns (policy, curve, env steps used, elapsed seconds)."""
    spec = pool.spec
    es_cfg = config.es.model_copy(update={"master_seed": derive_seed(config.es.master_seed, _MASTER_SALT, seed)})
    eval_env = make_env(config.env)
    eval_seeds = default_eval_seeds(seed, config.eval_episodes)
    theta = flatten(init_policy(spec, derive_seed(seed, _INIT_SALT)))
    curve = LearningCurve(algo=Algorithm.ES, seed=seed, env=config.env.name)
    logs: list[GenerationLog] = []
    env_steps = 0
    start = time.monotonic()

    def record(iteration: int) -> None:
        rewards, _ = evaluate_policy(unflatten(spec, theta), eval_env, eval_seeds)
        curve.rows.append(CurveRow(
            iteration=iteration,
            env_steps_cum=env_steps,
            wall_clock_s=time.monotonic() - start,
            mean_reward=float(np.mean(rewards)),
            std_reward=float(np.std(rewards)),
        ))
        logger.info("es seed %d | gen %d | eval %.4f", seed, iteration, curve.rows[-1].mean_reward)

    record(0)
    for generation in range(es_cfg.max_generations):
        population = make_population(es_cfg, generation)
        episode_seeds = {p.seed: episode_seeds_for(es_cfg, generation, p.seed) for p in population}
        await pool.broadcast_params(theta, generation)
        results = await pool.run_generation(generation, population, es_cfg.sigma, episode_seeds)
        env_steps += sum(r.env_steps for r in results)
        theta, log = apply_generation(
            theta, es_cfg, generation, population, [r.reward for r in results],
            env_steps_cum=env_steps, wall_clock_s=time.monotonic() - start,
        )
        logs.append(log)
        done = generation + 1
        if done % config.eval_every == 0 or done == es_cfg.max_generations:
            record(done)
        if es_cfg.checkpoint_every and done % es_cfg.checkpoint_every == 0:
            save_checkpoint(unflatten(spec, theta), run_dir / f"{prefix}checkpoint_{done}.evsd")

    policy = unflatten(spec, theta)
    write_curve_csv(curve, run_dir / f"{prefix}curve.csv")
    write_generations_csv(logs, run_dir / f"{prefix}generations.csv")
    save_checkpoint(policy, run_dir / f"{prefix}policy.evsd")
    return policy, curve, env_steps, time.monotonic() - start


def _train_dqn(
    config: ExperimentConfig,
    seed: int,
    run_dir: Path,
    algo: Algorithm,
    initial_policy: Optional[MlpPolicy] = None,
    env_steps_offset: int = 0,
    clock_offset_s: float = 0.0,
) -> tuple[MlpPolicy, LearningCurve]:
    dqn_cfg = config.dqn.model_copy(update={"seed": derive_seed(config.dqn.seed, _DQN_SALT, seed)})
    options = DqnRunOptions(
        policy=config.policy,
        eval_seeds=default_eval_seeds(seed, config.eval_episodes),
        eval_episodes=config.eval_episodes,
        env_steps_offset=env_steps_offset,
        clock_offset_s=clock_offset_s,
        checkpoint_dir=run_dir,
        algo=algo,
        run_seed=seed,
    )
    policy, curve = run_dqn(env_factory(config.env), dqn_cfg, initial_policy, options)
    write_curve_csv(curve, run_dir / "curve.csv")
    write_dqn_log_csv(curve, run_dir / "dqn_log.csv")
    save_checkpoint(policy, run_dir / "policy.evsd")
    return policy, curve


async def _run_seed(config: ExperimentConfig, seed: int, pool: Optional[WorkerPool], root: Path) -> RunResult:
    algo = config.algo
    run_dir = root / algo.value / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    spec = policy_spec_for(config)
    logger.info("Run %s seed %d → %s", algo.value, seed, run_dir)

    if algo == Algorithm.ES:
        policy, curve, _, _ = await _train_es(config, seed, pool, run_dir)
    elif algo == Algorithm.DQN:
        policy, curve = _train_dqn(config, seed, run_dir, algo)
    else:
        es_policy, _, es_steps, es_elapsed = await _train_es(config, seed, pool, run_dir, prefix="es_")
        online, _ = warm_start_dqn(es_policy, spec, config.transfer_mode, derive_seed(seed, _DQN_SALT, _INIT_SALT))
        policy, curve = _train_dqn(
            config, seed, run_dir, algo, online,
            env_steps_offset=es_steps, clock_offset_s=es_elapsed,
        )

    _write_meta(run_dir, algo, seed, config.env.name, spec)
    logger.info("Finished %s seed %d: final eval %.4f", algo.value, seed, curve.rows[-1].mean_reward)
    return RunResult(algo, seed, run_dir, curve, policy)


async def run_experiment_async(config: ExperimentConfig, settings: Optional[Settings] = None) -> list[RunResult]:
    """Train every seed, then summarise them in <output>/<algo>/report.csv using the config smoothing window."""
    settings = settings or get_settings()
    root = Path(config.output_dir or settings.output_dir)
    pool: Optional[WorkerPool] = None
    if config.algo in (Algorithm.ES, Algorithm.ES_THEN_DQN):
        pool = WorkerPool(policy_spec_for(config), config.env, settings)
        pool.add_local_workers(config.workers)
        if config.remote_workers:
            await pool.start_listener()
            await pool.wait_for_workers(config.remote_workers)
    try:
        results = [await _run_seed(config, seed, pool, root) for seed in config.seeds]
    finally:
        if pool is not None:
            await pool.close()
    compare_report([r.curve for r in results], root / config.algo.value, config.smoothing_window)
    return results


def run_experiment(config: ExperimentConfig, settings: Optional[Settings] = None) -> list[RunResult]:
    return asyncio.run(run_experiment_async(config, settings))
