"""
Unit tests for the experiment harness.
Run with: python -m pytest tests/test_harness.py -v
"""
import csv

import numpy as np
import pytest

from app.config import Settings
from app.models import Algorithm, CurveRow, EnvConfig, EnvName, LearningCurve, MlpSpec, RunMetadata
from app.modules.experiment_config import parse_config
from app.modules.harness import (
    ReportError,
    build_report,
    compare_report,
    evaluate_checkpoint,
    load_run_curves,
    read_curve_csv,
    run_experiment,
    smooth,
    smooth_curve,
    time_to_threshold,
    write_curve_csv,
)
from app.modules.nn_core import ShapeMismatchError, flatten, from_layers, load_checkpoint


def make_curve(rewards, algo=Algorithm.ES, seed=0, env=EnvName.LINEWORLD, dt=1.0):
    rows = [
        CurveRow(iteration=i, env_steps_cum=100 * i, wall_clock_s=dt * i, mean_reward=r, std_reward=0.0)
        for i, r in enumerate(rewards)
    ]
    return LearningCurve(algo=algo, seed=seed, env=env, rows=rows)


def lineworld_config(tmp_path, **overrides):
    doc = {
        "env": {"name": "lineworld"},
        "policy": {"hidden_dims": [8]},
        "es": {"sigma": 0.5, "learning_rate": 0.5, "population_size": 6, "max_generations": 4,
               "checkpoint_every": 2},
        "dqn": {"batch_size": 8, "learning_starts": 16, "total_timesteps": 120, "eval_every": 50,
                "target_sync_every": 20, "eps_start": 1.0, "eps_end": 0.1},
        "seeds": [0],
        "eval_every": 2,
        "eval_episodes": 1,
        "workers": 2,
        "output_dir": str(tmp_path),
    }
    doc.update(overrides)
    return parse_config(doc)


def settings_for(tmp_path):
    return Settings(output_dir=str(tmp_path), straggler_initial_timeout_s=60.0)


class TestSmoothing:

    def test_trailing_mean(self):
        assert smooth([0.0, 10.0, 0.0, 10.0], 2) == [0.0, 5.0, 5.0, 5.0]

    def test_window_one_is_identity(self):
        values = [0.3, -1.0, 2.5]
        assert smooth(values, 1) == values

    def test_stays_within_raw_range(self):
        values = np.random.default_rng(0).normal(size=200).tolist()
        for window in (1, 5, 20):
            out = smooth(values, window)
            assert min(out) >= min(values) and max(out) <= max(values)

    def test_bad_window(self):
        with pytest.raises(ValueError, match="window"):
            smooth([1.0], 0)

    def test_smooth_curve_keeps_axes(self):
        curve = make_curve([0.0, 2.0, 4.0])
        smoothed = smooth_curve(curve, 2)
        assert smoothed.mean_rewards == [0.0, 1.0, 3.0]
        assert [r.wall_clock_s for r in smoothed.rows] == [0.0, 1.0, 2.0]
        assert curve.mean_rewards == [0.0, 2.0, 4.0]


class TestThresholds:

    def test_first_crossing(self):
        curve = make_curve([0.0, 1.0, 2.0, 4.0])
        assert time_to_threshold(curve, 0.5, 4.0) == 2.0
        assert time_to_threshold(curve, 1.0, 4.0) == 3.0
        assert time_to_threshold(curve, 0.5, 4.0, x_axis="env_steps_cum") == 200.0

    def test_never_reached(self):
        assert time_to_threshold(make_curve([0.0, 1.0]), 1.0, 8.0) is None

    def test_negative_reference_scales_as_is(self):
        curve = make_curve([-4.0, -2.0])
        assert time_to_threshold(curve, 1.0, -2.0) == 1.0
        assert time_to_threshold(curve, 0.25, -2.0) is None

    def test_non_finite_reference(self):
        with pytest.raises(ReportError):
            time_to_threshold(make_curve([0.0]), 0.5, float("nan"))


class TestReport:

    def test_reference_is_best_smoothed_run(self):
        curves = [
            make_curve([0.0, 2.0, 4.0], algo=Algorithm.ES),
            make_curve([0.0, 1.0, 2.0], algo=Algorithm.DQN),
        ]
        report = build_report(curves, window=1)
        assert report.reference_reward == 4.0
        es_row, dqn_row = report.rows
        assert (es_row.time_to_25, es_row.time_to_50, es_row.time_to_100) == (1.0, 1.0, 2.0)
        assert (dqn_row.time_to_25, dqn_row.time_to_50, dqn_row.time_to_100) == (1.0, 2.0, None)
        assert dqn_row.final_smoothed_reward == 2.0

    def test_mixed_environments_rejected(self):
        curves = [make_curve([1.0]), make_curve([1.0], env=EnvName.FLAPPY)]
        with pytest.raises(ReportError, match="different environments"):
            build_report(curves, 1)

    def test_empty_rejected(self):
        with pytest.raises(ReportError, match="no learning curves"):
            build_report([], 1)

    def test_bad_axis_rejected(self):
        with pytest.raises(ReportError, match="x axis"):
            build_report([make_curve([1.0])], 1, x_axis="generations")

    def test_compare_writes_table_and_plot(self, tmp_path):
        curves = [
            make_curve([0.0, 2.0, 4.0], algo=Algorithm.ES_THEN_DQN),
            make_curve([0.0, 0.5, 1.0], algo=Algorithm.DQN),
        ]
        compare_report(curves, tmp_path, window=1)
        with open(tmp_path / "report.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows[1]["algo"] == "dqn"
        assert rows[1]["time_to_100"] == "not_reached"
        assert (tmp_path / "report.svg").read_text().lstrip().startswith("<?xml")


class TestCurveFiles:

    def test_curve_csv_preserves_values(self, tmp_path):
        curve = make_curve([0.1, 0.2 + 1e-15])
        curve.rows[1].epsilon = 0.05
        path = write_curve_csv(curve, tmp_path / "curve.csv")
        restored = read_curve_csv(path, curve.algo, curve.seed, curve.env)
        assert restored == curve

    def test_load_run_curves(self, tmp_path):
        for algo in (Algorithm.ES, Algorithm.DQN):
            run_dir = tmp_path / algo.value / "seed_3"
            write_curve_csv(make_curve([1.0, 2.0], algo=algo, seed=3), run_dir / "curve.csv")
            meta = RunMetadata(algo=algo, seed=3, env=EnvName.LINEWORLD, spec=MlpSpec(input_dim=10, output_dim=2))
            (run_dir / "run.json").write_text(meta.model_dump_json())
        curves = load_run_curves(tmp_path)
        assert sorted(c.algo.value for c in curves) == ["dqn", "es"]
        assert all(c.seed == 3 and c.mean_rewards == [1.0, 2.0] for c in curves)


class TestEvaluateCheckpoint:

    def test_optimal_lineworld_policy(self):
        spec = MlpSpec(input_dim=10, output_dim=2)
        policy = from_layers(spec, [np.zeros((2, 10))], [[0.0, 1.0]])
        result = evaluate_checkpoint(policy, EnvConfig(name=EnvName.LINEWORLD), episodes=3)
        assert result.rewards == pytest.approx([0.92] * 3)
        assert result.env_steps == 27
        assert result.std_reward == pytest.approx(0.0)

    def test_dimension_mismatch(self):
        policy = from_layers(MlpSpec(input_dim=10, output_dim=2), [np.zeros((2, 10))], [[0.0, 1.0]])
        with pytest.raises(ShapeMismatchError, match="flappy needs 5->2"):
            evaluate_checkpoint(policy, EnvConfig(name=EnvName.FLAPPY), episodes=1)


class TestRunExperiment:

    def test_es_run_layout(self, tmp_path):
        config = lineworld_config(tmp_path)
        (result,) = run_experiment(config, settings_for(tmp_path))
        run_dir = tmp_path / "es" / "seed_0"
        assert result.run_dir == run_dir
        for name in ("curve.csv", "generations.csv", "policy.evsd", "run.json",
                     "checkpoint_2.evsd", "checkpoint_4.evsd"):
            assert (run_dir / name).exists(), name
        assert [r.iteration for r in result.curve.rows] == [0, 2, 4]
        assert flatten(load_checkpoint(run_dir / "policy.evsd")).tobytes() == flatten(result.policy).tobytes()
        with open(run_dir / "generations.csv", newline="") as f:
            assert len(list(csv.DictReader(f))) == 4

    def test_es_runs_are_reproducible(self, tmp_path):
        a = run_experiment(lineworld_config(tmp_path / "a"), settings_for(tmp_path))[0]
        b = run_experiment(lineworld_config(tmp_path / "b", workers=1), settings_for(tmp_path))[0]
        assert flatten(a.policy).tobytes() == flatten(b.policy).tobytes()

    def test_dqn_run(self, tmp_path):
        (result,) = run_experiment(lineworld_config(tmp_path, algo="dqn"), settings_for(tmp_path))
        run_dir = tmp_path / "dqn" / "seed_0"
        assert (run_dir / "dqn_log.csv").exists() and (run_dir / "policy.evsd").exists()
        assert [r.iteration for r in result.curve.rows] == [0, 50, 100, 120]

    def test_pretrain_offsets_dqn_curve_by_es_phase(self, tmp_path):
        (result,) = run_experiment(lineworld_config(tmp_path, algo="es_then_dqn"), settings_for(tmp_path))
        run_dir = tmp_path / "es_then_dqn" / "seed_0"
        for name in ("es_curve.csv", "es_generations.csv", "es_policy.evsd", "curve.csv", "dqn_log.csv"):
            assert (run_dir / name).exists(), name
        with open(run_dir / "es_generations.csv", newline="") as f:
            es_steps = int(list(csv.DictReader(f))[-1]["env_steps_cum"])
        assert es_steps > 0
        assert result.curve.rows[0].env_steps_cum == es_steps
        assert result.curve.rows[-1].env_steps_cum == es_steps + 120
        es_policy = load_checkpoint(run_dir / "es_policy.evsd")
        assert result.curve.algo == Algorithm.ES_THEN_DQN
        assert es_policy.spec == result.policy.spec

    def test_report_over_real_runs(self, tmp_path):
        settings = settings_for(tmp_path)
        run_experiment(lineworld_config(tmp_path), settings)
        run_experiment(lineworld_config(tmp_path, algo="dqn"), settings)
        report = compare_report(load_run_curves(tmp_path), tmp_path, window=2)
        assert {r.algo for r in report.rows} == {Algorithm.ES, Algorithm.DQN}
        assert (tmp_path / "report.svg").exists()



    def test_experiment_report_uses_config_window(self, tmp_path):
        (result,) = run_experiment(lineworld_config(tmp_path, smoothing_window=2), settings_for(tmp_path))
        with open(tmp_path / "es" / "report.csv", newline="") as f:
            (row,) = list(csv.DictReader(f))
        assert float(row["final_smoothed_reward"]) == pytest.approx(smooth(result.curve.mean_rewards, 2)[-1])
        assert (tmp_path / "es" / "report.svg").exists()
