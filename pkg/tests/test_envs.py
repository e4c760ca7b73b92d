"""
Unit tests for the built-in environments.
Run with: python -m pytest tests/test_envs.py -v
"""
import json

import numpy as np
import pytest

from app.models import EnvConfig, EnvName, FlappyConfig, LineWorldConfig, MlpSpec
from app.modules.envs import (
    FLAP,
    LEFT,
    NOOP,
    RIGHT,
    EpisodeFinishedError,
    FlappyEnv,
    InvalidActionError,
    LineWorldEnv,
    dump_trajectory,
    evaluate_policy,
    make_env,
    run_episode,
    value_iteration_oracle,
)
from app.modules.nn_core import from_layers


def always(action, input_dim):
    """Linear policy whose greedy action is fixed."""
    spec = MlpSpec(input_dim=input_dim, output_dim=2)
    bias = [1.0, 0.0] if action == 0 else [0.0, 1.0]
    return from_layers(spec, [np.zeros((2, input_dim))], [bias])


def rollout(env, actions, seed=0):
    env.reset(seed)
    return [env.step(a) for a in actions]


class TestFlappy:

    def test_reset_is_seed_deterministic(self):
        def play(env):
            observations = [env.reset(5)]
            t = 0
            while not env.done:
                observations.append(env.step(FLAP if t % 3 == 0 else NOOP).observation)
                t += 1
            return np.array(observations)

        np.testing.assert_array_equal(play(FlappyEnv()), play(FlappyEnv()))

    def test_noop_crashes_into_floor(self):
        """Free fall from mid-height hits the floor on tick 20, the last tick of step 5."""
        env = FlappyEnv()
        env.reset(0)
        rewards = []
        while not env.done:
            rewards.append(env.step(NOOP).reward)
        assert len(rewards) == 5
        assert rewards[:4] == pytest.approx([0.1] * 4)
        assert rewards[4] == pytest.approx(0.075 - 1.0)
        assert sum(rewards) == pytest.approx(-0.525)
        assert env.crashed and env.ticks == 20

    def test_pipe_pass_bonus(self):
        """Without gravity and a gap centered on the bird, the first pipe clears on tick 32."""
        cfg = FlappyConfig(gravity=0.0, pipe_gap=16.0, gap_margin=2.0, world_height=20.0)
        env = FlappyEnv(cfg)
        env.reset(3)
        steps = [env.step(NOOP) for _ in range(8)]
        assert [s.reward for s in steps[:7]] == pytest.approx([0.1] * 7)
        assert steps[7].reward == pytest.approx(1.1)
        assert steps[7].info["pipes_passed"] == 1
        assert not steps[7].done

    def test_reward_matches_counters(self):
        env = FlappyEnv()
        env.reset(11)
        rng = np.random.default_rng(0)
        total = 0.0
        last = None
        while not env.done:
            last = env.step(int(rng.integers(0, 2)))
            total += last.reward
        info = last.info
        expected = 0.025 * info["surviving_ticks"] + info["pipes_passed"] - (1.0 if info["crashed"] else 0.0)
        assert total == pytest.approx(expected)

    def test_observation_bounds(self):
        env = FlappyEnv()
        rng = np.random.default_rng(1)
        for seed in range(20):
            obs = env.reset(seed)
            assert obs.shape == (5,)
            while not env.done:
                obs = env.step(int(rng.integers(0, 2))).observation
                assert np.all(obs >= -1.0) and np.all(obs <= 1.0)

    def test_truncation_at_tick_cap(self):
        cfg = FlappyConfig(gravity=0.0, pipe_gap=16.0, max_episode_ticks=40)
        env = FlappyEnv(cfg)
        env.reset(0)
        last = None
        while not env.done:
            last = env.step(NOOP)
        assert last.info["truncated"] and not last.info["crashed"]
        assert env.ticks == 40

    def test_gap_centers_stay_in_bounds(self):
        env = FlappyEnv()
        lo, hi = env.config.gap_center_bounds
        for seed in range(200):
            env.reset(seed)
            assert lo <= env.gap_center <= hi

    def test_gap_centers_cover_the_range(self):
        env = FlappyEnv()
        lo, hi = env.config.gap_center_bounds
        centers = []
        for seed in range(1000):
            env.reset(seed)
            centers.append(env.gap_center)
        slack = 0.05 * (hi - lo)
        assert min(centers) <= lo + slack
        assert max(centers) >= hi - slack

    def test_step_after_done(self):
        env = FlappyEnv()
        env.reset(0)
        while not env.done:
            env.step(NOOP)
        with pytest.raises(EpisodeFinishedError):
            env.step(NOOP)

    def test_step_before_reset(self):
        with pytest.raises(EpisodeFinishedError):
            FlappyEnv().step(NOOP)

    def test_invalid_action(self):
        env = FlappyEnv()
        env.reset(0)
        with pytest.raises(InvalidActionError, match="action 2"):
            env.step(2)

    def test_gap_must_fit(self):
        with pytest.raises(ValueError, match="pipe_gap"):
            FlappyConfig(pipe_gap=25.0)


class TestLineWorld:

    def test_always_right_reaches_goal(self):
        env = LineWorldEnv()
        steps = rollout(env, [RIGHT] * 9)
        assert steps[-1].done
        assert sum(s.reward for s in steps) == pytest.approx(1.0 - 8 * 0.01)
        assert steps[-1].info["position"] == 9
        assert not steps[-1].info["truncated"]

    def test_left_wall_clamps(self):
        env = LineWorldEnv()
        env.reset()
        step = env.step(LEFT)
        assert env.position == 0
        assert step.reward == pytest.approx(-0.01)

    def test_one_hot_observation(self):
        env = LineWorldEnv()
        obs = env.reset()
        assert obs.tolist() == [1.0] + [0.0] * 9
        obs = env.step(RIGHT).observation
        assert obs[1] == 1.0 and obs.sum() == 1.0

    def test_truncates_at_max_steps(self):
        env = LineWorldEnv(LineWorldConfig(max_steps=5))
        steps = rollout(env, [LEFT] * 5)
        assert steps[-1].done and steps[-1].info["truncated"]

    def test_seed_ignored(self):
        np.testing.assert_array_equal(LineWorldEnv().reset(1), LineWorldEnv().reset(999))


class TestOracle:

    def test_optimal_policy_is_always_right(self):
        solution = value_iteration_oracle(LineWorldConfig(), gamma=0.99)
        assert solution.policy.tolist() == [RIGHT] * 9

    def test_q_values_closed_form(self):
        """Q*(s, right) = Σ_{k<n-1} -p γ^k + γ^{n-1} R with n = L-1-s steps to go."""
        cfg = LineWorldConfig()
        gamma = 0.9
        solution = value_iteration_oracle(cfg, gamma)
        for s in range(cfg.length - 1):
            n = cfg.length - 1 - s
            expected = sum(-cfg.step_penalty * gamma ** k for k in range(n - 1)) + gamma ** (n - 1) * cfg.goal_reward
            assert solution.q_values[s, RIGHT] == pytest.approx(expected, abs=1e-9)

    def test_residuals_contract(self):
        solution = value_iteration_oracle(LineWorldConfig(), gamma=0.9)
        assert solution.residuals[-1] < 1e-12
        assert solution.q_values[-1].tolist() == [0.0, 0.0]


class TestRollouts:

    def test_make_env(self):
        assert isinstance(make_env(EnvConfig(name=EnvName.FLAPPY)), FlappyEnv)
        env = make_env(EnvConfig(name=EnvName.LINEWORLD, lineworld=LineWorldConfig(length=6)))
        assert isinstance(env, LineWorldEnv) and env.observation_dim == 6

    def test_run_episode_optimal_lineworld(self):
        total, steps = run_episode(always(RIGHT, 10), LineWorldEnv(), seed=0)
        assert steps == 9
        assert total == pytest.approx(0.92)

    def test_evaluate_policy_sums_steps(self):
        rewards, steps = evaluate_policy(always(LEFT, 10), LineWorldEnv(), [0, 1, 2])
        assert rewards == pytest.approx([-0.5] * 3)
        assert steps == 150

    def test_dump_trajectory(self, tmp_path):
        path = tmp_path / "traj.jsonl"
        steps = dump_trajectory(always(RIGHT, 10), LineWorldEnv(), 0, path)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert steps == len(lines) == 9
        assert all(line["action"] == RIGHT for line in lines)
        assert lines[-1]["done"] is True
        assert len(lines[0]["obs"]) == 10
