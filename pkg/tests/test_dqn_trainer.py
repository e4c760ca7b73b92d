"""
Unit tests for the DQN trainer.
Run with: python -m pytest tests/test_dqn_trainer.py -v
"""
import numpy as np
import pytest

from app.models import Algorithm, DqnConfig, EnvConfig, EnvName, LineWorldConfig, MlpSpec, PolicyConfig
from app.modules.dqn_trainer import (
    AdamState,
    DqnRunOptions,
    ReplayBuffer,
    Transition,
    UnsupportedEnvironmentError,
    adam_update,
    epsilon_at,
    run_dqn,
    select_action,
    sync_target,
    td_targets,
    train_step,
)
from app.modules.envs import RIGHT, LineWorldEnv, env_factory, value_iteration_oracle
from app.modules.nn_core import ShapeMismatchError, flatten, forward, from_layers, init_policy

LINEWORLD = EnvConfig(name=EnvName.LINEWORLD)


def make_config(**overrides):
    defaults = dict(
        gamma=0.99, buffer_capacity=1000, batch_size=8, learning_rate=1e-3,
        target_sync_every=50, eps_start=1.0, eps_end=0.05, eps_anneal_fraction=0.5,
        total_timesteps=200, train_every=1, learning_starts=16, eval_every=100,
    )
    defaults.update(overrides)
    return DqnConfig(**defaults)


def bias_only_policy(q_values, input_dim=10):
    """Q(s, a) = q_values[a] for every state."""
    spec = MlpSpec(input_dim=input_dim, output_dim=len(q_values))
    return from_layers(spec, [np.zeros((len(q_values), input_dim))], [q_values])


class ContinuousEnv(LineWorldEnv):
    discrete_actions = False


class TestReplayBuffer:

    def test_uniform_sampling_of_full_buffer(self):
        buffer = ReplayBuffer(8, observation_dim=1)
        for i in range(20):
            buffer.add([i], 0, float(i), [i], False)
        n = 100_000
        rewards = buffer.sample(n, np.random.default_rng(3)).rewards
        counts = np.array([np.sum(rewards == r) for r in range(12, 20)])
        assert counts.sum() == n
        p = 1 / 8
        assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))

    def test_ring_overwrites_oldest(self):
        buffer = ReplayBuffer(3, observation_dim=1)
        for i in range(5):
            buffer.add([i], 0, float(i), [i + 1], False)
        assert len(buffer) == 3
        assert [t.reward for t in buffer.contents()] == [2.0, 3.0, 4.0]

    def test_contents_before_full(self):
        buffer = ReplayBuffer(5, observation_dim=2)
        buffer.push(Transition(np.ones(2), 1, 0.5, np.zeros(2), True))
        (t,) = buffer.contents()
        assert t.action == 1 and t.done and t.reward == 0.5

    def test_sample_within_stored(self):
        buffer = ReplayBuffer(100, observation_dim=1)
        for i in range(10):
            buffer.add([i], 0, float(i), [i], False)
        batch = buffer.sample(64, np.random.default_rng(0))
        assert batch.states.shape == (64, 1)
        assert set(batch.rewards.tolist()) <= set(float(i) for i in range(10))

    def test_sample_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            ReplayBuffer(4, 1).sample(2, np.random.default_rng(0))


class TestExploration:

    def test_linear_anneal(self):
        cfg = make_config(eps_start=1.0, eps_end=0.0, eps_anneal_fraction=0.1, total_timesteps=1000)
        assert epsilon_at(0, cfg) == 1.0
        assert epsilon_at(50, cfg) == pytest.approx(0.5)
        assert epsilon_at(100, cfg) == 0.0
        assert epsilon_at(900, cfg) == 0.0

    def test_epsilon_bounds_validated(self):
        with pytest.raises(ValueError, match="eps_end"):
            make_config(eps_start=0.1, eps_end=0.5)

    def test_greedy_when_epsilon_zero(self):
        policy = bias_only_policy([0.0, 1.0])
        rng = np.random.default_rng(0)
        assert all(select_action(policy, np.zeros(10), 0.0, rng) == 1 for _ in range(50))

    def test_random_when_epsilon_one(self):
        policy = bias_only_policy([0.0, 1.0])
        rng = np.random.default_rng(0)
        actions = {select_action(policy, np.zeros(10), 1.0, rng) for _ in range(200)}
        assert actions == {0, 1}

    def test_epsilon_one_is_uniform(self):
        policy = bias_only_policy([0.0, 1.0])
        rng = np.random.default_rng(7)
        n = 100_000
        lefts = sum(select_action(policy, np.zeros(10), 1.0, rng) == 0 for _ in range(n))
        assert abs(lefts - n / 2) <= 3 * np.sqrt(n * 0.25)


class TestTargets:

    def test_terminal_and_bootstrap(self):
        target = bias_only_policy([2.0, 5.0])
        batch = [
            Transition(np.zeros(10), 0, 1.0, np.zeros(10), True),
            Transition(np.zeros(10), 1, 1.0, np.zeros(10), False),
        ]
        np.testing.assert_allclose(td_targets(target, batch, gamma=0.9), [1.0, 1.0 + 0.9 * 5.0])

    def test_empty_batch(self):
        with pytest.raises(ShapeMismatchError):
            td_targets(bias_only_policy([0.0, 0.0]), [], 0.9)

    def test_targets_fixed_between_syncs(self):
        spec = MlpSpec(input_dim=10, hidden_dims=(8,), output_dim=2)
        online = init_policy(spec, 1)
        target = sync_target(online)
        buffer = ReplayBuffer(64, observation_dim=10)
        rng = np.random.default_rng(0)
        for i in range(64):
            buffer.add(rng.uniform(size=10), i % 2, 1.0, rng.uniform(size=10), False)
        batch = buffer.contents()
        before = td_targets(target, batch, 0.99)
        cfg = make_config(batch_size=16, learning_starts=0)
        optimizer = AdamState.zeros(spec.param_count)
        start = flatten(online).copy()
        for step in range(20):
            online, loss = train_step(online, target, buffer, cfg, optimizer, rng, step)
            assert loss is not None
        assert not np.array_equal(flatten(online), start)
        assert td_targets(target, batch, 0.99).tobytes() == before.tobytes()


class TestOptimizer:

    def test_first_adam_step_is_lr_times_sign(self):
        theta = adam_update(np.zeros(3), np.array([2.0, -3.0, 0.5]), AdamState.zeros(3), 0.01)
        np.testing.assert_allclose(theta, [-0.01, 0.01, -0.01], rtol=1e-6)

    def test_zero_loss_leaves_parameters_bit_identical(self):
        online = bias_only_policy([0.3, -0.7])
        buffer = ReplayBuffer(16, observation_dim=10)
        for a in (0, 1, 0, 1, 1, 0, 0, 1):
            buffer.add(np.eye(10)[a], a, [0.3, -0.7][a], np.zeros(10), True)
        cfg = make_config(batch_size=4, learning_starts=0)
        before = flatten(online).tobytes()
        updated, loss = train_step(online, sync_target(online), buffer, cfg, AdamState.zeros(22),
                                   np.random.default_rng(0), step=1)
        assert loss == 0.0
        assert flatten(updated).tobytes() == before

    def test_warmup_skips_training(self):
        online = bias_only_policy([0.0, 0.0])
        buffer = ReplayBuffer(16, observation_dim=10)
        buffer.add(np.zeros(10), 0, 1.0, np.zeros(10), True)
        updated, loss = train_step(online, online, buffer, make_config(), AdamState.zeros(22),
                                   np.random.default_rng(0), step=100)
        assert loss is None and updated is online

    def test_sync_target_copies(self):
        online = init_policy(MlpSpec(input_dim=4, hidden_dims=(3,), output_dim=2), 0)
        target = sync_target(online)
        assert target is not online
        assert flatten(target).tobytes() == flatten(online).tobytes()

    def test_sync_target_spec_mismatch(self):
        online = init_policy(MlpSpec(input_dim=4, output_dim=2), 0)
        other = init_policy(MlpSpec(input_dim=5, output_dim=2), 0)
        with pytest.raises(ShapeMismatchError):
            sync_target(online, other)


class TestRunDqn:

    def test_zero_timesteps_returns_initial_policy(self):
        initial = init_policy(MlpSpec(input_dim=10, hidden_dims=(8,), output_dim=2), 1)
        policy, curve = run_dqn(env_factory(LINEWORLD), make_config(total_timesteps=0), initial)
        assert policy is initial
        assert [r.iteration for r in curve.rows] == [0]

    def test_curve_schedule_and_offsets(self):
        options = DqnRunOptions(
            policy=PolicyConfig(hidden_dims=(8,)), eval_episodes=2,
            env_steps_offset=500, clock_offset_s=3.0, algo=Algorithm.ES_THEN_DQN, run_seed=4,
        )
        _, curve = run_dqn(env_factory(LINEWORLD), make_config(total_timesteps=250), options=options)
        assert [r.iteration for r in curve.rows] == [0, 100, 200, 250]
        assert [r.env_steps_cum for r in curve.rows] == [500, 600, 700, 750]
        assert all(r.wall_clock_s >= 3.0 for r in curve.rows)
        assert curve.algo == Algorithm.ES_THEN_DQN and curve.seed == 4
        assert curve.rows[0].loss is None and curve.rows[-1].loss is not None

    def test_deterministic_given_seed(self):
        options = DqnRunOptions(policy=PolicyConfig(hidden_dims=(8,)), eval_episodes=1)
        a, _ = run_dqn(env_factory(LINEWORLD), make_config(seed=3, num_envs=2), options=options)
        b, _ = run_dqn(env_factory(LINEWORLD), make_config(seed=3, num_envs=2), options=options)
        assert flatten(a).tobytes() == flatten(b).tobytes()

    def test_periodic_checkpoints(self, tmp_path):
        options = DqnRunOptions(policy=PolicyConfig(hidden_dims=(8,)), eval_episodes=1, checkpoint_dir=tmp_path)
        run_dqn(env_factory(LINEWORLD), make_config(checkpoint_every=100), options=options)
        assert sorted(p.name for p in tmp_path.glob("checkpoint_*.evsd")) == ["checkpoint_100.evsd", "checkpoint_200.evsd"]

    def test_rejects_policy_with_wrong_dims(self):
        initial = init_policy(MlpSpec(input_dim=5, output_dim=2), 0)
        with pytest.raises(ShapeMismatchError, match="env needs 10->2"):
            run_dqn(env_factory(LINEWORLD), make_config(), initial)

    def test_rejects_continuous_actions(self):
        with pytest.raises(UnsupportedEnvironmentError):
            run_dqn(lambda: ContinuousEnv(), make_config())


@pytest.mark.slow
def test_lineworld_greedy_policy_matches_oracle():
    """Across 10 seeds, at least 9 learn the value-iteration optimal policy within 20 000 steps."""
    world = LineWorldConfig()
    oracle = value_iteration_oracle(world, gamma=0.99)
    assert oracle.policy.tolist() == [RIGHT] * (world.length - 1)
    solved = 0
    for seed in range(10):
        cfg = DqnConfig(
            gamma=0.99, learning_rate=1e-3, buffer_capacity=10_000, batch_size=32,
            target_sync_every=250, eps_start=1.0, eps_end=0.02, eps_anneal_fraction=0.3,
            train_every=1, learning_starts=320, total_timesteps=20_000, eval_every=5_000, seed=seed,
        )
        options = DqnRunOptions(policy=PolicyConfig(hidden_dims=(32,)), eval_episodes=1)
        policy, _ = run_dqn(env_factory(EnvConfig(name=EnvName.LINEWORLD, lineworld=world)), cfg, options=options)
        greedy = np.argmax(forward(policy, np.eye(world.length)[:-1]), axis=1)
        solved += int(np.array_equal(greedy, oracle.policy))
    assert solved >= 9
