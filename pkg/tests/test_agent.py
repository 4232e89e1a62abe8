# -*- coding: utf-8 -*-
import os
import tempfile
import unittest

import numpy as np
from flask import current_app

from stabprune import create_app
from stabprune.agent import PlannerConfig, ReplayBuffer, TDTrainer, build_agent, evaluate, exploration_std, \
    load_agent, plan, save_agent, train_agent
from stabprune.env import Pendulum, random_controller, run_episode
from stabprune.errors import CheckpointError, ConfigError, NonFiniteError
from stabprune.nn import save_checkpoint


class AgentTestBase(unittest.TestCase):

    def setUp(self):
        self.app = create_app('testing')
        self.app_context = self.app.app_context()
        self.app_context.push()
        self.config = dict(current_app.config)
        self.model = build_agent(self.config, seed=0)
        self.env = Pendulum.from_config(self.config)

    def tearDown(self):
        self.app_context.pop()

    def latent(self):
        observation = self.env.observer().reset((0.4, -0.3))
        return self.model.encode(observation)

    def fill_buffer(self, episodes=4):
        buffer = ReplayBuffer(10000, reward_scale=1.0 / self.env.action_repeat)
        for seed in range(episodes):
            buffer.add(run_episode(random_controller(seed), seed, self.env))
        return buffer


class AgentTestCase(AgentTestBase):

    def test_shapes(self):
        z = self.latent()
        self.assertEqual(z.shape, (4,))
        next_z, reward = self.model.latent_step(z[None], np.zeros((1, 1), dtype=np.float32))
        self.assertEqual(next_z.shape, (1, 4))
        self.assertEqual(reward.shape, (1, 1))
        q1, q2 = self.model.q(z[None], self.model.pi(z[None]))
        self.assertEqual((q1.shape, q2.shape), ((1, 1), (1, 1)))

    def test_fresh_reward_head_predicts_zero(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(8, 4)).astype(np.float32)
        actions = rng.uniform(-1, 1, size=(8, 1)).astype(np.float32)
        _, reward = self.model.latent_step(z, actions)
        self.assertTrue(np.all(reward == 0.0))

    def test_latent_step_rejects_nan(self):
        with self.assertRaises(NonFiniteError):
            self.model.latent_step(np.full((1, 4), np.nan), np.zeros((1, 1)))

    def test_policy_is_bounded(self):
        z = np.random.default_rng(1).normal(scale=10.0, size=(32, 4)).astype(np.float32)
        action = self.model.pi(z)
        self.assertTrue(np.all(np.abs(action) <= 1.0))

    def test_clone_is_independent(self):
        clone = self.model.clone()
        clone.components['pi'][0].weight.data[:] = 0.0
        self.assertFalse(np.all(self.model.components['pi'][0].weight.data == 0.0))

    def test_checkpoint_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'agent.nncp')
            save_agent(self.model, path)
            loaded = load_agent(path, self.config)
        z = self.latent()
        self.assertEqual(loaded.encode(self.env.observer().reset((0.4, -0.3))).tobytes(), z.tobytes())
        self.assertEqual(loaded.param_count, self.model.param_count)
        np.testing.assert_array_equal(loaded.latent_index, self.model.latent_index)

    def test_checkpoint_with_foreign_tensor(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'agent.nncp')
            save_checkpoint({'critic.0.weight': np.zeros((2, 2), dtype=np.float32)}, path)
            with self.assertRaises(CheckpointError):
                load_agent(path, self.config)


class PlannerTestCase(AgentTestBase):

    def test_degenerate_planner_returns_policy_action(self):
        planner = PlannerConfig(horizon=3, num_samples=1, num_elites=1, iterations=0, policy_fraction=1.0)
        z = self.latent()
        np.testing.assert_allclose(plan(self.model, z, planner, seed=0), self.model.pi(z[None])[0], rtol=1e-6)

    def test_no_iterations_without_policy_samples(self):
        planner = PlannerConfig(horizon=3, num_samples=8, num_elites=2, iterations=0, policy_fraction=0.0)
        np.testing.assert_array_equal(plan(self.model, self.latent(), planner, seed=0), [0.0])

    def test_plan_is_seeded(self):
        planner = PlannerConfig.from_config(self.config)
        z = self.latent()
        action = plan(self.model, z, planner, seed=5)
        self.assertEqual(action.tobytes(), plan(self.model, z, planner, seed=5).tobytes())
        self.assertTrue(np.all(np.abs(action) <= 1.0))

    def test_invalid_planner(self):
        with self.assertRaises(ConfigError):
            PlannerConfig(num_samples=4, num_elites=8)
        with self.assertRaises(ConfigError):
            PlannerConfig(horizon=0)
        with self.assertRaises(ConfigError):
            PlannerConfig(policy_fraction=1.5)

    def test_evaluate_needs_an_episode(self):
        with self.assertRaises(ConfigError):
            evaluate(self.model, self.config, 0)

    def test_evaluate_is_reproducible(self):
        first = evaluate(self.model, self.config, 2)
        second = evaluate(self.model, self.config, 2)
        self.assertEqual(first.rewards, second.rewards)
        self.assertLessEqual(first.max, self.env.max_episode_reward)


class TrainingTestCase(AgentTestBase):

    def test_replay_sample_shapes(self):
        buffer = self.fill_buffer()
        batch = buffer.sample(5, 3, np.random.default_rng(0))
        self.assertEqual(batch.observations.shape, (4, 5, 3))
        self.assertEqual(batch.actions.shape, (3, 5, 1))
        self.assertEqual(batch.rewards.shape, (3, 5))
        self.assertTrue(np.all(batch.rewards <= 1.0))

    def test_replay_evicts_oldest_episode(self):
        buffer = ReplayBuffer(30)
        for seed in range(3):
            buffer.add(run_episode(random_controller(seed), seed, self.env))
        self.assertEqual(len(buffer.episodes), 1)
        self.assertEqual(buffer.size, 20)

    def test_zero_learning_rate_leaves_weights(self):
        config = dict(self.config, TRAIN_LR=0.0, TRAIN_PI_LR=0.0)
        before = {name: t.data.copy() for name, t in self.model.named_tensors().items()}
        trainer = TDTrainer(self.model, config)
        buffer = self.fill_buffer()
        rng = np.random.default_rng(0)
        for _ in range(3):
            trainer.td_update(buffer.sample(8, 3, rng))
        for name, tensor in self.model.named_tensors().items():
            np.testing.assert_array_equal(tensor.data, before[name], err_msg=name)

    def test_reward_loss_decreases_on_a_fixed_batch(self):
        trainer = TDTrainer(self.model, dict(self.config, TRAIN_LR=1e-2))
        batch = self.fill_buffer().sample(16, 3, np.random.default_rng(0))
        first = trainer.td_update(batch)
        for _ in range(60):
            last = trainer.td_update(batch)
        self.assertFalse(last.skipped)
        self.assertLess(last.reward_loss, first.reward_loss)

    def test_exploration_schedule(self):
        self.assertEqual(exploration_std(self.config, 0), self.config['TRAIN_STD_START'])
        self.assertAlmostEqual(exploration_std(self.config, self.config['TRAIN_ENV_STEPS']),
                               self.config['TRAIN_STD_END'])

    def test_short_training_run(self):
        config = dict(self.config, TRAIN_ENV_STEPS=80, TRAIN_SEED_STEPS=40, TRAIN_EVAL_EVERY=80)
        model, log = train_agent(config, seed=0)
        self.assertEqual(model.param_count, self.model.param_count)
        self.assertTrue(log.rows)
        self.assertNotEqual(log.rows[-1]['eval_reward'], '')
