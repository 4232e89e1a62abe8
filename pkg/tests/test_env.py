# -*- coding: utf-8 -*-
import math
import os
import tempfile
import unittest

import numpy as np
from flask import current_app

from stabprune import create_app
from stabprune.agent import random_policy_baseline
from stabprune.env import UPRIGHT, Pendulum, episode_to_csv, hold_controller, random_controller, render_pixels, \
    run_episode, state_observation, wrap_angle
from stabprune.errors import NonFiniteError


class PendulumTestCase(unittest.TestCase):

    def setUp(self):
        self.app = create_app('testing')
        self.app_context = self.app.app_context()
        self.app_context.push()
        self.env = Pendulum.from_config(current_app.config)

    def tearDown(self):
        self.app_context.pop()

    def test_upright_is_a_fixed_point(self):
        state, reward = self.env.step(UPRIGHT, 0.0)
        self.assertEqual(tuple(state), (0.0, 0.0))
        self.assertEqual(reward, 1.0)

    def test_holding_upright_earns_the_cap(self):
        episode = run_episode(hold_controller(0.0), 0, self.env, initial_state=(0.0, 0.0))
        self.assertEqual(episode.length, self.env.episode_length)
        self.assertEqual(episode.total_reward, self.env.max_episode_reward)
        self.assertEqual(self.env.max_episode_reward, 20 * 8)

    def test_action_is_clipped(self):
        start = (0.3, -0.2)
        self.assertEqual(self.env.step(start, 5.0), self.env.step(start, 1.0))
        self.assertEqual(self.env.step(start, -3.0), self.env.step(start, -1.0))

    def test_energy_is_conserved_without_damping_or_torque(self):
        env = Pendulum(dt=0.001, damping=0.0, max_speed=100.0)
        state = (2.0, 0.0)
        start = env.energy(state)
        for _ in range(2000):
            state, _ = env.step(state, 0.0)
        self.assertLess(abs(env.energy(state) - start), 0.02 * abs(start))

    def test_damping_dissipates_energy(self):
        env = Pendulum(damping=1.0)
        state = (2.5, 1.0)
        start = env.energy(state)
        for _ in range(1000):
            state, _ = env.step(state, 0.0)
        self.assertLess(env.energy(state), start)

    def test_speed_is_bounded(self):
        state = (math.pi - 0.1, 0.0)
        for _ in range(500):
            state, _ = self.env.step(state, 1.0)
            self.assertLessEqual(abs(state[1]), self.env.max_speed)

    def test_non_finite_action(self):
        with self.assertRaises(NonFiniteError):
            self.env.step(UPRIGHT, float('nan'))

    def test_non_finite_controller_aborts_episode(self):
        episode = run_episode(lambda observation: np.array([np.nan]), 0, self.env)
        self.assertTrue(episode.aborted)
        self.assertEqual(episode.length, 0)
        self.assertEqual(episode.total_reward, 0.0)

    def test_episodes_are_deterministic(self):
        first = run_episode(random_controller(4), 4, self.env)
        second = run_episode(random_controller(4), 4, self.env)
        self.assertEqual(first.rewards, second.rewards)
        np.testing.assert_array_equal(first.state_array(), second.state_array())

    def test_action_repeat_override(self):
        episode = run_episode(hold_controller(0.0), 0, self.env, action_repeat=2, initial_state=(0.0, 0.0))
        self.assertEqual(episode.total_reward, 20 * 2)

    def test_random_policy_stays_below_half_the_cap(self):
        config = dict(current_app.config, ENV_EPISODE_LENGTH=125)
        env = Pendulum.from_config(config)
        self.assertLess(random_policy_baseline(config, 40, seed=11), 0.5 * env.max_episode_reward)

    def test_state_observation(self):
        np.testing.assert_allclose(state_observation((0.0, 0.5)), [1.0, 0.0, 0.5])

    def test_episode_csv(self):
        episode = run_episode(random_controller(1), 1, self.env)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'episode.csv')
            episode_to_csv(episode, path)
            with open(path) as f:
                lines = f.read().splitlines()
        self.assertEqual(lines[0], 'step,theta,theta_dot,action,reward')
        self.assertEqual(len(lines), episode.length + 1)


class AngleTestCase(unittest.TestCase):

    def test_wrap_angle(self):
        self.assertEqual(wrap_angle(math.pi), math.pi)
        self.assertEqual(wrap_angle(-math.pi), math.pi)
        self.assertAlmostEqual(wrap_angle(1.5 * math.pi), -0.5 * math.pi)
        self.assertAlmostEqual(wrap_angle(0.25), 0.25)


class RenderTestCase(unittest.TestCase):

    def test_range_and_shape(self):
        image = render_pixels((0.7, 0.0))
        self.assertEqual(image.shape, (28, 28))
        self.assertGreaterEqual(image.min(), 0.0)
        self.assertLessEqual(image.max(), 1.0)

    def test_mirror_symmetry(self):
        for theta in (0.3, 1.2, 2.9):
            np.testing.assert_allclose(render_pixels((theta, 0.0)), np.fliplr(render_pixels((-theta, 0.0))),
                                       atol=1e-6)

    def test_upright_rod_points_up(self):
        image = render_pixels((0.0, 0.0))
        self.assertGreater(image[:14].sum(), image[14:].sum())
        hanging = render_pixels((math.pi, 0.0))
        self.assertGreater(hanging[14:].sum(), hanging[:14].sum())

    def test_pixel_observations_stack_frames(self):
        env = Pendulum(obs_mode='pixels')
        episode = run_episode(hold_controller(0.0), 0, env, episode_length=2)
        self.assertEqual(episode.observation_array().shape, (3, 3, 28, 28))
