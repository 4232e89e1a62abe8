# -*- coding: utf-8 -*-
import csv
import os
import tempfile
import unittest

import numpy as np
from flask import current_app

from stabprune import create_app
from stabprune.agent import PlannerConfig, build_agent
from stabprune.errors import ConfigError, ManifestMismatchError
from stabprune.pruning import apply_pruning, build_groups, count_flops, export_manifest_csv, measure_sparsity, \
    pruned_param_count, score_importance, sparsity_from_counts, unit_norms, units_to_remove
from stabprune.search import predict_sparsity
from stabprune.settings import FullScaleConfig, tunables

MIXED_COEFFICIENTS = [0.0, 0.0, 0.0, 0.0, 0.190, 0.196, 0.102, 0.112, 0.0, 0.0]


class FullScaleGroupsTestCase(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.config = tunables(FullScaleConfig)
        cls.model = build_agent(cls.config, seed=0)
        cls.manifest = build_groups(cls.model)

    def test_parameter_total(self):
        self.assertEqual(self.model.param_count, 1533032)
        self.assertEqual(self.manifest.total_params, 1533032)
        self.assertLess(abs(self.model.param_count - 1548360) / 1548360, 0.02)

    def test_group_layout(self):
        kinds = [g.kind for g in self.manifest.groups]
        self.assertEqual(kinds, ['component_specific'] * 8 + ['coupling'] * 2)
        self.assertEqual([g.component_tag for g in self.manifest.groups[:8]],
                         ['Encoder', 'Encoder', 'Encoder', 'Dynamics', 'Reward', 'Pi', 'Q1', 'Q2'])

    def test_group_parameter_counts(self):
        counts = [g.param_count for g in self.manifest.groups]
        self.assertEqual(counts[1:3], [9248, 9248])
        self.assertEqual(counts[3:8], [262656] * 5)
        self.assertEqual(sum(counts), 1533032)

    def test_coupling_groups(self):
        encoder_pi, shared = self.manifest.groups[8], self.manifest.groups[9]
        self.assertEqual(encoder_pi.component_tag, 'Encoder-Pi')
        self.assertEqual(encoder_pi.modules, 2)
        self.assertEqual(encoder_pi.param_count, 26112)
        self.assertTrue(shared.component_tag.endswith('Dyn.Rew.Q1.Q2'))
        self.assertEqual(shared.modules, 5)
        self.assertEqual(len(shared.axes), 2)
        self.assertIn(('latent',), [axis.spaces for axis in shared.axes])

    def test_coupling_mask(self):
        self.assertEqual(self.manifest.coupling_mask().tolist(), [False] * 8 + [True] * 2)
        self.assertEqual(self.manifest.group_ids(kind='coupling'), [9, 10])
        self.assertEqual(self.manifest.group_ids('Encoder'), [1, 2, 3])

    def test_mixed_coefficients_reach_ten_percent(self):
        predicted = predict_sparsity(MIXED_COEFFICIENTS, self.manifest)
        self.assertLess(abs(predicted - 0.105), 0.005)
        pruned = apply_pruning(self.model, self.manifest, MIXED_COEFFICIENTS)
        self.assertAlmostEqual(measure_sparsity(self.model, pruned), predicted, places=12)

    def test_planning_flops(self):
        planner = PlannerConfig.from_config(self.config)
        report = count_flops(self.model, planner)
        per = report.per_component
        num_pi = int(round(planner.policy_fraction * planner.num_samples))
        expected = per['encoder'] + planner.iterations * planner.num_samples * (
            planner.horizon * (per['dynamics'] + per['reward']) + per['pi'] + per['q1'] + per['q2']) + \
            num_pi * planner.horizon * (per['pi'] + per['dynamics'])
        self.assertEqual(report.per_planning_call, expected)
        self.assertEqual(report.per_forward, sum(per.values()))


class PruningTestCase(unittest.TestCase):

    def setUp(self):
        self.app = create_app('testing')
        self.app_context = self.app.app_context()
        self.app_context.push()
        self.config = dict(current_app.config)
        self.model = build_agent(self.config, seed=3)
        self.manifest = build_groups(self.model)
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self.app_context.pop()

    def outputs(self, model, observations, actions):
        z = model.encode(observations)
        next_z, reward = model.latent_step(z, actions)
        return z, next_z, reward, model.pi(z), model.q(z, actions)

    def test_state_mode_has_the_same_layout(self):
        self.assertEqual(len(self.manifest), 10)
        self.assertEqual(sum(g.param_count for g in self.manifest.groups), self.model.param_count)

    def test_zero_coefficients_are_identity(self):
        pruned = apply_pruning(self.model, self.manifest, np.zeros(10))
        self.assertEqual(pruned.param_count, self.model.param_count)
        observations = self.rng.normal(size=(100, 3)).astype(np.float32)
        actions = self.rng.uniform(-1, 1, size=(100, 1)).astype(np.float32)
        for ours, theirs in zip(self.outputs(pruned, observations, actions),
                                self.outputs(self.model, observations, actions)):
            np.testing.assert_array_equal(ours, theirs)

    def test_pruning_leaves_the_input_model(self):
        before = {name: t.data.copy() for name, t in self.model.named_tensors().items()}
        apply_pruning(self.model, self.manifest, np.full(10, 0.5))
        for name, tensor in self.model.named_tensors().items():
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_full_coefficients_keep_one_unit(self):
        pruned = apply_pruning(self.model, self.manifest, np.ones(10))
        self.assertEqual(pruned.latent_dim, 1)
        for name, layers in pruned.components.items():
            for layer in layers[:-1]:
                self.assertEqual(layer.out_features, 1, name)
        self.assertEqual(pruned.param_count, pruned_param_count(self.manifest, np.ones(10)))

    def test_units_to_remove(self):
        self.assertEqual(units_to_remove(0.0, 16), 0)
        self.assertEqual(units_to_remove(0.25, 16), 4)
        self.assertEqual(units_to_remove(1.0, 16), 15)
        self.assertEqual(units_to_remove(0.3, 10), 3)

    def test_importance_matches_brute_force(self):
        group = self.manifest.groups[3]
        tensors = self.model.named_tensors()
        w1, b1 = tensors['dynamics.1.weight'].data, tensors['dynamics.1.bias'].data
        w2 = tensors['dynamics.2.weight'].data
        expected = [np.linalg.norm(w1[i].astype(np.float64)) + abs(float(b1[i]))
                    + np.linalg.norm(w2[:, i].astype(np.float64)) for i in range(w1.shape[0])]
        np.testing.assert_allclose(unit_norms(self.model, group), expected, rtol=1e-12)
        np.testing.assert_array_equal(score_importance(self.model, group), np.argsort(expected, kind='stable'))

    def test_lowest_norm_units_are_removed(self):
        c = np.zeros(10)
        c[3] = 0.25
        pruned = apply_pruning(self.model, self.manifest, c)
        ranking = score_importance(self.model, self.manifest.groups[3])
        kept = np.sort(ranking[4:])
        np.testing.assert_array_equal(pruned.components['dynamics'][1].weight.data,
                                      self.model.components['dynamics'][1].weight.data[kept])
        np.testing.assert_array_equal(pruned.components['dynamics'][2].weight.data,
                                      self.model.components['dynamics'][2].weight.data[:, kept])

    def test_latent_pruning_tracks_surviving_indices(self):
        c = np.zeros(10)
        c[9] = 0.5
        pruned = apply_pruning(self.model, self.manifest, c)
        self.assertEqual(pruned.latent_dim, 2)
        self.assertEqual(len(pruned.latent_index), 2)
        self.assertTrue(np.all(np.diff(pruned.latent_index) > 0))
        self.assertTrue(set(pruned.latent_index) <= set(range(4)))

    def test_sparsity_is_monotone(self):
        for _ in range(20):
            c = self.rng.uniform(0, 0.8, size=10)
            k = int(self.rng.integers(10))
            bumped = c.copy()
            bumped[k] += 0.2
            self.assertGreaterEqual(predict_sparsity(bumped, self.manifest), predict_sparsity(c, self.manifest))

    def test_predicted_matches_achieved(self):
        for _ in range(200):
            c = self.rng.uniform(0, 1, size=10)
            pruned = apply_pruning(self.model, self.manifest, c)
            self.assertAlmostEqual(measure_sparsity(self.model, pruned), predict_sparsity(c, self.manifest))

    def test_pruned_model_regroups(self):
        pruned = apply_pruning(self.model, self.manifest, np.full(10, 0.3))
        manifest = build_groups(pruned)
        self.assertEqual(len(manifest), 10)
        self.assertEqual(manifest.total_params, pruned.param_count)

    def test_flops_drop_after_pruning(self):
        pruned = apply_pruning(self.model, self.manifest, np.full(10, 0.5))
        planner = PlannerConfig.from_config(self.config)
        self.assertLess(count_flops(pruned, planner).per_planning_call,
                        count_flops(self.model, planner).per_planning_call)
        self.assertLess(count_flops(pruned).per_forward, count_flops(self.model).per_forward)

    def test_flops_match_a_recount_of_the_pruned_layers(self):
        planner = PlannerConfig.from_config(self.config)
        for _ in range(10):
            pruned = apply_pruning(self.model, self.manifest, self.rng.uniform(0, 1, size=10))
            expected = {name: sum(2 * layer.in_features * layer.out_features for layer in layers)
                        for name, layers in pruned.components.items()}
            report = count_flops(pruned, planner)
            self.assertEqual(dict(report.per_component), expected)
            self.assertEqual(report.per_forward, sum(expected.values()))
            num_pi = min(planner.num_samples, int(round(planner.policy_fraction * planner.num_samples)))
            rollout = planner.horizon * (expected['dynamics'] + expected['reward'])
            terminal = expected['pi'] + expected['q1'] + expected['q2']
            self.assertEqual(report.per_planning_call,
                             expected['encoder'] + planner.iterations * planner.num_samples * (rollout + terminal)
                             + num_pi * planner.horizon * (expected['pi'] + expected['dynamics']))

    def test_coefficient_validation(self):
        with self.assertRaises(ManifestMismatchError):
            apply_pruning(self.model, self.manifest, np.zeros(9))
        with self.assertRaises(ConfigError):
            apply_pruning(self.model, self.manifest, np.full(10, 1.2))

    def test_manifest_from_another_model(self):
        bigger = build_agent(dict(self.config, AGENT_HIDDEN=32), seed=0)
        with self.assertRaises(ManifestMismatchError):
            apply_pruning(bigger, self.manifest, np.zeros(10))

    def test_sparsity_from_counts(self):
        self.assertEqual(sparsity_from_counts(200, 150), 0.25)
        with self.assertRaises(ValueError):
            sparsity_from_counts(0, 0)

    def test_manifest_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'groups.csv')
            export_manifest_csv(self.manifest, path)
            with open(path, newline='') as f:
                rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 10)
        self.assertEqual(rows[0]['group_type'], 'component_specific')
        self.assertEqual(sum(int(r['parameters']) for r in rows), self.model.param_count)
