# -*- coding: utf-8 -*-
import os
import tempfile
import unittest

import pandas as pd
from flask import url_for

from stabprune import create_app
from stabprune.agent import build_agent
from stabprune.experiments import write_manifest
from stabprune.pruning import build_groups, export_manifest_csv


class APITestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.app = create_app('testing')
        self.app.config['RESULTS_DIR'] = self.tmp.name
        self.app_context = self.app.test_request_context()
        self.app_context.push()
        self.client = self.app.test_client()

    def tearDown(self):
        self.app_context.pop()
        self.tmp.cleanup()

    def path(self, *names):
        return os.path.join(self.tmp.name, *names)

    def test_api_index(self):
        response = self.client.get(url_for('api_v1.index'))
        data = response.get_json()
        self.assertEqual(response.status_code, 200)
        self.assertEqual(data['api_version'], '1.0')
        self.assertEqual(data['runs'], ['exp1', 'exp2', 'component_sensitivity'])

    def test_missing_artifact(self):
        response = self.client.get(url_for('api_v1.groups'))
        data = response.get_json()
        self.assertEqual(response.status_code, 404)
        self.assertEqual(data['missing'], ['groups.csv'])

    def test_unknown_run(self):
        response = self.client.get(url_for('api_v1.groups', run='bogus'))
        self.assertEqual(response.status_code, 400)
        self.assertIn('bogus', response.get_json()['message'])

    def test_get_groups(self):
        model = build_agent(self.app.config, seed=0)
        export_manifest_csv(build_groups(model), self.path('groups.csv'))
        response = self.client.get(url_for('api_v1.groups'))
        data = response.get_json()
        self.assertEqual(response.status_code, 200)
        self.assertEqual(data['kind'], 'GroupManifest')
        self.assertEqual(data['group_count'], 10)
        self.assertEqual(data['coupling_groups'], 2)
        self.assertEqual(data['total_params'], model.param_count)

    def test_groups_of_a_run(self):
        os.makedirs(self.path('exp1'))
        export_manifest_csv(build_groups(build_agent(self.app.config, seed=0)), self.path('exp1', 'groups.csv'))
        self.assertEqual(self.client.get(url_for('api_v1.groups', run='exp1')).status_code, 200)
        self.assertEqual(self.client.get(url_for('api_v1.groups', run='exp2')).status_code, 404)

    def test_get_frontier(self):
        pd.DataFrame({'generation': [0, 0, 1], 'candidate': [0, 1, 0], 'c': ['0', '0.3', '0.2'],
                      'predicted_sparsity': [0.0, 0.3, 0.2], 'achieved_sparsity': [0.0, 0.3, 0.2],
                      'reward': [900.0, 300.0, 700.0], 'stable': [1, 0, 1],
                      'rise_budget_used': [0.0, 1.2, 0.0]}).to_csv(self.path('search_log.csv'), index=False)
        response = self.client.get(url_for('api_v1.frontier'))
        data = response.get_json()
        self.assertEqual(response.status_code, 200)
        self.assertEqual(data['count'], 3)
        self.assertEqual(data['boundary'], 0.3)
        self.assertEqual([row['sparsity'] for row in data['candidates']], [0.0, 0.2, 0.3])

    def test_frontier_counts_each_candidate_once(self):
        pd.DataFrame({'generation': [0, 1, 1], 'candidate': [0, 0, 1], 'c': ['0;0.5', '0;0.5', '0.5;0.5'],
                      'predicted_sparsity': [0.1, 0.1, 0.2], 'achieved_sparsity': [0.1, 0.1, 0.2],
                      'reward': [800.0, 800.0, 600.0], 'stable': [1, 1, 1],
                      'rise_budget_used': [0.0, 0.0, 0.1]}).to_csv(self.path('search_log.csv'), index=False)
        data = self.client.get(url_for('api_v1.frontier')).get_json()
        self.assertEqual(data['count'], 2)
        self.assertIsNone(data['boundary'])

    def test_get_verdicts(self):
        pd.DataFrame({'config_label': ['trained', 'trained', 'untrained'], 'episode': [0, 1, 0],
                      'stable': [1, 1, 0], 'settling_step': [12, 15, None], 'rise_budget_used': [0.0, 0.0, 0.4],
                      'terminal_residual': [0.0, 0.0, 0.8]}).to_csv(self.path('verdicts.csv'), index=False)
        data = self.client.get(url_for('api_v1.verdicts')).get_json()
        self.assertEqual(data['count'], 2)
        self.assertEqual([(label['config_label'], label['stable']) for label in data['labels']],
                         [('trained', True), ('untrained', False)])
        self.assertIsNone(data['labels'][1]['episodes'][0]['settling_step'])

    def test_get_manifest(self):
        url = url_for('api_v1.manifest', command='prune')
        self.assertEqual(self.client.get(url).status_code, 404)
        write_manifest(self.tmp.name, 'prune', dict(self.app.config))
        response = self.client.get(url)
        data = response.get_json()
        self.assertEqual(response.status_code, 200)
        self.assertEqual(data['command'], 'prune')
        self.assertEqual(data['config_name'], 'testing')
        self.assertEqual(data['inputs'], {})

    def test_404_is_json(self):
        response = self.client.get('/api/v1/nothing-here')
        self.assertEqual(response.status_code, 404)
        self.assertEqual(response.get_json()['code'], 404)

    def test_405_is_json(self):
        response = self.client.post(url_for('api_v1.groups'))
        self.assertEqual(response.status_code, 405)
        self.assertEqual(response.get_json()['code'], 405)
