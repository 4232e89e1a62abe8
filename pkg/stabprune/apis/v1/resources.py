# -*- coding: utf-8 -*-
import json
import os

import pandas as pd
from flask import current_app, jsonify, request, url_for
from flask.views import MethodView

from stabprune.apis.v1 import api_v1
from stabprune.apis.v1.errors import ValidationError, api_abort
from stabprune.apis.v1.schemas import bench_schema, frontier_schema, groups_schema, verdicts_schema
from stabprune.errors import MissingArtifactError
from stabprune.experiments import EXPERIMENTS
from stabprune.reports import boundary_sparsity, frontier_table
from stabprune.search import decile_fractions


def get_run():
    """Optional ``run`` query argument naming an experiment subdirectory."""
    run = request.args.get('run')
    if run is not None and run not in EXPERIMENTS:
        raise ValidationError('Unknown run %r; expected one of %s.' % (run, ', '.join(EXPERIMENTS)))
    return run


def run_path(run, name):
    directory = current_app.config['RESULTS_DIR']
    if run is not None:
        directory = os.path.join(directory, run)
    return os.path.join(directory, name)


def read_csv(run, name):
    path = run_path(run, name)
    if not os.path.isfile(path):
        raise MissingArtifactError('%s is not available for %s.' % (name, run or 'the results directory'), [name])
    return pd.read_csv(path)


class IndexAPI(MethodView):

    def get(self):
        return jsonify({
            'api_version': '1.0',
            'api_base_url': url_for('.index', _external=True),
            'groups_url': url_for('.groups', _external=True) + '{?run}',
            'frontier_url': url_for('.frontier', _external=True) + '{?run}',
            'verdicts_url': url_for('.verdicts', _external=True) + '{?run}',
            'bench_url': url_for('.bench', _external=True) + '{?run}',
            'manifest_url': url_for('.index', _external=True) + 'manifests/{command}',
            'runs': list(EXPERIMENTS),
        })


class GroupsAPI(MethodView):

    def get(self):
        """Pruning groups with their parameter counts."""
        run = get_run()
        frame = read_csv(run, 'groups.csv')
        return jsonify(groups_schema(frame, run))


class FrontierAPI(MethodView):

    def get(self):
        """Explored candidates sorted by sparsity, with the first unstable sparsity."""
        run = get_run()
        frame = read_csv(run, 'search_log.csv')
        frontier = frontier_table(frame)
        fractions = decile_fractions(frontier['sparsity'].to_numpy(), frontier['stable'].to_numpy())
        return jsonify(frontier_schema(frontier, boundary_sparsity(frontier), fractions, run))


class VerdictsAPI(MethodView):

    def get(self):
        run = get_run()
        frame = read_csv(run, 'verdicts.csv')
        return jsonify(verdicts_schema(frame, run))


class BenchAPI(MethodView):

    def get(self):
        run = get_run()
        frame = read_csv(run, 'bench.csv')
        return jsonify(bench_schema(frame, run))


class ManifestAPI(MethodView):

    def get(self, command):
        path = os.path.join(current_app.config['RESULTS_DIR'], 'manifests', '%s.json' % command)
        if os.path.basename(path) != '%s.json' % command or not os.path.isfile(path):
            return api_abort(404, 'No manifest recorded for %r.' % command)
        with open(path, encoding='utf-8') as f:
            return jsonify(json.load(f))


api_v1.add_url_rule('/', view_func=IndexAPI.as_view('index'), methods=['GET'])
api_v1.add_url_rule('/groups', view_func=GroupsAPI.as_view('groups'), methods=['GET'])
api_v1.add_url_rule('/frontier', view_func=FrontierAPI.as_view('frontier'), methods=['GET'])
api_v1.add_url_rule('/verdicts', view_func=VerdictsAPI.as_view('verdicts'), methods=['GET'])
api_v1.add_url_rule('/bench', view_func=BenchAPI.as_view('bench'), methods=['GET'])
api_v1.add_url_rule('/manifests/<command>', view_func=ManifestAPI.as_view('manifest'), methods=['GET'])
