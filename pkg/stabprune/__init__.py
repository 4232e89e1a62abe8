# -*- coding: utf-8 -*-
"""
    stabprune: stability-aware structured pruning of a latent-planning
    pendulum controller.

    The Flask application hosts the command line (``flask train-agent`` ...)
    and a read-only JSON view of a results directory.
"""
import os

import click
from flask import Flask, jsonify

from stabprune.apis.v1 import api_v1
from stabprune.blueprints.experiments import experiments_bp
from stabprune.blueprints.pipeline import pipeline_bp
from stabprune.runconfig import dump_run_config
from stabprune.settings import config, tunables


def create_app(config_name=None):
    if config_name is None:
        config_name = os.getenv('FLASK_CONFIG', 'development')

    app = Flask('stabprune')
    app.config.from_object(config[config_name])
    app.config['CONFIG_NAME'] = config_name

    register_logging(app)
    register_blueprints(app)
    register_commands(app)
    register_errors(app)
    return app


def register_logging(app):
    # library modules log to children of the app logger
    app.logger.setLevel(app.config['LOG_LEVEL'])


def register_blueprints(app):
    app.register_blueprint(pipeline_bp)
    app.register_blueprint(experiments_bp)
    app.register_blueprint(api_v1, url_prefix='/api/v1')


def register_errors(app):
    @app.errorhandler(404)
    def page_not_found(e):
        response = jsonify(code=404, message='The requested URL was not found on the server.')
        response.status_code = 404
        return response

    @app.errorhandler(405)
    def method_not_allowed(e):
        response = jsonify(code=405, message='The method is not allowed for the requested URL.')
        response.status_code = 405
        return response

    @app.errorhandler(500)
    def internal_server_error(e):
        response = jsonify(code=500, message='An internal server error occurred.')
        response.status_code = 500
        return response


def register_commands(app):
    @app.cli.command('config-template')
    @click.option('--all', 'show_all', is_flag=True, help='Include keys equal to the base defaults.')
    def config_template(show_all):
        """Print the active configuration as a run-config file."""
        base = tunables()
        values = {key: app.config[key] for key in base
                  if key != 'RESULTS_DIR' and (show_all or app.config[key] != base[key])}
        click.echo('# %s configuration' % app.config['CONFIG_NAME'])
        click.echo(dump_run_config(values), nl=False)
