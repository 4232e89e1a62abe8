# -*- coding: utf-8 -*-
"""
    ``flask report`` and ``flask run-experiment``.
"""
import os

import click
from flask import Blueprint

from stabprune.blueprints.pipeline import run_options
from stabprune.errors import handle_errors
from stabprune.experiments import EXPERIMENTS, run_experiment, write_manifest
from stabprune.reports import REQUIRED_INPUTS, emit_report

experiments_bp = Blueprint('experiments', __name__, cli_group=None)


@experiments_bp.cli.command('report')
@handle_errors('report')
@run_options
@click.option('--input-dir', type=click.Path(file_okay=False), default=None,
              help='Directory holding the stage CSVs; defaults to the results directory.')
def report_command(config, input_dir):
    """Render CSV tables and SVG plots from stage outputs."""
    input_dir = input_dir or config['RESULTS_DIR']
    bundle = emit_report(input_dir)
    write_manifest(config['RESULTS_DIR'], 'report', config,
                   [os.path.join(input_dir, name) for name in REQUIRED_INPUTS], bundle.files)
    for path in bundle.files:
        click.echo(path)
    if bundle.boundary is not None:
        click.echo('First unstable sparsity: %.4f' % bundle.boundary)


@experiments_bp.cli.command('run-experiment')
@handle_errors('run-experiment')
@run_options
@click.argument('name', type=click.Choice(EXPERIMENTS))
def run_experiment_command(config, name):
    """Run exp1, exp2 or component_sensitivity end to end."""
    result = run_experiment(name, config)
    click.echo('%s finished; outputs in %s' % (name, result.directory))
    for key in sorted(result.summary):
        click.echo('  %s: %s' % (key, result.summary[key]))
