# -*- coding: utf-8 -*-
"""
    Pipeline stages as ``flask`` commands: train-agent, train-lyapunov,
    prune, search, verify and bench.
"""
import os
from functools import wraps

import click
import numpy as np
from flask import Blueprint, current_app

from stabprune.agent import load_agent, save_agent
from stabprune.errors import ConfigError, VerificationError, handle_errors
from stabprune.experiments import AGENT_CHECKPOINT, LYAPUNOV_CHECKPOINT, StageRun, baseline_summary, \
    bench_stage, reference_monitoring, require, train_agent_stage, train_lyapunov_stage, write_manifest, \
    write_monitoring
from stabprune.lyapunov import load_lyapunov, monitor
from stabprune.pruning import apply_pruning, build_groups, export_manifest_csv, measure_sparsity
from stabprune.reports import sparsity_label
from stabprune.runconfig import load_run_config
from stabprune.search import SearchConfig, SparsityTarget, fine_tune, make_evaluator, predict_sparsity, \
    search_max_sparsity, search_target, stability_boundary, write_results, write_search_log

pipeline_bp = Blueprint('pipeline', __name__, cli_group=None)


def run_options(f):
    """--config, --seed and --results-dir, resolved into a ``config`` keyword."""
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                  help='Run-config file of key = value lines.')
    @click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None, help='Overrides the configured seed.')
    @click.option('--results-dir', type=click.Path(file_okay=False), default=None,
                  help='Where artifacts are read and written.')
    @wraps(f)
    def decorated(config_path, seed, results_dir, **kwargs):
        return f(config=resolve_config(config_path, seed, results_dir), **kwargs)
    return decorated


def resolve_config(config_path=None, seed=None, results_dir=None):
    values = dict(current_app.config)
    if config_path:
        values.update(load_run_config(config_path))
    if seed is not None:
        values['SEED'] = seed
    if results_dir:
        values['RESULTS_DIR'] = results_dir
    os.makedirs(values['RESULTS_DIR'], exist_ok=True)
    return values


def artifact(config, name):
    return os.path.join(config['RESULTS_DIR'], name)


def parse_coefficients(text):
    try:
        return np.array([float(v) for v in text.replace(',', ';').split(';') if v.strip()])
    except ValueError:
        raise ConfigError('coefficients must be numbers separated by ";", got %r.' % text)


@pipeline_bp.cli.command('train-agent')
@handle_errors('train-agent')
@run_options
def train_agent_command(config):
    """Train the controller from scratch."""
    run = StageRun()
    model = train_agent_stage(config, config['RESULTS_DIR'], run)
    stats, baseline = baseline_summary(model, config)
    write_manifest(config['RESULTS_DIR'], 'train-agent', config, run.inputs, run.outputs)
    click.echo('Trained agent with %d parameters.' % model.param_count)
    click.echo('Evaluation reward %.1f (min %.1f, max %.1f); random policy %.1f.'
               % (stats.mean, stats.min, stats.max, baseline))


@pipeline_bp.cli.command('train-lyapunov')
@handle_errors('train-lyapunov')
@run_options
def train_lyapunov_command(config):
    """Fit the Lyapunov function to rollouts of the trained agent."""
    run = StageRun()
    path = require(artifact(config, AGENT_CHECKPOINT), 'train-agent')
    run.inputs.append(path)
    net = train_lyapunov_stage(load_agent(path, config), config, config['RESULTS_DIR'], run)
    write_manifest(config['RESULTS_DIR'], 'train-lyapunov', config, run.inputs, run.outputs)
    click.echo('Trained Lyapunov net over %d latent dimensions (scale %.4g).' % (net.latent_dim, net.scale))


@pipeline_bp.cli.command('prune')
@handle_errors('prune')
@run_options
@click.option('--coefficients', '-c', required=True, help='One coefficient per group, separated by ";".')
@click.option('--checkpoint', default=AGENT_CHECKPOINT, help='Agent checkpoint inside the results directory.')
@click.option('--output', default='pruned.nncp', help='Pruned checkpoint name.')
@click.option('--fine-tune-steps', type=click.IntRange(0), default=0, help='TD updates after pruning.')
def prune_command(config, coefficients, checkpoint, output, fine_tune_steps):
    """Apply a coefficient vector to the agent."""
    run = StageRun()
    path = require(artifact(config, checkpoint), 'train-agent')
    run.inputs.append(path)
    agent = load_agent(path, config)
    manifest = build_groups(agent)
    c = parse_coefficients(coefficients)
    pruned = apply_pruning(agent, manifest, c)
    if fine_tune_steps:
        result = fine_tune(pruned, config, fine_tune_steps, seed=config['SEED'])
        pruned = result.model
        click.echo('Fine-tuned %d steps: reward %.1f -> %.1f%s.' % (result.steps, result.reward_before,
                                                                   result.reward_after,
                                                                   ' (regressed)' if result.regressed else ''))
    groups_path = artifact(config, 'groups.csv')
    export_manifest_csv(manifest, groups_path)
    output_path = artifact(config, output)
    save_agent(pruned, output_path)
    run.outputs.extend([groups_path, output_path])
    write_manifest(config['RESULTS_DIR'], 'prune', config, run.inputs, run.outputs)
    click.echo('Predicted sparsity %.4f, achieved %.4f (%d -> %d parameters).'
               % (predict_sparsity(c, manifest), measure_sparsity(agent, pruned), agent.param_count,
                  pruned.param_count))


@pipeline_bp.cli.command('search')
@handle_errors('search')
@run_options
@click.option('--mode', type=click.Choice(['target', 'max']), default='target', show_default=True)
@click.option('--rho', type=float, default=None, help='Target sparsity (target mode).')
@click.option('--epsilon', type=float, default=None, help='Upper tolerance above rho (target mode).')
def search_command(config, mode, rho, epsilon):
    """Search pruning coefficients under the stability verdict."""
    run = StageRun()
    agent_path = require(artifact(config, AGENT_CHECKPOINT), 'train-agent')
    net_path = require(artifact(config, LYAPUNOV_CHECKPOINT), 'train-lyapunov')
    run.inputs.extend([agent_path, net_path])
    agent = load_agent(agent_path, config)
    net = load_lyapunov(net_path)
    manifest = build_groups(agent)
    search = SearchConfig.from_config(config)
    evaluator = make_evaluator(agent, manifest, net, config)
    if mode == 'target':
        target = SparsityTarget(config['SEARCH_TARGET_RHO'] if rho is None else rho,
                                config['SEARCH_TARGET_EPSILON'] if epsilon is None else epsilon)
        result = search_target(agent, manifest, target, search, evaluator)
    else:
        result = search_max_sparsity(agent, manifest, search, evaluator)
    log_path, results_path = artifact(config, 'search_log.csv'), artifact(config, 'results.csv')
    checkpoint = artifact(config, 'pruned.nncp')
    write_search_log(result.log, log_path)
    write_results([(mode, result)], manifest, results_path)
    save_agent(result.model, checkpoint)
    run.outputs.extend([log_path, results_path, checkpoint])
    write_manifest(config['RESULTS_DIR'], 'search', config, run.inputs, run.outputs)
    click.echo('Sparsity %.4f, reward %.1f, %s after %d evaluations.'
               % (result.achieved_sparsity, result.mean_reward,
                  'stable' if result.verdict.stable else 'unstable', result.evaluations_used))
    if mode == 'max':
        boundary = stability_boundary(result.frontier)
        click.echo('Stability boundary: %s.' % ('not reached' if boundary is None else '%.4f' % boundary))


@pipeline_bp.cli.command('verify')
@handle_errors('verify')
@run_options
@click.option('--checkpoint', default=AGENT_CHECKPOINT, help='Agent checkpoint inside the results directory.')
@click.option('--label', default=None, help='Trace label; defaults to the checkpoint sparsity.')
@click.option('--references/--no-references', default=False,
              help='Also record the trained and untrained reference agents.')
def verify_command(config, checkpoint, label, references):
    """Judge the Lyapunov traces of an agent; exits 4 when unstable."""
    run = StageRun()
    agent_path = require(artifact(config, AGENT_CHECKPOINT), 'train-agent')
    net_path = require(artifact(config, LYAPUNOV_CHECKPOINT), 'train-lyapunov')
    path = require(artifact(config, checkpoint), 'prune')
    run.inputs.extend([agent_path, net_path, path])
    agent = load_agent(agent_path, config)
    net = load_lyapunov(net_path)
    model = load_agent(path, config)
    sparsity = measure_sparsity(agent, model)
    monitoring = monitor(model, net, config)
    labelled = reference_monitoring(agent, net, config) if references else []
    labelled.append((label or sparsity_label(sparsity), monitoring))
    write_monitoring(labelled, config['RESULTS_DIR'], run)
    write_manifest(config['RESULTS_DIR'], 'verify', config, run.inputs, run.outputs)
    verdict = monitoring.aggregate
    click.echo('%s: %s, %d of %d episodes unstable, mean reward %.1f.'
               % (checkpoint, 'stable' if verdict.stable else 'unstable', verdict.unstable_episodes,
                  len(monitoring.verdicts), monitoring.mean_reward))
    if not verdict.stable:
        raise VerificationError('%s failed the stability verdict.' % checkpoint)


@pipeline_bp.cli.command('bench')
@handle_errors('bench')
@run_options
@click.option('--checkpoint', '-k', 'checkpoints', multiple=True,
              help='Checkpoint(s) to time; the first is the sparsity reference.')
def bench_command(config, checkpoints):
    """Time planning and policy calls of one or more checkpoints."""
    run = StageRun()
    checkpoints = checkpoints or (AGENT_CHECKPOINT,)
    models = []
    for name in checkpoints:
        path = require(artifact(config, name), 'train-agent')
        run.inputs.append(path)
        models.append((os.path.splitext(name)[0], load_agent(path, config)))
    reference = models[0][1]
    rows = bench_stage([(label, model, measure_sparsity(reference, model)) for label, model in models],
                       config, config['RESULTS_DIR'], run)
    write_manifest(config['RESULTS_DIR'], 'bench', config, run.inputs, run.outputs)
    for row in rows:
        click.echo('%-12s %-8s mean %s ms  p95 %s ms  %s FLOPs/forward'
                   % (row['config_label'], row['call'], row['mean_ms'], row['p95_ms'], row['flops_per_forward']))
