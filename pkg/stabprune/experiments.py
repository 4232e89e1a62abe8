# -*- coding: utf-8 -*-
"""
    Stage helpers shared by the CLI commands, the three experiment drivers
    and the per-run manifests that make results reproducible.
"""
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from stabprune.agent import PlannerConfig, build_agent, evaluate, load_agent, random_policy_baseline, \
    save_agent, train_agent
from stabprune.bench import bench_inference, bench_rows, write_bench
from stabprune.errors import ConfigError, MissingArtifactError, StabPruneError
from stabprune.lyapunov import collect_trajectories, equilibrium_latent, load_lyapunov, monitor, \
    save_lyapunov, train_lyapunov, write_traces, write_verdicts
from stabprune.pruning import build_groups, export_manifest_csv
from stabprune.reports import emit_report, sparsity_label
from stabprune.runconfig import config_hash
from stabprune.search import SearchConfig, SparsityTarget, fine_tune, log_evaluations, make_evaluator, \
    search_max_sparsity, search_target, sensitivity_sweep, stability_boundary, stable_fraction_by_decile, \
    write_results, write_search_log

logger = logging.getLogger(__name__)

EXPERIMENTS = ('exp1', 'exp2', 'component_sensitivity')
AGENT_CHECKPOINT = 'agent.nncp'
LYAPUNOV_CHECKPOINT = 'lyapunov.nncp'


@contextmanager
def stage(label):
    """Prefix StabPruneErrors raised inside the block with ``label``."""
    start = time.perf_counter()
    logger.info('%s started.', label)
    try:
        yield
    except StabPruneError as e:
        if not e.message.startswith('['):
            e.with_stage(label)
        raise
    logger.info('%s finished in %.1fs.', label, time.perf_counter() - start)


def git_blob_sha1(path):
    with open(path, 'rb') as f:
        data = f.read()
    return hashlib.sha1(b'blob %d\0' % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_name: str
    config_hash: str
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_dict(self):
        return {'command': self.command, 'config_name': self.config_name, 'config_hash': self.config_hash,
                'seed': self.seed, 'inputs': self.inputs, 'outputs': self.outputs}


def write_manifest(results_dir, command, config, inputs=(), outputs=()):
    """Record the run under ``results_dir/manifests/<command>.json``."""
    def hashes(paths):
        return {os.path.relpath(p, results_dir): git_blob_sha1(p) for p in sorted(set(paths)) if os.path.isfile(p)}

    manifest = RunManifest(command, config.get('CONFIG_NAME', 'custom'), config_hash(config),
                           int(config['SEED']), hashes(inputs), hashes(outputs))
    directory = os.path.join(results_dir, 'manifests')
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, '%s.json' % command)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def require(path, stage_name):
    if not os.path.isfile(path):
        raise MissingArtifactError('%s not found; run %s first.' % (path, stage_name), [os.path.basename(path)])
    return path


# stages

@dataclass
class StageRun:
    """What a stage read and wrote, for the run manifest."""
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def merge(self, other):
        self.inputs.extend(other.inputs)
        self.outputs.extend(other.outputs)


def train_agent_stage(config, results_dir, run):
    with stage('train-agent'):
        model, log = train_agent(config, config['SEED'])
    path = os.path.join(results_dir, AGENT_CHECKPOINT)
    save_agent(model, path)
    log_path = os.path.join(results_dir, 'training_log.csv')
    log.to_csv(log_path)
    run.outputs.extend([path, log_path])
    return model


def ensure_agent(config, results_dir, run):
    path = os.path.join(results_dir, AGENT_CHECKPOINT)
    if os.path.isfile(path):
        run.inputs.append(path)
        with stage('load-agent'):
            return load_agent(path, config)
    logger.info('no agent checkpoint in %s; training one.', results_dir)
    return train_agent_stage(config, results_dir, run)


def train_lyapunov_stage(model, config, results_dir, run):
    with stage('train-lyapunov'):
        trajectories = collect_trajectories(model, config, config['LYAP_EPISODES'], config['SEED'] * 1000 + 1)
        net = train_lyapunov(trajectories, config, equilibrium_latent(model, config), seed=config['SEED'])
    path = os.path.join(results_dir, LYAPUNOV_CHECKPOINT)
    save_lyapunov(net, path)
    run.outputs.append(path)
    return net


def ensure_lyapunov(model, config, results_dir, run):
    path = os.path.join(results_dir, LYAPUNOV_CHECKPOINT)
    if os.path.isfile(path):
        run.inputs.append(path)
        with stage('load-lyapunov'):
            return load_lyapunov(path)
    return train_lyapunov_stage(model, config, results_dir, run)


def untrained_agent(config):
    return build_agent(config, seed=config['AGENT_INIT_SEED'] + config['SEED'])


def reference_monitoring(agent, net, config):
    """Verdicts of the trained agent and of its untrained initialization."""
    with stage('verify'):
        return [('trained', monitor(agent, net, config)), ('untrained', monitor(untrained_agent(config), net, config))]


def write_monitoring(labelled, out_dir, run):
    traces_path = os.path.join(out_dir, 'traces.csv')
    verdicts_path = os.path.join(out_dir, 'verdicts.csv')
    write_traces([(label, m.traces) for label, m in labelled], traces_path)
    write_verdicts([(label, v) for label, m in labelled for v in m.verdicts], verdicts_path)
    run.outputs.extend([traces_path, verdicts_path])


def bench_stage(models, config, out_dir, run):
    """``models``: iterable of (label, model, sparsity)."""
    planner = PlannerConfig.from_config(config)
    rows = []
    with stage('bench'):
        for label, model, sparsity in models:
            result = bench_inference(model, planner, config['BENCH_ITERATIONS'], config['BENCH_WARMUP'],
                                     label, config['SEED'])
            rows.extend(bench_rows(result, sparsity))
    path = os.path.join(out_dir, 'bench.csv')
    write_bench(rows, path)
    run.outputs.append(path)
    return rows


def representative_levels(frontier, count=5):
    """Best-reward candidate from each occupied sparsity bin, at most ``count`` of them."""
    if not frontier:
        return []
    sparsity = np.array([e.achieved_sparsity for e in frontier])
    edges = np.linspace(sparsity.min(), sparsity.max(), count + 1)
    bins = np.clip(np.searchsorted(edges, sparsity, side='right') - 1, 0, count - 1)
    picked = []
    for b in range(count):
        members = [e for e, k in zip(frontier, bins) if k == b and e.monitoring is not None]
        if members:
            picked.append(max(members, key=lambda e: (e.mean_reward, -e.achieved_sparsity)))
    return picked


# experiments

@dataclass
class ExperimentResult:
    name: str
    directory: str
    summary: dict
    files: list
    manifest: str = None


def _prepare(config, results_dir, name):
    results_dir = results_dir or config['RESULTS_DIR']
    out_dir = os.path.join(results_dir, name)
    os.makedirs(out_dir, exist_ok=True)
    return results_dir, out_dir


def run_exp1(config, results_dir=None):
    """Hit the configured sparsity band with a stable controller."""
    results_dir, out_dir = _prepare(config, results_dir, 'exp1')
    run = StageRun()
    agent = ensure_agent(config, results_dir, run)
    net = ensure_lyapunov(agent, config, results_dir, run)
    manifest = build_groups(agent)
    groups_path = os.path.join(out_dir, 'groups.csv')
    export_manifest_csv(manifest, groups_path)
    run.outputs.append(groups_path)

    target = SparsityTarget(config['SEARCH_TARGET_RHO'], config['SEARCH_TARGET_EPSILON'])
    search = SearchConfig.from_config(config)
    with stage('search'):
        result = search_target(agent, manifest, target, search, make_evaluator(agent, manifest, net, config))
    _write_search(result, manifest, out_dir, run, 'target')

    labelled = reference_monitoring(agent, net, config)
    if result.best.monitoring is not None:
        labelled.append((sparsity_label(result.achieved_sparsity), result.best.monitoring))
    write_monitoring(labelled, out_dir, run)
    bench_stage([('unpruned', agent, 0.0), ('pruned', result.model, result.achieved_sparsity)], config, out_dir, run)
    with stage('report'):
        report = emit_report(out_dir)
    run.outputs.extend(report.files)
    summary = {'rho': target.rho, 'epsilon': target.epsilon, 'achieved_sparsity': result.achieved_sparsity,
               'in_band': target.contains(result.achieved_sparsity), 'stable': bool(result.verdict.stable),
               'mean_reward': result.mean_reward, 'evaluations': result.evaluations_used,
               'c': [float(v) for v in result.c]}
    return _finish('exp1', config, results_dir, out_dir, summary, run)


def run_exp2(config, results_dir=None):
    """Push sparsity as far as the stability verdict allows."""
    results_dir, out_dir = _prepare(config, results_dir, 'exp2')
    run = StageRun()
    agent = ensure_agent(config, results_dir, run)
    net = ensure_lyapunov(agent, config, results_dir, run)
    manifest = build_groups(agent)
    search = SearchConfig.from_config(config)
    with stage('search'):
        result = search_max_sparsity(agent, manifest, search, make_evaluator(agent, manifest, net, config))
    _write_search(result, manifest, out_dir, run, 'max_sparsity')

    labelled = reference_monitoring(agent, net, config)
    labelled.extend((sparsity_label(e.achieved_sparsity), e.monitoring) for e in representative_levels(result.frontier))
    benched = [('unpruned', agent, 0.0), ('pruned', result.model, result.achieved_sparsity)]

    summary = {'max_stable_sparsity': result.achieved_sparsity, 'mean_reward': result.mean_reward,
               'boundary': stability_boundary(result.frontier),
               'stable_fraction_by_decile': stable_fraction_by_decile(result.frontier),
               'evaluations': result.evaluations_used, 'c': [float(v) for v in result.c]}
    if config['FINETUNE_STEPS'] > 0:
        with stage('fine-tune'):
            tuned = fine_tune(result.model, config, config['FINETUNE_STEPS'], seed=config['SEED'])
        checkpoint = os.path.join(out_dir, 'finetuned.nncp')
        save_agent(tuned.model, checkpoint)
        run.outputs.append(checkpoint)
        with stage('verify-fine-tuned'):
            tuned_monitoring = monitor(tuned.model, net, config)
        labelled.append(('fine-tuned', tuned_monitoring))
        benched.append(('fine-tuned', tuned.model, result.achieved_sparsity))
        summary.update(finetune_steps=tuned.steps, finetune_before=tuned.reward_before,
                       finetune_after=tuned.reward_after, finetune_regressed=tuned.regressed,
                       finetune_aborted=tuned.aborted, finetune_stable=bool(tuned_monitoring.aggregate.stable),
                       finetune_mean_reward=tuned_monitoring.mean_reward)
    write_monitoring(labelled, out_dir, run)
    bench_stage(benched, config, out_dir, run)
    with stage('report'):
        report = emit_report(out_dir)
    run.outputs.extend(report.files)
    return _finish('exp2', config, results_dir, out_dir, summary, run)


SENSITIVITY_TARGETS = (('encoder', 'Encoder'), ('dynamics', 'Dynamics'))


def run_component_sensitivity(config, results_dir=None):
    """Sweep encoder-only and dynamics-only pruning until each turns unstable."""
    results_dir, out_dir = _prepare(config, results_dir, 'component_sensitivity')
    run = StageRun()
    agent = ensure_agent(config, results_dir, run)
    net = ensure_lyapunov(agent, config, results_dir, run)
    manifest = build_groups(agent)
    evaluator = make_evaluator(agent, manifest, net, config)
    log, labelled, summary = [], [], {}
    for index, (name, tag) in enumerate(SENSITIVITY_TARGETS):
        group_ids = manifest.group_ids(tag, 'component_specific')
        if not group_ids:
            raise ConfigError('the agent has no component-specific %s groups.' % tag)
        with stage('sweep-%s' % name):
            sweep = sensitivity_sweep(manifest, group_ids, config['SEARCH_SWEEP_STEPS'], evaluator)
        log_evaluations(log, index, sweep.points)
        labelled.extend(('%s:%s' % (name, sparsity_label(p.achieved_sparsity)), p.monitoring) for p in sweep.points)
        summary[name] = {'group_ids': group_ids, 'destabilizing_sparsity': sweep.destabilizing_sparsity,
                         'points': [(p.achieved_sparsity, p.stable) for p in sweep.points]}
    log_path = os.path.join(out_dir, 'sweep_log.csv')
    write_search_log(log, log_path)
    run.outputs.append(log_path)
    write_monitoring(labelled, out_dir, run)
    return _finish('component_sensitivity', config, results_dir, out_dir, summary, run)


def _write_search(result, manifest, out_dir, run, label):
    log_path = os.path.join(out_dir, 'search_log.csv')
    results_path = os.path.join(out_dir, 'results.csv')
    write_search_log(result.log, log_path)
    write_results([(label, result)], manifest, results_path)
    checkpoint = os.path.join(out_dir, 'pruned.nncp')
    save_agent(result.model, checkpoint)
    run.outputs.extend([log_path, results_path, checkpoint])


def _finish(name, config, results_dir, out_dir, summary, run):
    summary_path = os.path.join(out_dir, 'summary.json')
    with open(summary_path, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=float)
        f.write('\n')
    run.outputs.append(summary_path)
    manifest = write_manifest(results_dir, 'run-experiment-%s' % name, config, run.inputs, run.outputs)
    return ExperimentResult(name, out_dir, summary, list(run.outputs), manifest)


RUNNERS = {'exp1': run_exp1, 'exp2': run_exp2, 'component_sensitivity': run_component_sensitivity}


def run_experiment(name, config, results_dir=None):
    if name not in RUNNERS:
        raise ConfigError('unknown experiment %r; choose one of %s.' % (name, ', '.join(EXPERIMENTS)))
    logger.info('running %s with config hash %s', name, config_hash(config)[:12])
    return RUNNERS[name](config, results_dir)


def baseline_summary(model, config):
    """Planned evaluation reward of ``model`` next to the random-policy mean."""
    stats = evaluate(model, config, config['TRAIN_EVAL_EPISODES'])
    return stats, random_policy_baseline(config, config['TRAIN_EVAL_EPISODES'], config['SEED'])
