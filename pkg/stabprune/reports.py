# -*- coding: utf-8 -*-
"""
    Report bundle built from the CSV artifacts of earlier stages.

    Everything here is a function of the input CSVs only: tables are written
    with a fixed float format and SVGs with a fixed hash salt and no date, so
    the same inputs give byte-identical outputs.
"""
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from stabprune.errors import MissingArtifactError  # noqa: E402

logger = logging.getLogger(__name__)

# input file -> stage that writes it
REQUIRED_INPUTS = OrderedDict([
    ('traces.csv', 'verify'),
    ('verdicts.csv', 'verify'),
    ('search_log.csv', 'search'),
    ('bench.csv', 'bench'),
])
SPARSITY_PREFIX = 'sparsity='
PLOT_STYLE = {
    'svg.hashsalt': 'stabprune',
    'svg.fonttype': 'none',
    'figure.figsize': (6.0, 4.0),
    'axes.spines.top': False,
    'axes.spines.right': False,
}
FLOAT_FORMAT = '%.6g'


@dataclass
class ReportBundle:
    directory: str
    files: list = field(default_factory=list)
    boundary: float = None


def check_inputs(results_dir):
    missing = [name for name in REQUIRED_INPUTS if not os.path.isfile(os.path.join(results_dir, name))]
    if missing:
        listing = ', '.join('%s (from %s)' % (name, REQUIRED_INPUTS[name]) for name in missing)
        raise MissingArtifactError('missing report inputs in %s: %s.' % (results_dir, listing), missing)


def sparsity_label(sparsity):
    return '%s%.4f' % (SPARSITY_PREFIX, sparsity)


def band_table(traces):
    """Per label and step: mean V with the min..max band over episodes."""
    grouped = traces.groupby(['config_label', 't'], sort=True)['V']
    table = grouped.agg(['mean', 'min', 'max']).reset_index()
    return table


def frontier_table(search_log):
    """One row per distinct coefficient vector; repeated cache hits are dropped."""
    if 'c' in search_log.columns:
        search_log = search_log.drop_duplicates(subset='c', keep='first')
    frontier = search_log[['achieved_sparsity', 'reward', 'stable']].rename(columns={'achieved_sparsity': 'sparsity'})
    return frontier.sort_values(['sparsity', 'reward'], kind='mergesort').reset_index(drop=True)


def boundary_sparsity(frontier):
    """Smallest sparsity with stable = 0, or None when every row is stable."""
    unstable = frontier.loc[frontier['stable'].astype(int) == 0, 'sparsity']
    return float(unstable.min()) if len(unstable) else None


def latency_table(bench):
    table = bench.copy()
    if 'sparsity' not in table.columns:
        table['sparsity'] = 0.0
    columns = ['sparsity', 'config_label', 'call', 'mean_ms', 'median_ms', 'p95_ms',
               'flops_per_forward', 'flops_per_planning_call', 'params']
    return table[columns].sort_values(['call', 'sparsity', 'config_label'], kind='mergesort').reset_index(drop=True)


def _save(fig, path, bundle):
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    bundle.files.append(path)


def _write_table(table, path, bundle):
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    bundle.files.append(path)


def plot_sparsity_traces(band, verdicts, path, bundle):
    labels = [label for label in band['config_label'].unique() if label.startswith(SPARSITY_PREFIX)]
    if not labels:
        return
    stable = verdicts.groupby('config_label')['stable'].min().astype(bool)
    fig, ax = plt.subplots()
    for label in sorted(labels, key=lambda s: float(s[len(SPARSITY_PREFIX):])):
        rows = band[band['config_label'] == label]
        ok = bool(stable.get(label, False))
        ax.plot(rows['t'], rows['mean'], linestyle='-' if ok else '--', linewidth=1.5 if ok else 1.0,
                label='%.1f%% (%s)' % (100 * float(label[len(SPARSITY_PREFIX):]), 'stable' if ok else 'unstable'))
    ax.set_xlabel('decision step')
    ax.set_ylabel('mean V')
    ax.set_title('Lyapunov value by sparsity')
    ax.legend(frameon=False, fontsize='small')
    _save(fig, path, bundle)


def plot_bands(band, path, bundle):
    labels = [label for label in band['config_label'].unique() if not label.startswith(SPARSITY_PREFIX)]
    if not labels:
        return
    fig, ax = plt.subplots()
    colors = {'trained': 'tab:green', 'untrained': 'tab:red'}
    for label in sorted(labels):
        rows = band[band['config_label'] == label]
        color = colors.get(label)
        line, = ax.plot(rows['t'], rows['mean'], color=color, label=label)
        ax.fill_between(rows['t'], rows['min'], rows['max'], color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel('decision step')
    ax.set_ylabel('V')
    ax.set_title('Lyapunov value across episodes')
    ax.legend(frameon=False)
    _save(fig, path, bundle)


def plot_frontier(frontier, boundary, path, bundle):
    fig, ax = plt.subplots()
    stable = frontier['stable'].astype(int) == 1
    ax.scatter(100 * frontier.loc[stable, 'sparsity'], frontier.loc[stable, 'reward'],
               s=12, color='tab:green', label='stable')
    ax.scatter(100 * frontier.loc[~stable, 'sparsity'], frontier.loc[~stable, 'reward'],
               s=12, color='tab:red', marker='x', label='unstable')
    if boundary is not None:
        ax.axvline(100 * boundary, color='black', linestyle=':', linewidth=1.0)
        ax.annotate('boundary %.1f%%' % (100 * boundary), xy=(100 * boundary, 1.0),
                    xycoords=('data', 'axes fraction'), ha='left', va='top', fontsize='small')
    ax.set_xlabel('sparsity (%)')
    ax.set_ylabel('episode reward')
    ax.legend(frameon=False)
    _save(fig, path, bundle)


def plot_latency(latency, path, bundle):
    fig, ax = plt.subplots()
    for call in latency['call'].unique():
        rows = latency[latency['call'] == call]
        ax.plot(100 * rows['sparsity'], rows['mean_ms'], marker='o', label=call)
    ax.axhline(100.0, color='grey', linestyle=':', linewidth=1.0)
    ax.axhline(1.0, color='grey', linestyle='--', linewidth=1.0)
    ax.set_yscale('log')
    ax.set_xlabel('sparsity (%)')
    ax.set_ylabel('latency (ms)')
    ax.set_title('10 Hz (100 ms) and 1 kHz (1 ms) bands')
    ax.legend(frameon=False)
    _save(fig, path, bundle)


def emit_report(results_dir, out_dir=None):
    check_inputs(results_dir)
    out_dir = out_dir or os.path.join(results_dir, 'report')
    os.makedirs(out_dir, exist_ok=True)
    bundle = ReportBundle(out_dir)

    def read(name):
        return pd.read_csv(os.path.join(results_dir, name))

    traces, verdicts = read('traces.csv'), read('verdicts.csv')
    band = band_table(traces)
    frontier = frontier_table(read('search_log.csv'))
    bundle.boundary = boundary_sparsity(frontier)
    latency = latency_table(read('bench.csv'))

    with plt.rc_context(PLOT_STYLE):
        _write_table(band, os.path.join(out_dir, 'lyapunov_band.csv'), bundle)
        plot_sparsity_traces(band, verdicts, os.path.join(out_dir, 'lyapunov_by_sparsity.svg'), bundle)
        plot_bands(band, os.path.join(out_dir, 'lyapunov_band.svg'), bundle)
        _write_table(frontier, os.path.join(out_dir, 'sparsity_reward.csv'), bundle)
        plot_frontier(frontier, bundle.boundary, os.path.join(out_dir, 'sparsity_reward.svg'), bundle)
        _write_table(latency, os.path.join(out_dir, 'sparsity_latency.csv'), bundle)
        plot_latency(latency, os.path.join(out_dir, 'sparsity_latency.svg'), bundle)
    logger.info('report written to %s (%d files).', out_dir, len(bundle.files))
    return bundle
