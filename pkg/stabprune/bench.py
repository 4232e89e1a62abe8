# -*- coding: utf-8 -*-
"""
    Host inference timing and analytic FLOPs, annotated against the 10 Hz to
    1 kHz control-rate band.
"""
import csv
import time
from dataclasses import dataclass

import numpy as np

from stabprune.agent import plan
from stabprune.pruning import count_flops

# reference per-inference figure for the full-scale controller
REFERENCE_FLOPS = 4.12e8
RATE_BANDS_MS = {'10hz': 100.0, '1khz': 1.0}


@dataclass
class LatencyStats:
    mean: float
    median: float
    p95: float
    samples: np.ndarray

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=np.float64)
        return cls(float(samples.mean()), float(np.median(samples)), float(np.percentile(samples, 95)), samples)

    def meets(self, band):
        return self.p95 <= RATE_BANDS_MS[band]


@dataclass
class BenchResult:
    label: str
    planning: LatencyStats
    policy: LatencyStats
    flops_per_forward: int
    flops_per_planning_call: int
    params: int


def time_calls(fn, iterations, warmup):
    """Wall-clock milliseconds of ``iterations`` calls after ``warmup`` untimed calls."""
    for _ in range(warmup):
        fn()
    samples = np.empty(iterations)
    for i in range(iterations):
        start = time.perf_counter()
        fn()
        samples[i] = (time.perf_counter() - start) * 1000.0
    return samples


def bench_inference(model, planner, iterations=100, warmup=10, label='', seed=0):
    if iterations < 1:
        raise ValueError('bench_inference needs at least one timed iteration.')
    observation = np.random.default_rng(seed).uniform(0.0, 1.0, model.obs_shape).astype(np.float32)

    def planning_call():
        return plan(model, model.encode(observation), planner, seed)

    def policy_call():
        return model.pi(model.encode(observation)[None])[0]

    flops = count_flops(model, planner)
    return BenchResult(label,
                       LatencyStats.from_samples(time_calls(planning_call, iterations, warmup)),
                       LatencyStats.from_samples(time_calls(policy_call, iterations, warmup)),
                       flops.per_forward, flops.per_planning_call, flops.params)


BENCH_FIELDS = ['config_label', 'call', 'mean_ms', 'median_ms', 'p95_ms', 'iterations', 'params',
                'flops_per_forward', 'flops_per_planning_call', 'reference_flops', 'meets_10hz', 'meets_1khz']


def bench_rows(result, sparsity=None):
    rows = []
    for call, stats in (('planning', result.planning), ('policy', result.policy)):
        row = {'config_label': result.label, 'call': call, 'mean_ms': '%.4f' % stats.mean,
               'median_ms': '%.4f' % stats.median, 'p95_ms': '%.4f' % stats.p95,
               'iterations': len(stats.samples), 'params': result.params,
               'flops_per_forward': result.flops_per_forward,
               'flops_per_planning_call': result.flops_per_planning_call,
               'reference_flops': '%.3g' % REFERENCE_FLOPS,
               'meets_10hz': int(stats.meets('10hz')), 'meets_1khz': int(stats.meets('1khz'))}
        if sparsity is not None:
            row['sparsity'] = '%.4f' % sparsity
        rows.append(row)
    return rows


def write_bench(rows, path):
    fields = BENCH_FIELDS + (['sparsity'] if any('sparsity' in row for row in rows) else [])
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fields, restval='')
        writer.writeheader()
        writer.writerows(rows)
