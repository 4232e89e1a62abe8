# -*- coding: utf-8 -*-
"""
    Coefficient search over pruning groups.

    ``search_target`` hits a sparsity band while keeping the controller
    stable; ``search_max_sparsity`` pushes sparsity as far as the stability
    verdict allows. Both run a (mu + lambda) evolution strategy with
    lexicographic fitness and cache every evaluated coefficient vector.
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from stabprune.agent import PlannerConfig, ReplayBuffer, TDTrainer, evaluate, evaluation_seeds, make_controller
from stabprune.env import Pendulum, run_episode
from stabprune.errors import ConfigError, InfeasibleSearchError, VerificationError
from stabprune.lyapunov import monitor
from stabprune.pruning import apply_pruning, measure_sparsity, pruned_param_count, sparsity_from_counts, \
    validate_coefficients

logger = logging.getLogger(__name__)


@dataclass
class SparsityTarget:
    rho: float
    epsilon: float

    def __post_init__(self):
        if self.rho < 0 or self.epsilon < 0 or self.rho + self.epsilon > 1:
            raise ConfigError('sparsity target needs 0 <= rho, 0 <= epsilon, rho + epsilon <= 1; '
                              'got rho=%s epsilon=%s.' % (self.rho, self.epsilon))

    @property
    def upper(self):
        return self.rho + self.epsilon

    def contains(self, sparsity):
        return self.rho - 1e-12 <= sparsity <= self.upper + 1e-12

    def violation(self, sparsity):
        return max(0.0, self.rho - sparsity, sparsity - self.upper)


@dataclass
class SearchConfig:
    population: int = 16
    generations: int = 40
    mutation_std: float = 0.05
    seed: int = 0
    episodes: int = 5
    mask_coupling: bool = True
    patience: int = 8
    workers: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError('search population must be >= 2.')
        if self.episodes < 1:
            raise ConfigError('search needs at least one evaluation episode.')
        if self.generations < 0:
            raise ConfigError('search generations must be >= 0.')

    @classmethod
    def from_config(cls, config, seed=None):
        return cls(population=config['SEARCH_POPULATION'], generations=config['SEARCH_GENERATIONS'],
                   mutation_std=config['SEARCH_MUTATION_STD'], seed=config['SEED'] if seed is None else seed,
                   episodes=config['VERDICT_EPISODES'], mask_coupling=config['SEARCH_MASK_COUPLING'],
                   patience=config['SEARCH_PATIENCE'], workers=config['SEARCH_WORKERS'])


@dataclass
class CandidateEvaluation:
    c: tuple
    predicted_sparsity: float
    achieved_sparsity: float
    mean_reward: float
    verdict: object
    penalty: float
    monitoring: object = field(default=None, repr=False)

    @property
    def stable(self):
        return bool(self.verdict.stable)


@dataclass
class SearchResult:
    c: np.ndarray
    achieved_sparsity: float
    mean_reward: float
    verdict: object
    evaluations_used: int
    model: object = field(default=None, repr=False)
    frontier: list = field(default_factory=list, repr=False)
    log: list = field(default_factory=list, repr=False)
    best: CandidateEvaluation = field(default=None, repr=False)


def first_order_sparsity(c, manifest):
    c = validate_coefficients(c, manifest)
    return float(sum(ci * g.param_count for ci, g in zip(c, manifest.groups)) / manifest.total_params)


def predict_sparsity(c, manifest):
    """Sparsity implied by ``c``, recounted over the surviving layer shapes."""
    return float(sparsity_from_counts(manifest.total_params, pruned_param_count(manifest, c)))


def stability_penalty(verdicts):
    """Unstable episode count plus the mean rise budget used beyond 1."""
    excess = [max(0.0, v.rise_budget_used - 1.0) for v in verdicts]
    return sum(not v.stable for v in verdicts) + float(np.mean(excess))


def evaluate_candidate(agent, manifest, c, seeds, net, config):
    """Prune a clone, roll out seeded episodes and judge their V traces."""
    c = validate_coefficients(c, manifest)
    pruned = apply_pruning(agent, manifest, c)
    achieved = measure_sparsity(agent, pruned)
    monitoring = monitor(pruned, net, config, seeds)
    return CandidateEvaluation(tuple(c), predict_sparsity(c, manifest), achieved, monitoring.mean_reward,
                               monitoring.aggregate, stability_penalty(monitoring.verdicts), monitoring)


def make_evaluator(agent, manifest, net, config, seeds=None):
    seeds = list(seeds) if seeds is not None else evaluation_seeds(config, config['VERDICT_EPISODES'])
    return lambda c: evaluate_candidate(agent, manifest, c, seeds, net, config)


class EvaluationCache:
    """Memoizes evaluations by coefficient vector; batches may run on a thread pool."""

    def __init__(self, evaluator, workers=1):
        self.evaluator = evaluator
        self.workers = workers
        self.results = {}

    @staticmethod
    def key(c):
        return tuple(np.round(np.asarray(c, dtype=np.float64), 12))

    def __len__(self):
        return len(self.results)

    def evaluate(self, candidates):
        keys = [self.key(c) for c in candidates]
        missing = list(dict.fromkeys(k for k in keys if k not in self.results))
        if self.workers > 1 and len(missing) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                evaluations = list(pool.map(self.evaluator, [np.array(k) for k in missing]))
        else:
            evaluations = [self.evaluator(np.array(k)) for k in missing]
        self.results.update(zip(missing, evaluations))
        return [self.results[k] for k in keys]


def project_to_band(c, manifest, target, free=None, iterations=60):
    """Scale ``c`` by a scalar (bisection) until its predicted sparsity lies in the band."""
    c = validate_coefficients(c, manifest)
    if target.contains(predict_sparsity(c, manifest)):
        return c
    if not np.any(c > 0):
        if target.contains(0.0):
            return c
        c = np.ones_like(c) if free is None else np.asarray(free, dtype=np.float64)
    ceiling = 1.0 / np.min(c[c > 0])
    if predict_sparsity(np.minimum(c * ceiling, 1.0), manifest) < target.rho:
        return np.minimum(c * ceiling, 1.0)
    lo, hi = 0.0, ceiling
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        candidate = np.minimum(c * mid, 1.0)
        predicted = predict_sparsity(candidate, manifest)
        if predicted < target.rho:
            lo = mid
        elif predicted > target.upper:
            hi = mid
        else:
            return candidate
    return np.minimum(c * hi, 1.0)


SEARCH_LOG_FIELDS = ['generation', 'candidate', 'c', 'predicted_sparsity', 'achieved_sparsity',
                     'reward', 'stable', 'rise_budget_used']


def log_evaluations(log, generation, evaluations):
    for i, e in enumerate(evaluations):
        log.append({'generation': generation, 'candidate': i, 'c': ';'.join('%.6f' % v for v in e.c),
                    'predicted_sparsity': e.predicted_sparsity, 'achieved_sparsity': e.achieved_sparsity,
                    'reward': e.mean_reward, 'stable': int(e.stable),
                    'rise_budget_used': e.verdict.rise_budget_used})


def write_search_log(log, path):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=SEARCH_LOG_FIELDS)
        writer.writeheader()
        writer.writerows(log)


class _Strategy:
    """(mu + lambda) evolution strategy with truncation selection."""

    def __init__(self, manifest, search, key, project=None):
        self.manifest = manifest
        self.search = search
        self.key = key
        self.project = project or (lambda c, free: c)
        self.rng = np.random.default_rng(search.seed)
        mask = manifest.coupling_mask() if search.mask_coupling else np.zeros(len(manifest), dtype=bool)
        self.free = (~mask).astype(np.float64)

    def clip(self, c):
        return np.clip(c, 0.0, 1.0) * self.free

    def initial(self, high):
        return [self.project(self.clip(self.rng.uniform(0.0, high, len(self.free))), self.free)
                for _ in range(self.search.population)]

    def offspring(self, parents):
        children = []
        for _ in range(self.search.population):
            parent = parents[int(self.rng.integers(len(parents)))]
            noise = self.rng.normal(0.0, self.search.mutation_std, len(self.free))
            children.append(self.project(self.clip(np.asarray(parent.c) + noise), self.free))
        return children

    def select(self, pool):
        return sorted(pool, key=self.key)[:self.search.population]

    def run(self, cache, log, initial_high, on_generation=None):
        population = cache.evaluate(self.initial(initial_high))
        log_evaluations(log, 0, population)
        parents = self.select(population)
        best, stale = parents[0], 0
        for generation in range(1, self.search.generations + 1):
            children = cache.evaluate(self.offspring(parents))
            log_evaluations(log, generation, children)
            parents = self.select(parents + children)
            if self.key(parents[0]) < self.key(best):
                best, stale = parents[0], 0
            else:
                stale += 1
            logger.info('generation %d: best sparsity %.4f reward %.1f penalty %.3f (%d evaluations)',
                        generation, best.achieved_sparsity, best.mean_reward, best.penalty, len(cache))
            if stale >= self.search.patience:
                logger.info('no improvement for %d generations; stopping.', stale)
                break
        return best


def _result(agent, manifest, evaluation, cache, log):
    c = np.asarray(evaluation.c, dtype=np.float64)
    model = apply_pruning(agent, manifest, c) if agent is not None else None
    frontier = sorted(cache.results.values(), key=lambda e: e.achieved_sparsity)
    return SearchResult(c, evaluation.achieved_sparsity, evaluation.mean_reward, evaluation.verdict,
                        len(cache), model, frontier, log, evaluation)


def search_target(agent, manifest, target, search, evaluator):
    """Best stable candidate whose achieved sparsity lies in ``target``'s band.

    Raises InfeasibleSearchError when no candidate lands in the band and
    VerificationError when every in-band candidate is unstable.
    """
    cache = EvaluationCache(evaluator, search.workers)
    log = []
    if target.rho == 0 and target.epsilon == 0:
        zero = cache.evaluate([np.zeros(len(manifest))])[0]
        log_evaluations(log, 0, [zero])
        if not zero.stable:
            raise VerificationError('the unpruned agent is judged unstable.', best=zero)
        return _result(agent, manifest, zero, cache, log)

    def key(e):
        return (target.violation(e.achieved_sparsity), e.penalty, -e.mean_reward)

    strategy = _Strategy(manifest, search, key, lambda c, free: project_to_band(c, manifest, target, free))
    best = strategy.run(cache, log, initial_high=min(1.0, 2.0 * target.upper))
    feasible = [e for e in cache.results.values() if target.contains(e.achieved_sparsity)]
    if not feasible:
        raise InfeasibleSearchError('no candidate reached the sparsity band [%.4f, %.4f] in %d evaluations; '
                                    'closest was %.4f.' % (target.rho, target.upper, len(cache),
                                                           best.achieved_sparsity), best=best)
    best = min(feasible, key=key)
    if not best.stable:
        raise VerificationError('%d in-band candidates were evaluated and none is stable; the best reached %.4f '
                                'with %d unstable episodes.' % (len(feasible), best.achieved_sparsity,
                                                                  best.verdict.unstable_episodes), best=best)
    return _result(agent, manifest, best, cache, log)


def search_max_sparsity(agent, manifest, search, evaluator):
    """Highest-sparsity candidate whose aggregate verdict is stable."""
    cache = EvaluationCache(evaluator, search.workers)
    log = []
    zero = cache.evaluate([np.zeros(len(manifest))])[0]
    log_evaluations(log, 0, [zero])
    if not zero.stable:
        raise VerificationError('the unpruned agent is judged unstable; check the agent and Lyapunov net.')
    if search.generations == 0:
        return _result(agent, manifest, zero, cache, log)

    def key(e):
        return (e.penalty, -e.achieved_sparsity, -e.mean_reward)

    strategy = _Strategy(manifest, search, key)
    strategy.run(cache, log, initial_high=0.5)
    stable = [e for e in cache.results.values() if e.stable]
    best = max(stable, key=lambda e: (e.achieved_sparsity, e.mean_reward))
    return _result(agent, manifest, best, cache, log)


def stability_boundary(frontier):
    """Smallest explored sparsity judged unstable, or None."""
    unstable = [e.achieved_sparsity for e in frontier if not e.stable]
    return min(unstable) if unstable else None


def stable_fraction_by_decile(frontier):
    """Fraction of stable candidates per sparsity decile of the explored range."""
    return decile_fractions([e.achieved_sparsity for e in frontier], [e.stable for e in frontier])


def decile_fractions(sparsity, stable):
    if len(sparsity) == 0:
        return []
    sparsity = np.asarray(sparsity, dtype=np.float64)
    stable = np.asarray(stable, dtype=float)
    edges = np.linspace(sparsity.min(), sparsity.max(), 11)
    bins = np.clip(np.searchsorted(edges, sparsity, side='right') - 1, 0, 9)
    return [float(stable[bins == b].mean()) for b in range(10) if np.any(bins == b)]


RESULT_FIELDS = ['label', 'sparsity', 'component_coefficients', 'coupling', 'reward', 'stable']


def write_results(rows, manifest, path):
    """Table of (label, SearchResult-like) rows split into component and coupling coefficients."""
    mask = manifest.coupling_mask()
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for label, result in rows:
            c = np.asarray(result.c)
            writer.writerow({'label': label, 'sparsity': '%.4f' % result.achieved_sparsity,
                             'component_coefficients': ';'.join('%.3f' % v for v in c[~mask]),
                             'coupling': ';'.join('%.3f' % v for v in c[mask]),
                             'reward': '%.1f' % result.mean_reward, 'stable': int(result.verdict.stable)})


# component sensitivity

@dataclass
class SweepResult:
    group_ids: list
    points: list
    destabilizing_sparsity: float = None


def sensitivity_sweep(manifest, group_ids, steps, evaluator):
    """Raise the coefficients of ``group_ids`` together until the verdict turns unstable."""
    points = []
    destabilizing = None
    for k in range(1, steps + 1):
        c = np.zeros(len(manifest))
        for gid in group_ids:
            c[gid - 1] = k / steps
        evaluation = evaluator(c)
        points.append(evaluation)
        logger.info('sweep %s at %.2f: sparsity %.4f stable %s', group_ids, k / steps,
                    evaluation.achieved_sparsity, evaluation.stable)
        if not evaluation.stable:
            destabilizing = evaluation.achieved_sparsity
            break
    return SweepResult(list(group_ids), points, destabilizing)


# fine-tuning

@dataclass
class FineTuneResult:
    model: object
    reward_before: float
    reward_after: float
    steps: int
    regressed: bool = False
    aborted: bool = False


def fine_tune(pruned, config, steps, seed=0):
    """TD updates on fresh interaction data; shapes never change."""
    if steps == 0:
        return FineTuneResult(pruned, float('nan'), float('nan'), 0)
    seeds = evaluation_seeds(config, config['VERDICT_EPISODES'])
    before = evaluate(pruned, config, len(seeds), seeds).mean
    model = pruned.clone()
    trainer = TDTrainer(model, config)
    env = Pendulum.from_config(config)
    planner = PlannerConfig.from_config(config)
    buffer = ReplayBuffer(config['TRAIN_REPLAY_CAPACITY'], reward_scale=1.0 / env.action_repeat)
    rng = np.random.default_rng(seed)
    horizon = config['TRAIN_HORIZON']
    done, aborted = 0, False
    last_good = model.clone()
    while done < steps and not aborted:
        episode_seed = int(rng.integers(2 ** 31))
        controller = make_controller(model, planner, episode_seed, noise_std=config['TRAIN_STD_END'])
        buffer.add(run_episode(controller, episode_seed, env))
        last_good = model.clone()
        for _ in range(min(steps - done, env.episode_length)):
            report = trainer.td_update(buffer.sample(config['TRAIN_BATCH_SIZE'], horizon, rng))
            done += 1
            if report.skipped:
                logger.warning('Fine-tuning hit a non-finite loss after %d steps; keeping the last good state.', done)
                model, aborted = last_good, True
                break
    after = evaluate(model, config, len(seeds), seeds).mean
    regressed = after < before - config['FINETUNE_NOISE_FLOOR']
    if regressed:
        logger.warning('Fine-tuning lowered mean reward from %.1f to %.1f.', before, after)
    return FineTuneResult(model, before, after, done, regressed, aborted)
