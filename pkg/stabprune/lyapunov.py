# -*- coding: utf-8 -*-
"""
    Neural Lyapunov function over latent states and the stability verdicts
    derived from per-episode V traces.

    V(z) = ||f(z - z_eq) - f(0)||^2 / scale, so V >= 0 everywhere and
    V(z_eq) = 0 hold for any weights.
"""
import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from stabprune import nn
from stabprune.agent import PlannerConfig, evaluation_seeds, make_controller
from stabprune.env import UPRIGHT, Pendulum, run_episode, state_observation, upright_distance
from stabprune.errors import CheckpointError, LyapunovTrainingError, ShapeError, VerificationError

logger = logging.getLogger(__name__)


class LyapunovNet:

    def __init__(self, layers, z_eq, scale=1.0, latent_index=None):
        self.layers = list(layers)
        self.z_eq = np.asarray(z_eq, dtype=np.float32)
        self.scale = float(scale)
        if latent_index is None:
            latent_index = np.arange(len(self.z_eq))
        self.latent_index = np.asarray(latent_index, dtype=np.int64)
        if self.layers[0].in_features != len(self.z_eq) or len(self.latent_index) != len(self.z_eq):
            raise ShapeError('Lyapunov input width %d does not match z_eq of length %d.'
                             % (self.layers[0].in_features, len(self.z_eq)))

    @property
    def latent_dim(self):
        return len(self.z_eq)

    def named_tensors(self):
        tensors = OrderedDict()
        for i, layer in enumerate(self.layers):
            tensors['lyapunov.%d.weight' % i] = layer.weight
            tensors['lyapunov.%d.bias' % i] = layer.bias
        return tensors

    def features(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def _check(self, z):
        if z.shape[-1] != self.latent_dim:
            raise ShapeError('latent dimension %d does not match the Lyapunov input %d; '
                             'truncate the net to the agent\'s latent index first.'
                             % (z.shape[-1], self.latent_dim))

    def __call__(self, z):
        """V for a batch (or single vector) of latents, as float64."""
        z = np.asarray(z, dtype=np.float32)
        self._check(z)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        deviation = z - self.z_eq
        origin = self.features(np.zeros((1, self.latent_dim), dtype=np.float32))
        diff = (self.features(deviation) - origin).astype(np.float64)
        values = np.sum(diff * diff, axis=-1) / self.scale
        # exact zero at the equilibrium
        values[np.all(deviation == 0, axis=-1)] = 0.0
        return values[0] if single else values

    def value_tensor(self, z):
        deviation = nn.Tensor(np.asarray(z, dtype=np.float32) - self.z_eq)
        origin = self.features(nn.Tensor(np.zeros((1, self.latent_dim), dtype=np.float32)))
        return nn.sum(nn.square(nn.sub(self.features(deviation), origin)), axis=-1)


def build_lyapunov(latent_dim, hidden, feature_dim, z_eq, rng):
    layers = [nn.init_dense(latent_dim, hidden, rng, 'tanh'),
              nn.init_dense(hidden, hidden, rng, 'tanh'),
              nn.init_dense(hidden, feature_dim, rng)]
    return LyapunovNet(layers, z_eq)


def encode_sequence(model, observations):
    """Encode observations one at a time so equal observations give equal latents."""
    return np.stack([model.encode(obs) for obs in observations])


def upright_observation(env):
    observer = env.observer()
    return observer.reset(UPRIGHT) if env.obs_mode == 'pixels' else state_observation(UPRIGHT)


def equilibrium_latent(model, config):
    """Mean encoding over rendered upright, zero-velocity observations."""
    env = Pendulum.from_config(config)
    observation = upright_observation(env)
    latents = encode_sequence(model, [observation] * config['LYAP_EQ_SAMPLES'])
    return np.mean(latents.astype(np.float64), axis=0).astype(np.float32)


@dataclass
class Trajectory:
    latents: np.ndarray
    states: np.ndarray


def collect_trajectories(model, config, episodes, seed):
    env = Pendulum.from_config(config)
    planner = PlannerConfig.from_config(config)
    trajectories = []
    for i in range(episodes):
        episode = run_episode(make_controller(model, planner, seed + i), seed + i, env)
        trajectories.append(Trajectory(encode_sequence(model, episode.observations), episode.state_array()))
    return trajectories


@dataclass
class LyapunovData:
    states: np.ndarray
    distances: np.ndarray
    before: np.ndarray
    after: np.ndarray


def _training_data(trajectories):
    states, distances, before, after = [], [], [], []
    for trajectory in trajectories:
        d = upright_distance(trajectory.states[:, 0], trajectory.states[:, 1])
        states.append(trajectory.latents)
        distances.append(d)
        toward = np.nonzero(d[1:] < d[:-1])[0]
        before.append(trajectory.latents[toward])
        after.append(trajectory.latents[toward + 1])
    return LyapunovData(np.concatenate(states), np.concatenate(distances),
                        np.concatenate(before), np.concatenate(after))


def _split(n, holdout, rng):
    order = rng.permutation(n)
    cut = int(round(n * (1.0 - holdout)))
    return order[:cut], order[cut:]


def held_out_fractions(net, before, after, states, margin):
    """Fractions of transitions where V decreases and of states above ``margin``.

    ``margin`` is in training units, so the result does not depend on ``net.scale``.
    """
    decrease = float(np.mean(net(after) < net(before))) if len(before) else 1.0
    positive = float(np.mean(net(states) * net.scale > margin)) if len(states) else 1.0
    return decrease, positive


def train_lyapunov(trajectories, config, z_eq, seed=0):
    """Fit V to trajectories of the trained agent; raises when held-out checks fail."""
    rng = np.random.default_rng(seed)
    data = _training_data(trajectories)
    if len(data.before) == 0:
        raise LyapunovTrainingError('no toward-equilibrium transitions in the trajectories.', 0.0, 0.0)
    net = build_lyapunov(len(z_eq), config['LYAP_HIDDEN'], config['LYAP_FEATURE_DIM'], z_eq, rng)
    margin_p, margin_d = config['LYAP_MARGIN_POSITIVE'], config['LYAP_MARGIN_DECREASE']
    eq_distance = config['LYAP_EQ_DISTANCE']

    state_train, state_hold = _split(len(data.states), config['LYAP_HOLDOUT'], rng)
    trans_train, trans_hold = _split(len(data.before), config['LYAP_HOLDOUT'], rng)
    non_eq = state_train[data.distances[state_train] > eq_distance]
    near_eq = state_train[data.distances[state_train] <= eq_distance]

    params = net.named_tensors()
    optimizer = nn.Adam(params, config['LYAP_LR'])
    batch = config['LYAP_BATCH_SIZE']
    steps = max(1, math.ceil(len(trans_train) / batch))
    diverged = False
    for epoch in range(config['LYAP_EPOCHS']):
        for _ in range(steps):
            pick = rng.choice(trans_train, size=min(batch, len(trans_train)), replace=False)
            with nn.Tape() as tape:
                rise = nn.sub(net.value_tensor(data.after[pick]), net.value_tensor(data.before[pick]))
                loss = nn.mean(nn.relu(nn.add(rise, margin_d)))
                if len(non_eq):
                    sample = rng.choice(non_eq, size=min(batch, len(non_eq)), replace=False)
                    loss = loss + nn.mean(nn.relu(nn.sub(margin_p, net.value_tensor(data.states[sample]))))
                if len(near_eq):
                    sample = rng.choice(near_eq, size=min(batch, len(near_eq)), replace=False)
                    loss = loss + config['LYAP_SETTLE_WEIGHT'] * nn.mean(net.value_tensor(data.states[sample]))
            if not math.isfinite(loss.item()):
                diverged = True
                break
            optimizer.step(tape.gradient(loss, params))
        if diverged:
            logger.warning('Lyapunov epoch %d: non-finite loss, stopping early.', epoch)
            break
        if epoch % 50 == 0:
            logger.info('Lyapunov epoch %d: loss %.5f', epoch, loss.item())

    scale = float(np.percentile(net(data.states[state_train]), 95))
    net.scale = scale if scale > 0 else 1.0
    hold_non_eq = state_hold[data.distances[state_hold] > eq_distance]
    decrease, positive = held_out_fractions(net, data.before[trans_hold], data.after[trans_hold],
                                            data.states[hold_non_eq], margin_p)
    required = config['LYAP_REQUIRED_FRACTION']
    if decrease < required or positive < required:
        raise LyapunovTrainingError(
            'held-out checks failed: %.1f%% of toward-equilibrium transitions decrease V, '
            '%.1f%% of non-equilibrium states exceed the margin (need %.0f%%).'
            % (100 * decrease, 100 * positive, 100 * required), float(decrease), float(positive))
    logger.info('Lyapunov net trained: %.1f%% decrease, %.1f%% positive on held-out data.',
                100 * decrease, 100 * positive)
    return net


def truncate(net, latent_index):
    """Restrict the net to the surviving latent dimensions, keeping index order."""
    latent_index = np.asarray(latent_index, dtype=np.int64)
    positions = np.searchsorted(net.latent_index, latent_index)
    valid = (positions < len(net.latent_index))
    if not np.all(valid) or np.any(net.latent_index[positions[valid]] != latent_index):
        raise ShapeError('latent index %s is not a subset of the net\'s inputs.' % latent_index.tolist())
    first = net.layers[0].copy(weight=net.layers[0].weight.data[:, positions])
    return LyapunovNet([first] + [layer.copy() for layer in net.layers[1:]],
                       net.z_eq[positions], net.scale, latent_index)


def for_agent(net, model, config):
    """Net aligned to ``model``'s latent index and re-centred on its equilibrium latent."""
    aligned = truncate(net, model.latent_index)
    aligned.z_eq = equilibrium_latent(model, config)
    return aligned


def save_lyapunov(net, path):
    tensors = OrderedDict((name, t.data) for name, t in net.named_tensors().items())
    tensors['meta.z_eq'] = net.z_eq
    tensors['meta.scale'] = np.array([net.scale], dtype=np.float32)
    tensors['meta.latent_index'] = net.latent_index.astype(np.float32)
    nn.save_checkpoint(tensors, path)


def load_lyapunov(path):
    tensors = nn.load_checkpoint(path)
    try:
        count = len([k for k in tensors if k.startswith('lyapunov.') and k.endswith('.weight')])
        layers = []
        for i in range(count):
            activation = 'identity' if i == count - 1 else 'tanh'
            layers.append(nn.Dense(tensors['lyapunov.%d.weight' % i], tensors['lyapunov.%d.bias' % i], activation))
        return LyapunovNet(layers, tensors['meta.z_eq'], float(tensors['meta.scale'][0]),
                           np.rint(tensors['meta.latent_index']).astype(np.int64))
    except (KeyError, IndexError) as e:
        raise CheckpointError('not a Lyapunov checkpoint: missing %s.' % e)


# traces and verdicts

@dataclass
class LyapunovTrace:
    episode: int
    values: np.ndarray

    @property
    def deltas(self):
        return np.diff(self.values)


def evaluate_trace(net, latents, episode=0):
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 2:
        raise ShapeError('expected a [T, latent] array of latents, got shape %s.' % (latents.shape,))
    values = net(latents)
    if not np.all(np.isfinite(values)):
        raise ShapeError('non-finite V values in episode %s.' % episode)
    return LyapunovTrace(episode, values)


@dataclass
class VerdictThresholds:
    rise_budget: float = 0.05
    convergence: float = 0.02
    settle_steps: int = 62

    @classmethod
    def from_config(cls, config):
        return cls(config['VERDICT_RISE_BUDGET'], config['VERDICT_CONVERGENCE'],
                   int(config['VERDICT_SETTLE_FRACTION'] * config['ENV_EPISODE_LENGTH']))


@dataclass
class StabilityVerdict:
    stable: bool
    settling_step: int = None
    rise_budget_used: float = 0.0
    terminal_residual: float = 0.0
    unstable_episodes: int = 0


def verdict(trace, thresholds):
    """Judge one V trace. The trace must cover at least ``settle_steps + 1`` steps."""
    values = np.asarray(trace.values if isinstance(trace, LyapunovTrace) else trace, dtype=np.float64)
    if values.size < thresholds.settle_steps + 1:
        raise ShapeError('verdict needs at least %d trace points, got %d.' % (thresholds.settle_steps + 1, values.size))
    v0 = values[0]
    rise = float(np.sum(np.maximum(0.0, np.diff(values))))
    allowed = thresholds.rise_budget * v0
    if allowed > 0:
        budget_used = rise / allowed
    else:
        budget_used = 0.0 if rise == 0 else math.inf
    inside = values <= thresholds.convergence * v0
    settled_after = np.flip(np.logical_and.accumulate(np.flip(inside)))
    settling_step = int(np.argmax(settled_after)) if settled_after.any() else None
    stable = rise <= allowed and settling_step is not None and settling_step <= thresholds.settle_steps
    return StabilityVerdict(bool(stable), settling_step, budget_used, float(values[-1]), 0 if stable else 1)


def aggregate_verdict(verdicts):
    if not verdicts:
        raise VerificationError('aggregate_verdict needs at least one verdict.')
    steps = [v.settling_step for v in verdicts]
    return StabilityVerdict(
        stable=all(v.stable for v in verdicts),
        settling_step=None if any(s is None for s in steps) else max(steps),
        rise_budget_used=max(v.rise_budget_used for v in verdicts),
        terminal_residual=max(v.terminal_residual for v in verdicts),
        unstable_episodes=sum(not v.stable for v in verdicts))


@dataclass
class Monitoring:
    traces: list
    verdicts: list
    aggregate: StabilityVerdict
    rewards: list
    aborted: int

    @property
    def mean_reward(self):
        return float(np.mean(self.rewards))


def monitor(model, net, config, seeds=None):
    """Roll the agent out on seeded episodes and judge each V trace."""
    seeds = list(seeds) if seeds is not None else evaluation_seeds(config, config['VERDICT_EPISODES'])
    env = Pendulum.from_config(config)
    planner = PlannerConfig.from_config(config)
    thresholds = VerdictThresholds.from_config(config)
    aligned = for_agent(net, model, config)
    traces, verdicts, rewards, aborted = [], [], [], 0
    for i, seed in enumerate(seeds):
        episode = run_episode(make_controller(model, planner, seed), seed, env)
        rewards.append(episode.total_reward)
        if episode.aborted:
            aborted += 1
            verdicts.append(StabilityVerdict(False, None, math.inf, math.inf, 1))
            traces.append(LyapunovTrace(i, np.full(len(episode.observations), np.nan)))
            continue
        try:
            trace = evaluate_trace(aligned, encode_sequence(model, episode.observations), episode=i)
        except ShapeError as e:
            if 'non-finite' not in e.message:
                raise
            logger.warning('Episode %d produced non-finite V values; marked unstable.', i)
            verdicts.append(StabilityVerdict(False, None, math.inf, math.inf, 1))
            traces.append(LyapunovTrace(i, np.full(len(episode.observations), np.nan)))
            continue
        traces.append(trace)
        verdicts.append(verdict(trace, thresholds))
    return Monitoring(traces, verdicts, aggregate_verdict(verdicts), rewards, aborted)


TRACE_FIELDS = ['config_label', 'episode', 't', 'V']
VERDICT_FIELDS = ['config_label', 'stable', 'settling_step', 'rise_budget_used', 'terminal_residual']


def write_traces(rows_by_label, path, append=False):
    """``rows_by_label``: iterable of (label, traces)."""
    with open(path, 'a' if append else 'w', newline='') as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(TRACE_FIELDS)
        for label, traces in rows_by_label:
            for trace in traces:
                for t, value in enumerate(trace.values):
                    writer.writerow([label, trace.episode, t, repr(float(value))])


def write_verdicts(rows, path, append=False):
    """``rows``: iterable of (label, StabilityVerdict)."""
    with open(path, 'a' if append else 'w', newline='') as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(VERDICT_FIELDS)
        for label, v in rows:
            writer.writerow([label, int(v.stable), '' if v.settling_step is None else v.settling_step,
                             repr(float(v.rise_budget_used)), repr(float(v.terminal_residual))])
