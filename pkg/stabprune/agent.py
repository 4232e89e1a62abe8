# -*- coding: utf-8 -*-
"""
    TD-MPC style agent: encoder, latent dynamics, reward head, policy and twin
    Q heads, a cross-entropy planner over the learned model, and temporal
    difference training.
"""
import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from stabprune import nn
from stabprune.env import Pendulum, random_controller, run_episode
from stabprune.errors import CheckpointError, ConfigError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

COMPONENTS = ('encoder', 'dynamics', 'reward', 'pi', 'q1', 'q2')
ENCODER_STRIDES = (2, 1, 2)
ENCODER_KERNEL = 3


class AgentModel:

    def __init__(self, components, obs_shape, latent_dim, action_dim, latent_index=None):
        self.components = OrderedDict((name, list(components[name])) for name in COMPONENTS)
        self.obs_shape = tuple(obs_shape)
        self.latent_dim = latent_dim
        self.action_dim = action_dim
        if latent_index is None:
            latent_index = np.arange(latent_dim)
        self.latent_index = np.asarray(latent_index, dtype=np.int64)
        self.check()

    @property
    def obs_mode(self):
        return 'pixels' if len(self.obs_shape) == 3 else 'state'

    def check(self):
        """Raise ShapeError unless the component signatures agree."""
        shape = (1,) + self.obs_shape
        for layer in self.components['encoder']:
            if layer.kind == 'dense' and len(shape) == 4:
                shape = (shape[0], int(np.prod(shape[1:])))
            layer.check_input(shape)
            shape = layer.output_shape(shape)
        if shape[-1] != self.latent_dim:
            raise ShapeError('encoder emits %d features, latent_dim is %d.' % (shape[-1], self.latent_dim))
        if len(self.latent_index) != self.latent_dim:
            raise ShapeError('latent index has %d entries, latent_dim is %d.'
                             % (len(self.latent_index), self.latent_dim))
        expected = {
            'dynamics': (self.latent_dim + self.action_dim, self.latent_dim),
            'reward': (self.latent_dim + self.action_dim, 1),
            'pi': (self.latent_dim, self.action_dim),
            'q1': (self.latent_dim + self.action_dim, 1),
            'q2': (self.latent_dim + self.action_dim, 1),
        }
        for name, (width_in, width_out) in expected.items():
            layers = self.components[name]
            width = width_in
            for layer in layers:
                layer.check_input((1, width))
                width = layer.out_features
            if width != width_out:
                raise ShapeError('%s emits %d features, expected %d.' % (name, width, width_out))

    def named_tensors(self):
        tensors = OrderedDict()
        for name, layers in self.components.items():
            for i, layer in enumerate(layers):
                tensors['%s.%d.weight' % (name, i)] = layer.weight
                tensors['%s.%d.bias' % (name, i)] = layer.bias
        return tensors

    def layers(self):
        for name, layers in self.components.items():
            for i, layer in enumerate(layers):
                yield '%s.%d' % (name, i), layer

    @property
    def param_count(self):
        return sum(t.size for t in self.named_tensors().values())

    def clone(self):
        components = {name: [layer.copy() for layer in layers]
                      for name, layers in self.components.items()}
        return AgentModel(components, self.obs_shape, self.latent_dim, self.action_dim,
                          self.latent_index.copy())

    def run(self, name, x):
        for layer in self.components[name]:
            if layer.kind == 'dense' and len(x.shape) == 4:
                x = nn.reshape(x, (x.shape[0], -1))
            x = layer(x)
        return x

    def encode(self, observation):
        data = observation.data if isinstance(observation, nn.Tensor) else np.asarray(observation, dtype=np.float32)
        if data.shape == self.obs_shape:
            return self.run('encoder', data[None])[0]
        if data.shape[1:] != self.obs_shape:
            raise ShapeError('observation shape %s does not match %s.' % (data.shape, self.obs_shape))
        return self.run('encoder', observation if isinstance(observation, nn.Tensor) else data)

    def latent_step(self, z, action):
        if not isinstance(z, nn.Tensor):
            z = np.asarray(z, dtype=np.float32)
            action = np.asarray(action, dtype=np.float32)
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(action))):
                raise NonFiniteError('non-finite latent or action passed to latent_step.')
        za = nn.concat([z, action], axis=-1)
        return self.run('dynamics', za), self.run('reward', za)

    def pi(self, z):
        return self.run('pi', z)

    def q(self, z, action):
        za = nn.concat([z, action], axis=-1)
        return self.run('q1', za), self.run('q2', za)


def _mlp(width_in, hidden, width_out, rng, out_activation='identity', zero_out=False):
    return [nn.init_dense(width_in, hidden, rng, 'elu'),
            nn.init_dense(hidden, hidden, rng, 'elu'),
            nn.init_dense(hidden, width_out, rng, out_activation, zero=zero_out)]


def obs_shape_for(config):
    if config['ENV_OBS_MODE'] == 'pixels':
        return (config['ENV_FRAME_STACK'], config['ENV_IMAGE_SIZE'], config['ENV_IMAGE_SIZE'])
    return (3,)


def build_agent(config, seed=None):
    """Freshly initialized model for the configured observation mode and sizes."""
    rng = np.random.default_rng(config['AGENT_INIT_SEED'] if seed is None else seed)
    latent, hidden, action_dim = config['AGENT_LATENT_DIM'], config['AGENT_HIDDEN'], config['AGENT_ACTION_DIM']
    width = config['AGENT_ENCODER_WIDTH']
    obs_shape = obs_shape_for(config)
    if len(obs_shape) == 3:
        encoder = []
        channels, size = obs_shape[0], obs_shape[1]
        for stride in ENCODER_STRIDES:
            layer = nn.init_conv(channels, width, ENCODER_KERNEL, rng, 'elu', stride)
            size = layer.spatial_out(size, size)[0]
            channels = width
            encoder.append(layer)
        if size < 1:
            raise ConfigError('image size %d is too small for the encoder.' % obs_shape[1])
        encoder.append(nn.init_dense(width * size * size, latent, rng))
    else:
        encoder = [nn.init_dense(obs_shape[0], width, rng, 'elu'),
                   nn.init_dense(width, width, rng, 'elu'),
                   nn.init_dense(width, width, rng, 'elu'),
                   nn.init_dense(width, latent, rng)]
    components = {
        'encoder': encoder,
        'dynamics': _mlp(latent + action_dim, hidden, latent, rng),
        'reward': _mlp(latent + action_dim, hidden, 1, rng, zero_out=True),
        'pi': _mlp(latent, hidden, action_dim, rng, out_activation='tanh'),
        'q1': _mlp(latent + action_dim, hidden, 1, rng, zero_out=True),
        'q2': _mlp(latent + action_dim, hidden, 1, rng, zero_out=True),
    }
    return AgentModel(components, obs_shape, latent, action_dim)


def save_agent(model, path):
    tensors = OrderedDict((name, t.data) for name, t in model.named_tensors().items())
    tensors['meta.latent_index'] = model.latent_index.astype(np.float32)
    nn.save_checkpoint(tensors, path)


def model_from_tensors(tensors, config):
    """Rebuild a model from component-prefixed tensors (possibly pruned)."""
    grouped = {name: {} for name in COMPONENTS}
    for key, array in tensors.items():
        if key.startswith('meta.'):
            continue
        parts = key.split('.')
        if len(parts) != 3 or parts[0] not in grouped or parts[2] not in ('weight', 'bias'):
            raise CheckpointError('unexpected tensor name %r in agent checkpoint.' % key, entry=key)
        grouped[parts[0]].setdefault(int(parts[1]), {})[parts[2]] = array
    components = {}
    for name in COMPONENTS:
        indices = sorted(grouped[name])
        if not indices or indices != list(range(len(indices))):
            raise CheckpointError('component %r is missing layers.' % name, entry=name)
        layers = []
        conv_count = 0
        for i in indices:
            entry = grouped[name][i]
            if 'weight' not in entry or 'bias' not in entry:
                raise CheckpointError('layer %s.%d is missing weight or bias.' % (name, i), entry='%s.%d' % (name, i))
            last = i == indices[-1]
            if not last:
                activation = 'elu'
            else:
                activation = 'tanh' if name == 'pi' else 'identity'
            if entry['weight'].ndim == 4:
                layers.append(nn.Conv2d(entry['weight'], entry['bias'], 'elu', ENCODER_STRIDES[conv_count]))
                conv_count += 1
            else:
                layers.append(nn.Dense(entry['weight'], entry['bias'], activation))
        components[name] = layers
    latent_dim = components['encoder'][-1].out_features
    latent_index = tensors.get('meta.latent_index')
    if latent_index is not None:
        latent_index = np.rint(latent_index).astype(np.int64)
    action_dim = components['pi'][-1].out_features
    try:
        return AgentModel(components, obs_shape_for(config), latent_dim, action_dim, latent_index)
    except ShapeError as e:
        raise CheckpointError('checkpoint does not describe a valid agent: %s' % e.message)


def load_agent(path, config):
    return model_from_tensors(nn.load_checkpoint(path), config)


# planning

@dataclass
class PlannerConfig:
    horizon: int = 5
    num_samples: int = 64
    num_elites: int = 8
    iterations: int = 4
    policy_fraction: float = 0.05
    temperature: float = 0.5
    min_std: float = 0.05
    max_std: float = 2.0
    discount: float = 0.99

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError('planner horizon must be >= 1.')
        if self.num_samples < 1 or not 1 <= self.num_elites <= self.num_samples:
            raise ConfigError('planner needs 1 <= num_elites <= num_samples.')
        if not 0.0 <= self.policy_fraction <= 1.0:
            raise ConfigError('policy_fraction must lie in [0, 1].')
        if self.iterations < 0:
            raise ConfigError('planner iterations must be >= 0.')

    @classmethod
    def from_config(cls, config):
        return cls(horizon=config['PLANNER_HORIZON'], num_samples=config['PLANNER_NUM_SAMPLES'],
                   num_elites=config['PLANNER_NUM_ELITES'], iterations=config['PLANNER_ITERATIONS'],
                   policy_fraction=config['PLANNER_POLICY_FRACTION'], temperature=config['PLANNER_TEMPERATURE'],
                   min_std=config['PLANNER_MIN_STD'], max_std=config['PLANNER_MAX_STD'],
                   discount=config['AGENT_DISCOUNT'])


def estimate_value(model, z, actions, discount):
    """Discounted model return of each action sequence plus a twin-Q terminal value."""
    horizon, samples = actions.shape[:2]
    zs = np.broadcast_to(z, (samples, z.shape[-1]))
    value = np.zeros(samples, dtype=np.float64)
    weight = 1.0
    with np.errstate(all='ignore'):
        for t in range(horizon):
            za = np.concatenate([zs, actions[t]], axis=-1)
            value += weight * model.run('reward', za)[:, 0]
            zs = model.run('dynamics', za)
            weight *= discount
        q1, q2 = model.q(zs, model.pi(zs))
        value += weight * np.minimum(q1, q2)[:, 0]
    return value


def plan(model, z, planner, seed):
    """Return the first action of the refined elite mean, clipped to [-1, 1]."""
    rng = np.random.default_rng(seed)
    z = np.asarray(z, dtype=np.float32)
    horizon, samples, action_dim = planner.horizon, planner.num_samples, model.action_dim
    num_pi = min(samples, int(round(planner.policy_fraction * samples)))
    pi_actions = np.zeros((horizon, num_pi, action_dim), dtype=np.float32)
    if num_pi:
        zs = np.repeat(z[None], num_pi, axis=0)
        with np.errstate(all='ignore'):
            for t in range(horizon):
                pi_actions[t] = model.pi(zs)
                zs = model.run('dynamics', np.concatenate([zs, pi_actions[t]], axis=-1))
        mean = pi_actions.mean(axis=1)
    else:
        mean = np.zeros((horizon, action_dim), dtype=np.float32)
    std = np.full((horizon, action_dim), planner.max_std, dtype=np.float32)
    for _ in range(planner.iterations):
        noise = rng.standard_normal((horizon, samples - num_pi, action_dim)).astype(np.float32)
        sampled = np.clip(mean[:, None] + std[:, None] * noise, -1.0, 1.0)
        actions = np.concatenate([pi_actions, sampled], axis=1)
        values = estimate_value(model, z, actions, planner.discount)
        finite = np.isfinite(values)
        if not finite.any():
            logger.warning('All %d planned trajectories are non-finite; falling back to the policy.', samples)
            return np.clip(model.pi(z[None])[0], -1.0, 1.0)
        values = np.where(finite, values, -np.inf)
        elites = np.argsort(-values, kind='stable')[:planner.num_elites]
        elite_values = values[elites]
        score = np.exp(planner.temperature * (elite_values - elite_values.max()))
        score = (score / score.sum()).astype(np.float32)
        elite_actions = actions[:, elites]
        mean = np.sum(score[None, :, None] * elite_actions, axis=1)
        spread = np.sum(score[None, :, None] * (elite_actions - mean[:, None]) ** 2, axis=1)
        std = np.clip(np.sqrt(spread), planner.min_std, planner.max_std)
    return np.clip(mean[0], -1.0, 1.0)


def make_controller(model, planner, seed, use_planner=True, noise_std=0.0):
    """Observation -> action callable; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)

    def controller(observation):
        z = model.encode(observation)
        if use_planner:
            action = plan(model, z, planner, seed=int(rng.integers(2 ** 32)))
        else:
            action = model.pi(z[None])[0]
        if noise_std > 0:
            action = np.clip(action + noise_std * rng.standard_normal(action.shape), -1.0, 1.0)
        return action
    return controller


@dataclass
class EvalStats:
    mean: float
    min: float
    max: float
    rewards: list
    aborted: int = 0
    episodes: list = field(default_factory=list, repr=False)


def evaluation_seeds(config, num_episodes):
    return [config['SEED'] * 1000 + 7919 + i for i in range(num_episodes)]


def evaluate(model, config, num_episodes, seeds=None, use_planner=True):
    """Reward statistics over seeded planned rollouts; aborted episodes count as 0."""
    if num_episodes < 1:
        raise ConfigError('evaluate needs at least one episode, got %d.' % num_episodes)
    seeds = list(seeds) if seeds is not None else evaluation_seeds(config, num_episodes)
    if len(seeds) != num_episodes:
        raise ConfigError('got %d seeds for %d episodes.' % (len(seeds), num_episodes))
    env = Pendulum.from_config(config)
    planner = PlannerConfig.from_config(config)
    episodes = [run_episode(make_controller(model, planner, seed, use_planner), seed, env) for seed in seeds]
    rewards = [episode.total_reward for episode in episodes]
    aborted = sum(episode.aborted for episode in episodes)
    if aborted:
        logger.warning('%d of %d evaluation episodes aborted.', aborted, num_episodes)
    return EvalStats(float(np.mean(rewards)), float(np.min(rewards)), float(np.max(rewards)),
                     rewards, aborted, episodes)


def random_policy_baseline(config, episodes, seed):
    env = Pendulum.from_config(config)
    rewards = [run_episode(random_controller(seed + i, config['AGENT_ACTION_DIM']), seed + i, env).total_reward
               for i in range(episodes)]
    return float(np.mean(rewards))


# training

class ReplayBuffer:
    """Episodes sampled as horizon-length snippets; rewards stored per sub-step."""

    def __init__(self, capacity, reward_scale=1.0):
        self.capacity = capacity
        self.reward_scale = reward_scale
        self.episodes = []
        self.size = 0

    def add(self, episode):
        if episode.length == 0:
            return
        self.episodes.append((episode.observation_array(),
                              np.stack(episode.actions).astype(np.float32),
                              np.asarray(episode.rewards, dtype=np.float32) * self.reward_scale))
        self.size += episode.length
        while self.size > self.capacity and len(self.episodes) > 1:
            self.size -= len(self.episodes.pop(0)[1])

    def sample(self, batch_size, horizon, rng):
        candidates = [i for i, (_, actions, _) in enumerate(self.episodes) if len(actions) >= horizon]
        if not candidates:
            raise ValueError('no stored episode is %d steps long.' % horizon)
        picks = rng.choice(candidates, size=batch_size)
        obs, actions, rewards = [], [], []
        for i in picks:
            o, a, r = self.episodes[i]
            start = int(rng.integers(0, len(a) - horizon + 1))
            obs.append(o[start:start + horizon + 1])
            actions.append(a[start:start + horizon])
            rewards.append(r[start:start + horizon])
        return Batch(np.stack(obs, axis=1), np.stack(actions, axis=1), np.stack(rewards, axis=1))


@dataclass
class Batch:
    observations: np.ndarray  # [H+1, B, *obs]
    actions: np.ndarray       # [H, B, A]
    rewards: np.ndarray       # [H, B]

    @property
    def horizon(self):
        return self.actions.shape[0]


@dataclass
class LossReport:
    consistency_loss: float = 0.0
    reward_loss: float = 0.0
    q_loss: float = 0.0
    pi_loss: float = 0.0
    skipped: bool = False


def _mse(pred, target):
    return nn.mean(nn.sum(nn.square(nn.sub(pred, target)), axis=-1))


class TDTrainer:

    def __init__(self, model, config):
        self.model = model
        self.target = model.clone()
        self.discount = config['AGENT_DISCOUNT']
        self.tau = config['TRAIN_TAU']
        self.rho = config['TRAIN_RHO']
        self.coefs = (config['TRAIN_CONSISTENCY_COEF'], config['TRAIN_REWARD_COEF'], config['TRAIN_VALUE_COEF'])
        params = model.named_tensors()
        self.model_params = OrderedDict((n, p) for n, p in params.items() if not n.startswith('pi.'))
        self.pi_params = OrderedDict((n, p) for n, p in params.items() if n.startswith('pi.'))
        self.optimizer = nn.Adam(self.model_params, config['TRAIN_LR'], clip_norm=config['TRAIN_GRAD_CLIP_NORM'])
        self.pi_optimizer = nn.Adam(self.pi_params, config['TRAIN_PI_LR'], clip_norm=config['TRAIN_GRAD_CLIP_NORM'])

    def update_targets(self):
        target = self.target.named_tensors()
        for name, param in self.model_params.items():
            if name.split('.', 1)[0] in ('encoder', 'q1', 'q2'):
                target[name].data = (1.0 - self.tau) * target[name].data + self.tau * param.data

    def td_update(self, batch):
        """One model step and one policy step on a batch of snippets."""
        model, target = self.model, self.target
        horizon = batch.horizon
        c_coef, r_coef, v_coef = self.coefs
        latents = []
        with nn.Tape() as tape:
            z = model.encode(nn.Tensor(batch.observations[0]))
            consistency = reward_loss = value_loss = nn.Tensor(0.0)
            for t in range(horizon):
                action = batch.actions[t]
                latents.append(z.data)
                q1, q2 = model.q(z, action)
                z, reward = model.latent_step(z, action)
                next_z = target.encode(batch.observations[t + 1])
                next_q1, next_q2 = target.q(next_z, model.pi(next_z))
                td_target = batch.rewards[t][:, None] + self.discount * np.minimum(next_q1, next_q2)
                weight = self.rho ** t
                consistency = consistency + weight * _mse(z, next_z)
                reward_loss = reward_loss + weight * _mse(reward, batch.rewards[t][:, None])
                value_loss = value_loss + weight * (_mse(q1, td_target) + _mse(q2, td_target))
            total = (c_coef * consistency + r_coef * reward_loss + v_coef * value_loss) * (1.0 / horizon)
        report = LossReport(consistency.item(), reward_loss.item(), value_loss.item())
        if not math.isfinite(total.item()):
            logger.warning('Skipped TD update: non-finite loss (consistency=%s, reward=%s, q=%s).',
                           report.consistency_loss, report.reward_loss, report.q_loss)
            report.skipped = True
            return report
        try:
            self.optimizer.step(tape.gradient(total, self.model_params))
        except NonFiniteError as e:
            logger.warning('Skipped TD update: %s', e.message)
            report.skipped = True
            return report

        with nn.Tape() as tape:
            pi_loss = nn.Tensor(0.0)
            for t, z in enumerate(latents):
                z = nn.Tensor(z)
                q1, q2 = model.q(z, model.pi(z))
                pi_loss = pi_loss - (self.rho ** t) * nn.mean(nn.minimum(q1, q2))
            pi_loss = pi_loss * (1.0 / horizon)
        report.pi_loss = pi_loss.item()
        if math.isfinite(report.pi_loss):
            try:
                self.pi_optimizer.step(tape.gradient(pi_loss, self.pi_params))
            except NonFiniteError as e:
                logger.warning('Skipped policy update: %s', e.message)
        else:
            logger.warning('Skipped policy update: non-finite loss.')
        self.update_targets()
        return report


TRAINING_LOG_FIELDS = ['step', 'consistency_loss', 'reward_loss', 'q_loss', 'pi_loss', 'eval_reward']


class TrainingLog:

    def __init__(self):
        self.rows = []

    def append(self, step, report, eval_reward=None):
        row = dict(step=step, **{k: v for k, v in asdict(report).items() if k != 'skipped'})
        row['eval_reward'] = '' if eval_reward is None else eval_reward
        self.rows.append(row)

    def to_csv(self, path):
        with open(path, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=TRAINING_LOG_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)


def exploration_std(config, step):
    span = max(1, config['TRAIN_ENV_STEPS'] - config['TRAIN_SEED_STEPS'])
    progress = min(1.0, max(0.0, (step - config['TRAIN_SEED_STEPS']) / span))
    return config['TRAIN_STD_START'] + (config['TRAIN_STD_END'] - config['TRAIN_STD_START']) * progress


def train_agent(config, seed=None):
    """Train from scratch; returns (model, TrainingLog)."""
    seed = config['SEED'] if seed is None else seed
    rng = np.random.default_rng(seed)
    env = Pendulum.from_config(config)
    model = build_agent(config, seed=config['AGENT_INIT_SEED'] + seed)
    trainer = TDTrainer(model, config)
    planner = PlannerConfig.from_config(config)
    buffer = ReplayBuffer(config['TRAIN_REPLAY_CAPACITY'], reward_scale=1.0 / env.action_repeat)
    log = TrainingLog()
    horizon = config['TRAIN_HORIZON']
    step = 0
    next_eval = config['TRAIN_EVAL_EVERY']
    pretrained = False
    report = LossReport()
    while step < config['TRAIN_ENV_STEPS']:
        episode_seed = int(rng.integers(2 ** 31))
        if step < config['TRAIN_SEED_STEPS']:
            controller = random_controller(episode_seed, model.action_dim)
        else:
            controller = make_controller(model, planner, episode_seed,
                                         noise_std=exploration_std(config, step))
        episode = run_episode(controller, episode_seed, env)
        buffer.add(episode)
        step += episode.length
        if step < config['TRAIN_SEED_STEPS']:
            continue
        updates = episode.length if pretrained else step
        pretrained = True
        for _ in range(updates):
            report = trainer.td_update(buffer.sample(config['TRAIN_BATCH_SIZE'], horizon, rng))
        eval_reward = None
        if step >= next_eval:
            next_eval += config['TRAIN_EVAL_EVERY']
            eval_reward = evaluate(model, config, config['TRAIN_EVAL_EPISODES']).mean
            logger.info('step %d: consistency %.4f reward %.4f q %.4f pi %.4f eval %.1f', step,
                        report.consistency_loss, report.reward_loss, report.q_loss, report.pi_loss, eval_reward)
        log.append(step, report, eval_reward)
    return model, log
