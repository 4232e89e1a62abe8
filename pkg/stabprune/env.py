# -*- coding: utf-8 -*-
"""
    Torque-limited inverted pendulum.

    theta = 0 is upright. One decision step applies the action for
    ``action_repeat`` simulator sub-steps and sums the sub-step rewards.
"""
import csv
import logging
import math
from collections import deque, namedtuple
from dataclasses import dataclass, field

import numpy as np

from stabprune.errors import NonFiniteError

logger = logging.getLogger(__name__)

PendulumState = namedtuple('PendulumState', ['theta', 'theta_dot'])

UPRIGHT = PendulumState(0.0, 0.0)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


def upright_distance(theta, theta_dot):
    return np.square(theta) + 0.1 * np.square(theta_dot)


class Pendulum:

    def __init__(self, dt=0.01, gravity=9.81, length=1.0, mass=1.0, max_torque=2.0,
                 damping=0.01, max_speed=8.0, action_repeat=8, episode_length=125,
                 obs_mode='state', frame_stack=3, image_size=28, rod_pixels=12.0,
                 init_theta_dot=1.0):
        if obs_mode not in ('state', 'pixels'):
            raise ValueError('unknown observation mode %r.' % obs_mode)
        self.dt = dt
        self.gravity = gravity
        self.length = length
        self.mass = mass
        self.max_torque = max_torque
        self.damping = damping
        self.max_speed = max_speed
        self.action_repeat = action_repeat
        self.episode_length = episode_length
        self.obs_mode = obs_mode
        self.frame_stack = frame_stack
        self.image_size = image_size
        self.rod_pixels = rod_pixels
        self.init_theta_dot = init_theta_dot

    @classmethod
    def from_config(cls, config):
        return cls(dt=config['ENV_DT'], gravity=config['ENV_GRAVITY'], length=config['ENV_LENGTH'],
                   mass=config['ENV_MASS'], max_torque=config['ENV_MAX_TORQUE'],
                   damping=config['ENV_DAMPING'], max_speed=config['ENV_MAX_SPEED'],
                   action_repeat=config['ENV_ACTION_REPEAT'], episode_length=config['ENV_EPISODE_LENGTH'],
                   obs_mode=config['ENV_OBS_MODE'], frame_stack=config['ENV_FRAME_STACK'],
                   image_size=config['ENV_IMAGE_SIZE'], rod_pixels=config['ENV_ROD_PIXELS'],
                   init_theta_dot=config['ENV_INIT_THETA_DOT'])

    @property
    def observation_shape(self):
        if self.obs_mode == 'pixels':
            return (self.frame_stack, self.image_size, self.image_size)
        return (3,)

    @property
    def max_episode_reward(self):
        return float(self.episode_length * self.action_repeat)

    def step(self, state, action):
        """One simulator sub-step; returns (next_state, reward)."""
        action = float(action)
        if not math.isfinite(action):
            raise NonFiniteError('non-finite action %r.' % action)
        action = min(max(action, -1.0), 1.0)
        theta, theta_dot = state
        g, l, m = self.gravity, self.length, self.mass
        theta_ddot = 3.0 * g / (2.0 * l) * math.sin(theta) + \
            3.0 / (m * l * l) * (self.max_torque * action - self.damping * theta_dot)
        theta_dot = min(max(theta_dot + theta_ddot * self.dt, -self.max_speed), self.max_speed)
        theta = wrap_angle(theta + theta_dot * self.dt)
        if not (math.isfinite(theta) and math.isfinite(theta_dot)):
            raise NonFiniteError('pendulum state diverged (theta=%r, theta_dot=%r).' % (theta, theta_dot))
        return PendulumState(theta, theta_dot), 0.5 * (1.0 + math.cos(theta))

    def energy(self, state):
        theta, theta_dot = state
        return self.mass * self.length ** 2 * theta_dot ** 2 / 6.0 + \
            self.mass * self.gravity * self.length / 2.0 * math.cos(theta)

    def decision_step(self, state, action):
        total = 0.0
        for _ in range(self.action_repeat):
            state, reward = self.step(state, action)
            total += reward
        return state, total

    def initial_state(self, rng):
        return PendulumState(float(rng.uniform(-math.pi, math.pi)),
                             float(rng.uniform(-self.init_theta_dot, self.init_theta_dot)))

    def render(self, state):
        return render_pixels(state, self.image_size, self.rod_pixels)

    def observer(self):
        return Observer(self)


def state_observation(state):
    return np.array([math.cos(state[0]), math.sin(state[0]), state[1]], dtype=np.float32)


def render_pixels(state, size=28, rod_pixels=12.0):
    """Anti-aliased grayscale rod hanging from the image centre; values in [0, 1]."""
    theta = state[0]
    centre = size / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5 - centre
    py = ys + 0.5 - centre
    ux, uy = math.sin(theta), -math.cos(theta)
    t = np.clip(px * ux + py * uy, 0.0, rod_pixels)
    distance = np.hypot(px - t * ux, py - t * uy)
    return np.clip(1.0 - distance, 0.0, 1.0).astype(np.float32)


class Observer:
    """Builds observations, keeping the frame stack in pixel mode."""

    def __init__(self, env):
        self.env = env
        self.frames = deque(maxlen=env.frame_stack)

    def reset(self, state):
        if self.env.obs_mode == 'state':
            return state_observation(state)
        frame = self.env.render(state)
        self.frames.clear()
        for _ in range(self.env.frame_stack):
            self.frames.append(frame)
        return np.stack(self.frames)

    def observe(self, state):
        if self.env.obs_mode == 'state':
            return state_observation(state)
        self.frames.append(self.env.render(state))
        return np.stack(self.frames)


@dataclass
class Episode:
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    states: list = field(default_factory=list)
    seed: int = None
    aborted: bool = False

    @property
    def length(self):
        return len(self.actions)

    @property
    def total_reward(self):
        return 0.0 if self.aborted else float(np.sum(self.rewards))

    def observation_array(self):
        return np.stack(self.observations).astype(np.float32)

    def state_array(self):
        return np.asarray(self.states, dtype=np.float64)


def run_episode(controller, seed, env, action_repeat=None, initial_state=None, episode_length=None):
    """Roll ``controller`` (observation -> action) out for one episode."""
    if action_repeat is not None and action_repeat != env.action_repeat:
        env = Pendulum(**dict(vars(env), action_repeat=action_repeat))
    rng = np.random.default_rng(seed)
    state = PendulumState(*initial_state) if initial_state is not None else env.initial_state(rng)
    observer = env.observer()
    episode = Episode(seed=seed)
    episode.states.append(state)
    episode.observations.append(observer.reset(state))
    for _ in range(episode_length or env.episode_length):
        action = np.asarray(controller(episode.observations[-1]), dtype=np.float64).reshape(-1)
        try:
            if not np.all(np.isfinite(action)):
                raise NonFiniteError('controller emitted non-finite action %s.' % action)
            state, reward = env.decision_step(state, action[0])
        except NonFiniteError as e:
            logger.warning('Episode %s aborted at step %d: %s', seed, episode.length, e.message)
            episode.aborted = True
            break
        episode.actions.append(action.astype(np.float32))
        episode.rewards.append(reward)
        episode.states.append(state)
        episode.observations.append(observer.observe(state))
    return episode


def random_controller(seed, action_dim=1):
    rng = np.random.default_rng(seed)
    return lambda observation: rng.uniform(-1.0, 1.0, size=action_dim)


def hold_controller(action=0.0):
    return lambda observation: np.array([action])


def episode_to_csv(episode, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'theta', 'theta_dot', 'action', 'reward'])
        for t, (action, reward) in enumerate(zip(episode.actions, episode.rewards)):
            theta, theta_dot = episode.states[t]
            writer.writerow([t, repr(theta), repr(theta_dot), repr(float(action[0])), repr(reward)])
