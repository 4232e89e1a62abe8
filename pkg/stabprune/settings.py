# -*- coding: utf-8 -*-
"""
    Configuration classes. Every tunable named by the run-config format is an
    UPPER_CASE attribute of BaseConfig; a run-config key ``planner.num_samples``
    maps to ``PLANNER_NUM_SAMPLES``.
"""
import os

basedir = os.path.abspath(os.path.dirname(os.path.dirname(__file__)))


class BaseConfig:
    RESULTS_DIR = os.getenv('STABPRUNE_RESULTS_DIR', os.path.join(basedir, 'results'))
    SEED = 0
    LOG_LEVEL = 'INFO'

    # plant
    ENV_DT = 0.01
    ENV_GRAVITY = 9.81
    ENV_LENGTH = 1.0
    ENV_MASS = 1.0
    ENV_MAX_TORQUE = 2.0
    ENV_DAMPING = 0.01
    ENV_MAX_SPEED = 8.0
    ENV_ACTION_REPEAT = 8
    ENV_EPISODE_LENGTH = 125
    ENV_OBS_MODE = 'state'
    ENV_FRAME_STACK = 3
    ENV_IMAGE_SIZE = 28
    ENV_ROD_PIXELS = 12.0
    ENV_INIT_THETA_DOT = 1.0

    # agent
    AGENT_LATENT_DIM = 16
    AGENT_HIDDEN = 64
    AGENT_ENCODER_WIDTH = 32
    AGENT_ACTION_DIM = 1
    AGENT_DISCOUNT = 0.99
    AGENT_INIT_SEED = 1

    # planner
    PLANNER_HORIZON = 5
    PLANNER_NUM_SAMPLES = 64
    PLANNER_NUM_ELITES = 8
    PLANNER_ITERATIONS = 4
    PLANNER_POLICY_FRACTION = 0.05
    PLANNER_TEMPERATURE = 0.5
    PLANNER_MIN_STD = 0.05
    PLANNER_MAX_STD = 2.0

    # TD training
    TRAIN_ENV_STEPS = 100000
    TRAIN_SEED_STEPS = 5000
    TRAIN_REPLAY_CAPACITY = 50000
    TRAIN_BATCH_SIZE = 256
    TRAIN_HORIZON = 5
    TRAIN_LR = 1e-3
    TRAIN_PI_LR = 1e-3
    TRAIN_TAU = 0.01
    TRAIN_RHO = 0.5
    TRAIN_CONSISTENCY_COEF = 2.0
    TRAIN_REWARD_COEF = 0.5
    TRAIN_VALUE_COEF = 0.1
    TRAIN_GRAD_CLIP_NORM = 10.0
    TRAIN_STD_START = 0.5
    TRAIN_STD_END = 0.05
    TRAIN_EVAL_EVERY = 2000
    TRAIN_EVAL_EPISODES = 5

    # Lyapunov function
    LYAP_FEATURE_DIM = 16
    LYAP_HIDDEN = 64
    LYAP_MARGIN_POSITIVE = 0.1
    LYAP_MARGIN_DECREASE = 0.01
    LYAP_SETTLE_WEIGHT = 1.0
    LYAP_EQ_DISTANCE = 0.05
    LYAP_EPOCHS = 300
    LYAP_BATCH_SIZE = 512
    LYAP_LR = 1e-3
    LYAP_HOLDOUT = 0.2
    LYAP_EPISODES = 20
    LYAP_REQUIRED_FRACTION = 0.95
    LYAP_EQ_SAMPLES = 100

    # stability verdict
    VERDICT_RISE_BUDGET = 0.05
    VERDICT_CONVERGENCE = 0.02
    VERDICT_SETTLE_FRACTION = 0.5
    VERDICT_EPISODES = 5

    # coefficient search
    SEARCH_POPULATION = 16
    SEARCH_GENERATIONS = 40
    SEARCH_MUTATION_STD = 0.05
    SEARCH_PATIENCE = 8
    SEARCH_MASK_COUPLING = True
    SEARCH_TARGET_RHO = 0.10
    SEARCH_TARGET_EPSILON = 0.01
    SEARCH_WORKERS = 1
    SEARCH_SWEEP_STEPS = 10

    # fine-tuning
    FINETUNE_STEPS = 5000
    FINETUNE_NOISE_FLOOR = 25.0

    # benchmark
    BENCH_ITERATIONS = 100
    BENCH_WARMUP = 10


class DevelopmentConfig(BaseConfig):
    pass


class FullScaleConfig(BaseConfig):
    ENV_OBS_MODE = 'pixels'
    AGENT_LATENT_DIM = 50
    AGENT_HIDDEN = 512


class TestingConfig(BaseConfig):
    TESTING = True
    LOG_LEVEL = 'WARNING'
    RESULTS_DIR = os.path.join(basedir, 'results-testing')
    ENV_EPISODE_LENGTH = 20
    AGENT_LATENT_DIM = 4
    AGENT_HIDDEN = 16
    AGENT_ENCODER_WIDTH = 8
    PLANNER_NUM_SAMPLES = 16
    PLANNER_NUM_ELITES = 4
    PLANNER_ITERATIONS = 2
    PLANNER_HORIZON = 3
    TRAIN_ENV_STEPS = 800
    TRAIN_SEED_STEPS = 320
    TRAIN_BATCH_SIZE = 16
    TRAIN_HORIZON = 3
    TRAIN_EVAL_EVERY = 400
    TRAIN_EVAL_EPISODES = 1
    LYAP_HIDDEN = 16
    LYAP_FEATURE_DIM = 8
    LYAP_EPOCHS = 5
    LYAP_BATCH_SIZE = 64
    LYAP_EPISODES = 2
    LYAP_EQ_SAMPLES = 10
    VERDICT_EPISODES = 2
    SEARCH_POPULATION = 4
    SEARCH_GENERATIONS = 2
    SEARCH_PATIENCE = 2
    SEARCH_SWEEP_STEPS = 3
    FINETUNE_STEPS = 40
    BENCH_ITERATIONS = 5
    BENCH_WARMUP = 1


config = {
    'development': DevelopmentConfig,
    'fullscale': FullScaleConfig,
    'testing': TestingConfig
}


def tunables(config_class=BaseConfig):
    """Return the ``{KEY: default}`` mapping of every tunable on a config class."""
    return {key: getattr(config_class, key) for key in dir(config_class)
            if key.isupper() and key != 'TESTING'}
