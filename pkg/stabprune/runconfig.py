# -*- coding: utf-8 -*-
"""
    Line-oriented ``key = value`` run configuration files.

    A key such as ``planner.num_samples`` names the config attribute
    ``PLANNER_NUM_SAMPLES``. Values are coerced to the type of the documented
    default; unknown keys are rejected.
"""
import hashlib

from stabprune.errors import ConfigError
from stabprune.settings import tunables

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}
UNHASHED = ('RESULTS_DIR', 'LOG_LEVEL')


def key_to_attr(key):
    return key.strip().replace('.', '_').replace('-', '_').upper()


def coerce(value, default, where):
    text = value.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError('%s: cannot read %r as %s.' % (where, text, type(default).__name__))
    return text


def parse_run_config(text, source='<config>'):
    defaults = tunables()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        where = '%s:%d' % (source, lineno)
        if '=' not in line:
            raise ConfigError('%s: expected key=value, got %r.' % (where, raw.strip()))
        key, value = line.split('=', 1)
        attr = key_to_attr(key)
        if attr not in defaults:
            raise ConfigError('%s: unknown key %r.' % (where, key.strip()))
        values[attr] = coerce(value, defaults[attr], where)
    return values


def load_run_config(path):
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError('cannot read config file %s: %s' % (path, e.strerror))
    return parse_run_config(text, source=str(path))


def dump_run_config(values):
    lines = []
    for attr in sorted(values):
        key = attr.lower().replace('_', '.', 1)
        lines.append('%s = %s' % (key, values[attr]))
    return '\n'.join(lines) + '\n'


def config_hash(config):
    names = sorted(tunables())
    payload = '\n'.join('%s=%r' % (name, config[name]) for name in names if name not in UNHASHED)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()
