# -*- coding: utf-8 -*-
"""
    Exception hierarchy. Every error raised on purpose by the toolkit derives
    from StabPruneError and carries the process exit code the CLI reports.
"""
import sys
from functools import wraps

import click


class StabPruneError(Exception):
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def with_stage(self, stage):
        self.message = '[%s] %s' % (stage, self.message)
        self.args = (self.message,)
        return self


class ConfigError(StabPruneError, ValueError):
    exit_code = 2


class InfeasibleSearchError(StabPruneError):
    exit_code = 3

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class VerificationError(StabPruneError):
    exit_code = 4


class LyapunovTrainingError(VerificationError):

    def __init__(self, message, decrease_fraction, positive_fraction):
        super().__init__(message)
        self.decrease_fraction = decrease_fraction
        self.positive_fraction = positive_fraction


class ShapeError(StabPruneError, ValueError):
    pass


class GradientError(StabPruneError):
    pass


class NonFiniteError(StabPruneError, ArithmeticError):

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class CheckpointError(StabPruneError):

    def __init__(self, message, position=None, entry=None):
        super().__init__(message)
        self.position = position
        self.entry = entry


class GraphError(StabPruneError):
    pass


class ManifestMismatchError(StabPruneError, ValueError):
    pass


class MissingArtifactError(StabPruneError, FileNotFoundError):

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


def cli_abort(error):
    click.echo('Error: %s' % error.message, err=True)
    sys.exit(error.exit_code)


def handle_errors(stage):
    """Turn StabPruneError into an exit code for a CLI command."""
    def decorator(f):
        @wraps(f)
        def decorated(*args, **kwargs):
            try:
                return f(*args, **kwargs)
            except StabPruneError as e:
                if not e.message.startswith('['):
                    e.with_stage(stage)
                cli_abort(e)
        return decorated
    return decorator
