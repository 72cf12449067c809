"""Group-relative policy optimisation on synthetic patient cohorts.

Thin layer over the compiled core. Functions that take a config accept
either a path or a dict; documents come back as dicts.
"""

import json
import os
import tempfile

from . import _medgrpo
from ._medgrpo import (
    ConfigError,
    DivergenceError,
    UsageError,
    discounted_returns,
    group_relative_advantage,
    kmeans,
)

__all__ = [
    "ConfigError",
    "DivergenceError",
    "UsageError",
    "ablate",
    "discounted_returns",
    "generate_cohort",
    "gradcheck",
    "group_relative_advantage",
    "kmeans",
    "normalize_config",
    "search",
    "train",
]


def _text(config):
    if isinstance(config, dict):
        return json.dumps(config)
    with open(os.fspath(config)) as f:
        return f.read()


class _ConfigPath:
    """Hands the command layer a file path, writing dicts to a temp file."""

    def __init__(self, config):
        self.config = config
        self.tmp = None

    def __enter__(self):
        if not isinstance(self.config, dict):
            return os.fspath(self.config)
        fd, self.tmp = tempfile.mkstemp(suffix=".json")
        with os.fdopen(fd, "w") as f:
            json.dump(self.config, f)
        return self.tmp

    def __exit__(self, *exc):
        if self.tmp:
            os.unlink(self.tmp)


def normalize_config(config=None):
    return json.loads(_medgrpo.normalize_config(_text(config) if config is not None else "{}"))


def generate_cohort(config=None):
    return json.loads(_medgrpo.generate_cohort(_text(config) if config is not None else "{}"))


def gradcheck(config=None):
    """[(module, max_rel_error, passed), ...]"""
    return _medgrpo.gradcheck(_text(config) if config is not None else "{}")


def train(config, out_dir=None, seed=None, workers=1):
    """Returns (exit_code, stdout, stderr), same as the command-line tool."""
    with _ConfigPath(config) as path:
        return _medgrpo.train(path, seed=seed, out_dir=None if out_dir is None else os.fspath(out_dir),
                              workers=workers)


def search(config, checkpoint, patient, out_dir=None):
    with _ConfigPath(config) as path:
        return _medgrpo.search(path, os.fspath(checkpoint), patient,
                               out_dir=None if out_dir is None else os.fspath(out_dir))


def ablate(config, mode, out_dir=None, workers=1):
    with _ConfigPath(config) as path:
        return _medgrpo.ablate(path, mode, out_dir=None if out_dir is None else os.fspath(out_dir),
                               workers=workers)
