"""Python access to the safeclip C++ library."""

import json as _json

from ._core import (
    ConfigError,
    InputError,
    StateError,
    TrainingFault,
    clip_loss,
    config_hash,
    em_fit,
    normalize_config,
    preset_config,
    preset_names,
    top_count,
    unimodal_self_loss,
)
from ._core import run_experiment as _run_experiment

__all__ = [
    "ConfigError",
    "InputError",
    "StateError",
    "TrainingFault",
    "clip_loss",
    "config_hash",
    "em_fit",
    "normalize_config",
    "preset",
    "preset_config",
    "preset_names",
    "run",
    "top_count",
    "unimodal_self_loss",
]


def preset(name):
    """Built-in preset as a dict."""
    return _json.loads(preset_config(name))


def run(config, output_dir, verbosity=0):
    """Run a config (dict or JSON text) and return the parsed summary."""
    text = config if isinstance(config, str) else _json.dumps(config)
    return _json.loads(_run_experiment(text, str(output_dir), verbosity))
