"""Python bindings for the face adapter trainer."""

import json

from . import _core
from ._core import (
    ConfigError,
    InvalidInput,
    LoadError,
    NumericError,
    cfg_combine,
    config_hash,
    config_keys,
    cosine_similarity,
    fair_loss,
    load_checkpoint,
    make_dataset,
    shuffle_prob,
    suggest_key,
    train,
)


def config(config_file=None, overrides=()):
    """The resolved flat config as a dict."""
    return json.loads(_core.config_json(config_file, list(overrides)))


__all__ = [
    "ConfigError",
    "InvalidInput",
    "LoadError",
    "NumericError",
    "cfg_combine",
    "config",
    "config_hash",
    "config_keys",
    "cosine_similarity",
    "fair_loss",
    "load_checkpoint",
    "make_dataset",
    "shuffle_prob",
    "suggest_key",
    "train",
]
