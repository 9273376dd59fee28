"""Python access to the modular risk minimization toolkit."""

import json

from ._core import (
    ConfigError,
    Error,
    FormatError,
    ProvenanceError,
    ShapeError,
    load_checkpoint,
    load_datasets,
    load_mask,
    render_table,
)
from . import _core

__all__ = [
    "ConfigError",
    "Error",
    "FormatError",
    "ProvenanceError",
    "ShapeError",
    "collect_reports",
    "config_defaults",
    "config_hash",
    "load_checkpoint",
    "load_datasets",
    "load_mask",
    "normalize_config",
    "parse_table_csv",
    "render_table",
    "run_experiment",
    "verify_proposition",
]


def verify_proposition(c, D, n, delta, trials, seed=0, mc_samples=100_000, ties="error"):
    return json.loads(_core._verify_proposition(c, D, n, delta, trials, seed, mc_samples, ties))


def config_defaults(preset="desk", method="MRM"):
    return json.loads(_core._config_defaults(preset, method))


def normalize_config(config):
    """Fills preset defaults and applies the method's constraints."""
    return json.loads(_core._config_normalize(json.dumps(config)))


def config_hash(config):
    return _core._config_hash(json.dumps(config))


def run_experiment(config, out="runs", data_dir="", force=False):
    return json.loads(_core._run_experiment(json.dumps(config), str(out), str(data_dir), force))


def collect_reports(out="runs"):
    return json.loads(_core._collect_reports(str(out)))


def parse_table_csv(text):
    return json.loads(_core._parse_table_csv(text))
