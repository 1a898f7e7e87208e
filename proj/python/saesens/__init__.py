"""Feature sensitivity evaluation for sparse autoencoders.

Thin wrappers over the compiled ``_saesens`` module. Results that the core
returns as JSON are decoded to plain Python objects here.
"""

import json
import os

from . import _saesens
from ._saesens import (
    ChainError,
    ConfigError,
    IoError,
    LoadError,
    ParseError,
    Pipeline,
    PreconditionError,
    SaeModel,
    SaesensError,
    ShapeError,
    UndefinedMetricError,
    lcs_tokens,
    load_sae,
    spearman,
)

__all__ = [
    "ChainError",
    "ConfigError",
    "IoError",
    "LoadError",
    "ParseError",
    "Pipeline",
    "PreconditionError",
    "SaeModel",
    "SaesensError",
    "ShapeError",
    "UndefinedMetricError",
    "build_prompt",
    "build_session",
    "filter_feature",
    "frequency_weighting",
    "lcs_tokens",
    "load_sae",
    "parse_samples",
    "run_pipeline",
    "spearman",
    "write_fixture",
]


def filter_feature(feature_id, occurrence_count, truncation_rate, min_examples=15, truncation_cutoff=0.9):
    return json.loads(
        _saesens.filter_feature(feature_id, occurrence_count, truncation_rate, min_examples, truncation_cutoff)
    )


def frequency_weighting(frequencies, n_bins=20):
    """``frequencies`` maps SAE id to {feature id: firing frequency}."""
    return json.loads(_saesens.frequency_weighting(frequencies, n_bins))


def build_prompt(example_set):
    """Returns (system, user) text. Accepts an example-set dict or its JSON text."""
    text = example_set if isinstance(example_set, str) else json.dumps(example_set)
    return _saesens.build_prompt(text)


def parse_samples(response_text):
    return json.loads(_saesens.parse_samples(response_text))


def write_fixture(directory, seed=7):
    return _saesens.write_fixture(os.fspath(directory), seed)


def build_session(pipeline, session_id):
    return json.loads(pipeline.build_session(session_id))


def run_pipeline(config):
    """Runs every stage in order. Returns {stage: "ok" | "partial"}."""
    p = Pipeline(os.fspath(config))
    return {stage: getattr(p, stage)() for stage in ("collect", "generate", "score", "analyze")}
