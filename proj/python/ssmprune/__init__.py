"""Pruning toolkit for Mamba-2 style state-space models."""

import json

from ._ssmprune import (
    Model,
    SsmpruneError,
    forward,
    merge_heads,
    perplexity,
    preset_names,
    read_checkpoint,
    run_cli,
    sample_corpus,
    toy_model,
    write_checkpoint,
)
from ._ssmprune import _merge_report_json

__all__ = [
    "Model",
    "SsmpruneError",
    "dims",
    "forward",
    "merge_heads",
    "merge_report",
    "perplexity",
    "preset_names",
    "read_checkpoint",
    "run_cli",
    "sample_corpus",
    "toy_model",
    "write_checkpoint",
]


def dims(model):
    """Model dimensions as a dict."""
    return json.loads(model.dims_json)


def merge_report(preset, factor):
    """Compression report for merging heads of a named config by `factor`."""
    return json.loads(_merge_report_json(preset, factor))
