"""Generative design of supply networks with a learned surrogate and disruption analysis."""

from .graph import DesignGraph, EdgeAttr, NodeAttr, deserialize, serialize, validate
from .pipeline import PipelineConfig, post_process, run_pipeline
from .resilience import ResilienceConfig, edns
from .synthgen import SynthConfig, build_dataset, generate_graph

__all__ = [
    "DesignGraph",
    "EdgeAttr",
    "NodeAttr",
    "PipelineConfig",
    "ResilienceConfig",
    "SynthConfig",
    "build_dataset",
    "deserialize",
    "edns",
    "generate_graph",
    "post_process",
    "run_pipeline",
    "serialize",
    "validate",
]
