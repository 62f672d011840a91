"""Distributed inference for embedding-heavy recommendation models.

Shard planning, a main/sparse serving runtime over TCP, cross-shard tracing,
load replay and latency attribution.
"""

from .generate import generate_model
from .model import ModelSpec
from .modelfile import load_spec, save_spec
from .planner import ShardPlan, load_plan, make_plan, save_plan, validate_plan
from .runtime import Engine, RankingRequest, split_batches

__version__ = "0.1.0"

__all__ = [
    "Engine", "ModelSpec", "RankingRequest", "ShardPlan", "generate_model", "load_plan", "load_spec",
    "make_plan", "save_plan", "save_spec", "split_batches", "validate_plan",
]
