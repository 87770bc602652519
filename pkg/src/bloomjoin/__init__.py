"""Bloom-filtered cascade join engine, execution-time cost model and sweep tools."""

from .bloom import BloomFilter, BloomParams, plan_parameters
from .costmodel import (BloomTimeModel, BloomTimeModelEps, JoinTimeModel, OptimalEpsilon,
                        fit_bloom_model, fit_join_model, model_total, solve_optimal_epsilon)
from .data import GenConfig, PartitionedTable, generate
from .engine import (JoinConfig, PhaseTimings, baseline_broadcast_hash_join,
                     baseline_shuffle_join, bloom_cascade_join, nested_loop_oracle)

__version__ = "0.1.0"

__all__ = [
    "BloomFilter", "BloomParams", "plan_parameters",
    "BloomTimeModel", "BloomTimeModelEps", "JoinTimeModel", "OptimalEpsilon",
    "fit_bloom_model", "fit_join_model", "model_total", "solve_optimal_epsilon",
    "GenConfig", "PartitionedTable", "generate",
    "JoinConfig", "PhaseTimings", "baseline_broadcast_hash_join", "baseline_shuffle_join",
    "bloom_cascade_join", "nested_loop_oracle",
]
