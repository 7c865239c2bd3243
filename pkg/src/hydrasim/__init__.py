"""Trace-driven simulator and scheduling library for serverless LLM cold starts.

The package models pipeline-parallel cold starts: SLO-driven resource
allocation, contention-aware placement, overlapped startup stages,
pipeline consolidation and sliding-window autoscaling.
"""

from hydrasim.cluster import (
    ClusterSnapshot,
    DeploymentPlan,
    MemoryPolicy,
    ModelProfile,
    PlanEntry,
    ServerSpec,
    SloSpec,
    StageTimings,
    fits,
)
from hydrasim.predictor import (
    PredictionInput,
    predict_tpot,
    predict_ttft_basic,
    predict_ttft_overlapped,
    select_servers,
)
from hydrasim.allocator import allocate, enumerate_choices, sharing_score
from hydrasim.contention import ContentionRegistry
from hydrasim.scenario import ModelEntry, Scenario, SimConfig
from hydrasim.sim import SimResult, simulate

__all__ = [
    "ClusterSnapshot",
    "ContentionRegistry",
    "DeploymentPlan",
    "MemoryPolicy",
    "ModelEntry",
    "ModelProfile",
    "PlanEntry",
    "PredictionInput",
    "Scenario",
    "ServerSpec",
    "SimConfig",
    "SimResult",
    "SloSpec",
    "StageTimings",
    "allocate",
    "enumerate_choices",
    "fits",
    "predict_tpot",
    "predict_ttft_basic",
    "predict_ttft_overlapped",
    "select_servers",
    "sharing_score",
    "simulate",
]

__version__ = "0.1.0"
