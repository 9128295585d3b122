"""Latency-aware placement planning for geographically spread training fleets."""

__version__ = "0.1.0"

from geoplacer.cluster import (
    ClusterError,
    ClusterGraph,
    CommEdge,
    FeatureConfig,
    FeatureMatrix,
    MachineNode,
    add_machine,
    embed_features,
    parse_cluster,
    remove_machine,
    serialize_cluster,
    validate,
)
from geoplacer.gnn import GnnModel, TrainConfig, build_model, predict, train
from geoplacer.scheduler import Assignment, TaskSpec, assign_tasks, size_classes
from geoplacer.sim import CostModelConfig, Strategy, compare, generate_fleet, simulate

__all__ = [
    "__version__",
    "Assignment",
    "ClusterError",
    "ClusterGraph",
    "CommEdge",
    "CostModelConfig",
    "FeatureConfig",
    "FeatureMatrix",
    "GnnModel",
    "MachineNode",
    "Strategy",
    "TaskSpec",
    "TrainConfig",
    "add_machine",
    "assign_tasks",
    "build_model",
    "compare",
    "embed_features",
    "generate_fleet",
    "parse_cluster",
    "predict",
    "remove_machine",
    "serialize_cluster",
    "simulate",
    "size_classes",
    "train",
    "validate",
]
