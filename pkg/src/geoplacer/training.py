"""Training sets and the end-to-end fit used by the planner.

The planner classifies the full fleet, removes the machines it gave to the
largest task, classifies what is left, and so on. A model fit on the full
graph alone never sees those shrinking residual graphs, so the training set
stacks the full graph with every residual of its labelled peel sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from geoplacer.cluster import ClusterGraph, FeatureConfig, embed_features
from geoplacer.gnn import (
    GnnModel,
    GraphTensors,
    TrainConfig,
    build_model,
    graph_tensors,
    stack_tensors,
    train,
)
from geoplacer.labels import synthetic_labels
from geoplacer.scheduler import TaskSpec


@dataclass
class TrainingSet:
    tensors: GraphTensors
    x: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    graphs: list[ClusterGraph]


def peel_sequence(g: ClusterGraph, labels: np.ndarray, num_classes: int) -> list[ClusterGraph]:
    """g, then g minus the top class, then minus the next one... (non-empty only)."""
    out = [g]
    label_of = dict(zip(g.ids, labels))
    cur = g
    for c in range(num_classes - 1, 0, -1):
        keep = [nid for nid in cur.ids if label_of[nid] != c]
        if not keep:
            break
        if len(keep) < len(cur):
            cur = cur.subgraph(keep)
            out.append(cur)
    return out


def build_training_set(
    g: ClusterGraph,
    labels: np.ndarray,
    mask: np.ndarray,
    num_classes: int,
    features: FeatureConfig,
    peel: bool = True,
) -> TrainingSet:
    graphs = peel_sequence(g, labels, num_classes) if peel else [g]
    label_of = dict(zip(g.ids, labels))
    mask_of = dict(zip(g.ids, mask))
    return TrainingSet(
        stack_tensors([graph_tensors(h) for h in graphs]),
        np.vstack([embed_features(h, features).values for h in graphs]),
        np.concatenate([[label_of[i] for i in h.ids] for h in graphs]).astype(int),
        np.concatenate([[mask_of[i] for i in h.ids] for h in graphs]).astype(bool),
        graphs,
    )


def fit_planner(
    g: ClusterGraph,
    tasks: Sequence[TaskSpec],
    cfg: TrainConfig = TrainConfig(),
    *,
    labels: tuple[np.ndarray, np.ndarray] | None = None,
    num_classes: int | None = None,
    model: GnnModel | None = None,
    peel: bool = True,
    **model_kw,
) -> tuple[GnnModel, list[tuple[float, float]]]:
    """Label (synthetically unless ``labels`` is given), build and train a model."""
    k = num_classes or len(tasks)
    y, mask = labels if labels is not None else synthetic_labels(g, tasks)
    if model is None:
        model = build_model(FeatureConfig.from_graph(g), k, seed=cfg.seed, **model_kw)
    ts = build_training_set(g, y, mask, model.num_classes, model.features, peel)
    return train(model, ts.tensors, ts.x, ts.labels, ts.mask, cfg)
