"""Training labels for the classifier.

No hand labels exist for synthetic fleets, so :func:`synthetic_labels` builds
them with a deterministic heuristic the network then learns to imitate. Machines
joined by fast links form latency clusters; clusters are laid out in a walk
that always moves to the nearest unplaced cluster, machines inside a cluster
by capacity tier, and the resulting sequence is cut into consecutive runs of
each task's proportional size, largest task first.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from geoplacer.cluster import ClusterGraph

from geoplacer.scheduler import (
    TaskSpec,
    check_feasibility,
    class_index,
    priority_order,
    size_classes,
)
from geoplacer.sim import SimError, chain_cost, stage_order

# links within this multiple of the fastest link count as "same site"
TIGHT_FACTOR = 5.0


class LabelError(ValueError):
    pass


def latency_clusters(g: ClusterGraph, tight_factor: float = TIGHT_FACTOR) -> list[list[int]]:
    """Connected components over links no slower than ``tight_factor`` times the
    fastest link in the fleet."""
    if not g.edges:
        return [[nid] for nid in g.ids]
    limit = tight_factor * min(e.ms_per_64b for e in g.edges)
    tight = np.asarray(g.mask) & (np.asarray(g.weights) <= limit)
    _, comp = connected_components(csr_matrix(tight), directed=False)
    groups: dict[int, list[int]] = {}
    for nid, c in zip(g.ids, comp):
        groups.setdefault(int(c), []).append(nid)
    return [sorted(v) for v in groups.values()]


def placement_sequence(
    g: ClusterGraph, start: int | None = None, tight_factor: float = TIGHT_FACTOR
) -> list[int]:
    """Machines ordered cluster by cluster: from the ``start`` cluster (default:
    most total memory), always on to the cluster with the cheapest route from
    those already placed. Inside a cluster by memory, compute, then id."""
    clusters = latency_clusters(g, tight_factor)
    mem = [g.total_memory(c) for c in clusters]
    dist = np.asarray(g.shortest_paths)
    idx = g.index
    left = list(range(len(clusters)))
    cur = start if start is not None else min(left, key=lambda c: (-mem[c], clusters[c][0]))
    placed_rows: list[int] = []
    seq: list[int] = []
    while True:
        left.remove(cur)
        members = sorted(clusters[cur], key=lambda i: (-g.node(i).memory_gb, -g.node(i).compute, i))
        seq += members
        placed_rows += [idx[i] for i in members]
        if not left:
            return seq

        def reach(c: int) -> tuple[float, float, int]:
            d = dist[np.ix_(placed_rows, [idx[i] for i in clusters[c]])].min()
            return (d, -mem[c], clusters[c][0])

        cur = min(left, key=reach)


def _cut(seq: list[int], tasks: Sequence[TaskSpec], sizes: dict[str, int]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    pos = 0
    for task in priority_order(tasks):
        out[task.name] = sorted(seq[pos : pos + sizes[task.name]])
        pos += sizes[task.name]
    return out


def heuristic_groups(g: ClusterGraph, tasks: Sequence[TaskSpec]) -> dict[str, list[int]]:
    """Cut a placement sequence into consecutive runs of the proportional sizes,
    largest task first. Every cluster is tried as the walk's start; the cut with
    the cheapest total stage chain wins (feasible cuts before infeasible ones)."""
    sizes = dict(zip([t.name for t in tasks], size_classes(tasks, len(g))))
    by_name = {t.name: t for t in tasks}
    best = None
    for start in range(len(latency_clusters(g))):
        groups = _cut(placement_sequence(g, start), tasks, sizes)
        feasible = all(check_feasibility(g, grp, by_name[k])[0] for k, grp in groups.items())
        try:
            cost = sum(chain_cost(g, stage_order(g, grp)) for grp in groups.values() if grp)
        except SimError:
            cost = float("inf")
        key = (not feasible, cost, start)
        if best is None or key < best[0]:
            best = (key, groups)
    return best[1]


def synthetic_labels(g: ClusterGraph, tasks: Sequence[TaskSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Per-node class (node order of ``g``) and the mask of labelled nodes."""
    cls = class_index(tasks)
    labels = np.full(len(g), -1)
    for name, group in heuristic_groups(g, tasks).items():
        for nid in group:
            labels[g.index[nid]] = cls[name]
    return labels, labels >= 0


def parse_labels(text: str, g: ClusterGraph) -> tuple[np.ndarray, np.ndarray, int]:
    """Label file -> (labels, mask, num_classes). Ids absent from the file stay unlabelled."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LabelError(f"malformed label file: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"labels", "num_classes"}:
        raise LabelError("label file needs exactly 'labels' and 'num_classes'")
    k = doc["num_classes"]
    if not isinstance(k, int) or k < 1:
        raise LabelError("num_classes must be a positive integer")
    labels = np.full(len(g), -1)
    for key, c in doc["labels"].items():
        try:
            nid = int(key)
        except ValueError:
            raise LabelError(f"bad node id {key!r}") from None
        if nid not in g.index:
            raise LabelError(f"label for unknown node {nid}")
        if not isinstance(c, int) or not 0 <= c < k:
            raise LabelError(f"class {c!r} for node {nid} outside [0, {k})")
        labels[g.index[nid]] = c
    return labels, labels >= 0, k


def labels_to_json(g: ClusterGraph, labels: np.ndarray, num_classes: int) -> str:
    entries = {str(nid): int(c) for nid, c in sorted(zip(g.ids, labels)) if c >= 0}
    return json.dumps({"labels": entries, "num_classes": num_classes}, indent=2) + "\n"
