"""Carve a fleet into per-task machine groups using the trained classifier.

The planner walks tasks from largest to smallest. Each round it classifies the
machines that are still free, peels off the ones predicted for the current
task's class and checks that group against the task's memory threshold. A
group that fails is carried forward and merged into the next round's
candidate; once the free machines can no longer cover the remaining tasks,
those tasks are reported as waiting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from geoplacer.cluster import ClusterGraph, embed_features, remove_machine
from geoplacer.gnn import GnnModel, predict

DEFAULT_OVERHEAD = 1.2
GIB = 2**30

_TASK_KEYS = {"name", "params", "bytes_per_param", "min_memory_gb"}


class SchedulerError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    param_count: int
    bytes_per_param: float = 2.0
    min_memory_gb: float | None = None

    def __post_init__(self) -> None:
        if self.param_count <= 0:
            raise SchedulerError(f"{self.name}: param_count must be positive")
        if self.bytes_per_param <= 0:
            raise SchedulerError(f"{self.name}: bytes_per_param must be positive")
        if self.min_memory_gb is not None and self.min_memory_gb <= 0:
            raise SchedulerError(f"{self.name}: min_memory_gb must be positive")

    @property
    def model_bytes(self) -> float:
        return self.param_count * self.bytes_per_param

    def required_memory_gb(self, overhead: float = DEFAULT_OVERHEAD) -> float:
        need = self.model_bytes * overhead / GIB
        return max(self.min_memory_gb or 0.0, need)


def priority_order(tasks: Sequence[TaskSpec]) -> list[TaskSpec]:
    """Largest model first; equal sizes by name."""
    return sorted(tasks, key=lambda t: (-t.param_count, t.name))


def class_index(tasks: Sequence[TaskSpec]) -> dict[str, int]:
    """Class label per task: the largest task gets the largest index."""
    ordered = priority_order(tasks)
    return {t.name: len(ordered) - 1 - i for i, t in enumerate(ordered)}


def parse_tasks(text: str) -> list[TaskSpec]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchedulerError(f"malformed task manifest: {exc}") from exc
    if not isinstance(doc, list):
        raise SchedulerError("task manifest must be a JSON array")
    tasks = []
    for raw in doc:
        if not isinstance(raw, dict):
            raise SchedulerError("task entries must be objects")
        extra = set(raw) - _TASK_KEYS
        if extra:
            raise SchedulerError(f"unknown task keys: {sorted(extra)}")
        if "name" not in raw or "params" not in raw:
            raise SchedulerError("task entries need name and params")
        params = raw["params"]
        if isinstance(params, float) and params.is_integer():
            params = int(params)
        if isinstance(params, bool) or not isinstance(params, int):
            raise SchedulerError(f"{raw['name']}: params must be an integer")
        tasks.append(
            TaskSpec(
                str(raw["name"]),
                params,
                float(raw.get("bytes_per_param", 2.0)),
                None if raw.get("min_memory_gb") is None else float(raw["min_memory_gb"]),
            )
        )
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise SchedulerError("duplicate task names")
    return tasks


def size_classes(tasks: Sequence[TaskSpec], n: int) -> list[int]:
    """Group sizes proportional to parameter count (largest remainder), each >= 1.

    Returned in the order of ``tasks``.
    """
    if n < len(tasks):
        raise SchedulerError(f"{n} machines cannot host {len(tasks)} tasks")
    if not tasks:
        return []
    total = sum(t.param_count for t in tasks)
    quota = [n * t.param_count / total for t in tasks]
    size = [max(1, math.floor(q)) for q in quota]
    names = [t.name for t in tasks]
    while sum(size) > n:
        # bumping tiny tasks to 1 can overshoot; shave the largest groups
        i = max((j for j in range(len(size)) if size[j] > 1),
                key=lambda j: (size[j], -(quota[j] - size[j]), names[j]))
        size[i] -= 1
    order = sorted(range(len(tasks)), key=lambda j: (-(quota[j] - size[j]), names[j]))
    k = 0
    while sum(size) < n:
        size[order[k % len(order)]] += 1
        k += 1
    return size


def check_feasibility(
    g: ClusterGraph, group: Iterable[int], task: TaskSpec, overhead: float = DEFAULT_OVERHEAD
) -> tuple[bool, str]:
    group = list(group)
    if not group:
        return False, "empty group"
    have = g.total_memory(group)
    need = task.required_memory_gb(overhead)
    if have < need:
        return False, f"insufficient memory ({have:.1f} < {need:.1f} GB)"
    if not g.is_connected(group):
        return False, "disconnected group"
    return True, "ok"


@dataclass
class Assignment:
    groups: dict[str, list[int]] = field(default_factory=dict)
    leftovers: list[int] = field(default_factory=list)
    status: dict[str, str] = field(default_factory=dict)

    @property
    def waiting(self) -> list[str]:
        return [name for name, s in self.status.items() if s == "waiting"]

    def to_dict(self) -> dict:
        return {
            "groups": {k: sorted(v) for k, v in self.groups.items()},
            "leftovers": sorted(self.leftovers),
            "waiting": self.waiting,
        }


def split_off(
    g: ClusterGraph, model: GnnModel, remaining: Sequence[int], cls: int, size: int
) -> list[int]:
    """Classify the free machines and take the ``size`` most likely members of
    class ``cls``, growing from the top-ranked machine so the group stays
    connected (ties to the lower id)."""
    if not remaining or size <= 0:
        return []
    sub = g.subgraph(remaining)
    probs, _ = predict(model, sub, embed_features(sub, model.features))
    ranked = [nid for nid, _ in sorted(zip(sub.ids, probs[:, cls]), key=lambda p: (-p[1], p[0]))]
    group = [ranked.pop(0)]
    linked = set(sub.neighbors(group[0]))
    while len(group) < size:
        nxt = next((nid for nid in ranked if nid in linked), None)
        if nxt is None:
            break
        ranked.remove(nxt)
        group.append(nxt)
        linked |= set(sub.neighbors(nxt))
    return sorted(group)


def assign_tasks(
    g: ClusterGraph,
    model: GnnModel,
    tasks: Sequence[TaskSpec],
    overhead: float = DEFAULT_OVERHEAD,
) -> Assignment:
    if not tasks:
        return Assignment(leftovers=g.ids)
    if model.num_classes < len(tasks):
        raise SchedulerError(
            f"model has {model.num_classes} classes but {len(tasks)} tasks were given"
        )
    need_total = sum(t.required_memory_gb(overhead) for t in tasks)
    if len(g) < len(tasks) or g.total_memory() < need_total:
        raise SchedulerError(
            f"insufficient aggregate memory: {g.total_memory():.1f} GB on {len(g)} machines "
            f"for {need_total:.1f} GB across {len(tasks)} tasks"
        )

    ordered = priority_order(tasks)
    cls = class_index(tasks)
    target = dict(zip([t.name for t in tasks], size_classes(tasks, len(g))))
    result = Assignment(status={t.name: "waiting" for t in tasks})

    remaining = list(g.ids)
    carry: list[int] = []
    pending: list[TaskSpec] = []
    for i, task in enumerate(ordered):
        cand = split_off(g, model, remaining, cls[task.name], target[task.name])
        taken = set(cand)
        remaining = [nid for nid in remaining if nid not in taken]
        merged = sorted(set(cand) | set(carry))

        queue = priority_order(pending + [task])
        winner = next((t for t in queue if check_feasibility(g, merged, t, overhead)[0]), None)
        if winner is None:
            carry = merged
            pending.append(task)
        else:
            result.groups[winner.name] = merged
            result.status[winner.name] = "assigned"
            pending = [t for t in queue if t is not winner]
            carry = []

        later = pending + list(ordered[i + 1 :])
        if later:
            free = remaining + carry
            need = sum(t.required_memory_gb(overhead) for t in later)
            if len(free) < len(later) or g.total_memory(free) < need:
                break

    assigned = {nid for grp in result.groups.values() for nid in grp}
    result.leftovers = sorted(set(g.ids) - assigned)
    # report groups in manifest order
    result.groups = {t.name: result.groups[t.name] for t in tasks if t.name in result.groups}
    return result


def replan_after_failure(
    g: ClusterGraph,
    model: GnnModel,
    tasks: Sequence[TaskSpec],
    failed_id: int,
    overhead: float = DEFAULT_OVERHEAD,
) -> Assignment:
    return assign_tasks(remove_machine(g, failed_id), model, tasks, overhead)
