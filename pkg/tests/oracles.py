"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from geoplacer.gnn import _forward, loss_and_grads
from geoplacer.scheduler import check_feasibility
from geoplacer.sim import CostModelConfig, Strategy, simulate


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_difference(model, gt, x, labels, mask, name, idx, eps=1e-4) -> float:
    p = dict(model.params())[name]
    old = p[idx]
    p[idx] = old + eps
    up = loss_and_grads(model, gt, x, labels, mask)[0]
    p[idx] = old - eps
    down = loss_and_grads(model, gt, x, labels, mask)[0]
    p[idx] = old
    return (up - down) / (2 * eps)


def _relu_pattern(model, gt, x):
    _, cache = _forward(model, gt, x)
    parts = [cache.edge_pre > 0, cache.pool_pre > 0]
    parts += [pre > 0 for pre, layer in zip(cache.gcn_pre, model.layers) if layer.relu]
    return [p.copy() for p in parts]


def crosses_kink(model, gt, x, name, idx, eps=1e-4) -> bool:
    """True when some ReLU flips between theta - eps and theta + eps, i.e. the
    central-difference stencil is not inside one differentiable piece."""
    p = dict(model.params())[name]
    old = p[idx]
    p[idx] = old + eps
    up = _relu_pattern(model, gt, x)
    p[idx] = old - eps
    down = _relu_pattern(model, gt, x)
    p[idx] = old
    return any((a != b).any() for a, b in zip(up, down))


def sample_params(model, rng, count):
    """(name, index) pairs spread round-robin over every parameter array."""
    arrays = list(model.params())
    out = []
    for k in range(count):
        name, p = arrays[k % len(arrays)]
        out.append((name, tuple(int(rng.integers(0, s)) for s in p.shape)))
    return out


def plan_comm(g, tasks, groups, cfg=CostModelConfig()) -> float:
    return sum(simulate(g, t, Strategy.GROUPED, cfg, groups[t.name]).comm_ms for t in tasks)


def best_two_way_partition(g, tasks, sizes=None, cfg=CostModelConfig()):
    """Cheapest feasible split of the whole fleet between two tasks.

    ``sizes`` restricts the search to partitions with those group sizes
    (in ``tasks`` order); None searches every size.
    """
    a, b = tasks
    best = math.inf
    ids = g.ids
    for bits in itertools.product((0, 1), repeat=len(ids)):
        groups = {
            a.name: [i for i, bit in zip(ids, bits) if bit == 0],
            b.name: [i for i, bit in zip(ids, bits) if bit == 1],
        }
        if sizes is not None and [len(groups[a.name]), len(groups[b.name])] != list(sizes):
            continue
        if not all(check_feasibility(g, groups[t.name], t)[0] for t in tasks):
            continue
        best = min(best, plan_comm(g, tasks, groups, cfg))
    return best


def softmax_rows(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
