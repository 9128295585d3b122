import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoplacer.cluster import ClusterGraph, CommEdge, FeatureConfig, MachineNode, add_machine, remove_machine
from geoplacer.gnn import TrainConfig, build_model
from geoplacer.scheduler import (
    GIB,
    SchedulerError,
    TaskSpec,
    assign_tasks,
    check_feasibility,
    class_index,
    parse_tasks,
    priority_order,
    replan_after_failure,
    size_classes,
    split_off,
)
from geoplacer.training import fit_planner

from conftest import random_graph


@pytest.fixture(scope="module")
def planner8(demo8, tasks2):
    model, _ = fit_planner(demo8, tasks2, TrainConfig(steps=50))
    return model


def test_sizes_follow_parameter_ratio(tasks2):
    # 8 * 1.5/1.84 = 6.52 and 8 * 0.34/1.84 = 1.48: floors 6 and 1, the bigger remainder wins
    assert size_classes(tasks2, 8) == [7, 1]


def test_sizes_single_task():
    assert size_classes([TaskSpec("a", 10)], 5) == [5]


def test_sizes_equal_tasks():
    tasks = [TaskSpec(n, 100) for n in "abcd"]
    assert size_classes(tasks, 8) == [2, 2, 2, 2]


def test_sizes_too_few_machines():
    with pytest.raises(SchedulerError):
        size_classes([TaskSpec("a", 1), TaskSpec("b", 1)], 1)


def test_sizes_tiny_tasks_bumped(tasks4):
    sizes = size_classes(tasks4, 46)
    assert sizes == [42, 2, 1, 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10**12), min_size=1, max_size=6), st.integers(0, 60))
def test_sizes_properties(params, extra):
    tasks = [TaskSpec(f"t{i}", p) for i, p in enumerate(params)]
    n = len(tasks) + extra
    sizes = size_classes(tasks, n)
    assert sum(sizes) == n and min(sizes) >= 1
    by = dict(zip([t.name for t in tasks], sizes))
    ordered = [by[t.name] for t in priority_order(tasks)]
    assert ordered == sorted(ordered, reverse=True)


def test_class_index_largest_gets_top(tasks4):
    idx = class_index(tasks4)
    assert idx == {"OPT": 3, "T5": 2, "GPT-2": 1, "BERT-large": 0}


def _two(mem_a, mem_b, linked=True):
    nodes = (MachineNode(0, "A", 8, mem_a), MachineNode(1, "A", 8, mem_b))
    return ClusterGraph(nodes, (CommEdge(0, 1, 5.0),) if linked else ())


def test_feasible_by_memory():
    task = TaskSpec("t", 1, min_memory_gb=350)
    assert check_feasibility(_two(450, 450), [0, 1], task) == (True, "ok")


def test_required_memory_formula():
    # 1.5e9 params * 2 bytes * 1.2 overhead
    assert TaskSpec("gpt", 1_500_000_000).required_memory_gb() == pytest.approx(3.6e9 / GIB)
    assert TaskSpec("x", 10, min_memory_gb=5).required_memory_gb() == 5


def test_infeasible_cases():
    task = TaskSpec("t", 1, min_memory_gb=350)
    assert check_feasibility(_two(450, 450), [], task) == (False, "empty group")
    assert check_feasibility(_two(450, 450, linked=False), [0, 1], task) == (False, "disconnected group")
    ok, reason = check_feasibility(_two(100, 100), [0, 1], task)
    assert not ok and reason.startswith("insufficient memory")


@pytest.mark.parametrize(
    "text, match",
    [
        ("{", "malformed"),
        ("{}", "array"),
        ('[{"name": "a"}]', "need name and params"),
        ('[{"name": "a", "params": 1, "x": 2}]', "unknown task keys"),
        ('[{"name": "a", "params": "big"}]', "integer"),
        ('[{"name": "a", "params": 1}, {"name": "a", "params": 2}]', "duplicate"),
        ('[{"name": "a", "params": 0}]', "positive"),
    ],
)
def test_parse_tasks_errors(text, match):
    with pytest.raises(SchedulerError, match=match):
        parse_tasks(text)


def test_parse_tasks_accepts_float_integers():
    (t,) = parse_tasks(json.dumps([{"name": "opt", "params": 1.75e11, "min_memory_gb": 10}]))
    assert t.param_count == 175_000_000_000 and t.min_memory_gb == 10.0


def test_single_task_takes_everything(demo8):
    model = build_model(FeatureConfig.from_graph(demo8), 1, hidden_dim=16)
    a = assign_tasks(demo8, model, [TaskSpec("only", 1_000_000)])
    assert a.groups == {"only": sorted(demo8.ids)} and a.leftovers == []


def test_insufficient_aggregate_memory(demo8):
    model = build_model(FeatureConfig.from_graph(demo8), 2, hidden_dim=16)
    huge = [TaskSpec("a", 10**13), TaskSpec("b", 10**6)]
    with pytest.raises(SchedulerError, match="insufficient aggregate memory"):
        assign_tasks(demo8, model, huge)


def test_model_with_too_few_classes(demo8, tasks4):
    model = build_model(FeatureConfig.from_graph(demo8), 2, hidden_dim=16)
    with pytest.raises(SchedulerError, match="classes"):
        assign_tasks(demo8, model, tasks4)


def test_demo_plan(demo8, tasks2, planner8):
    a = assign_tasks(demo8, planner8, tasks2)
    assert a.waiting == []
    assert [len(a.groups[t.name]) for t in tasks2] == [7, 1]
    for t in tasks2:
        assert check_feasibility(demo8, a.groups[t.name], t)[0]


def test_split_off_is_connected(demo8, planner8):
    for size in range(1, 9):
        grp = split_off(demo8, planner8, demo8.ids, 1, size)
        assert len(grp) == size and demo8.is_connected(grp)


def test_tasks_wait_when_memory_runs_out():
    # 40 GB covers both tasks in aggregate, but once the big task holds three
    # 10 GB machines the last one cannot host the 15 GB task
    nodes = tuple(MachineNode(i, "A", 8, 10) for i in range(4))
    edges = tuple(CommEdge(i, i + 1, 1.0) for i in range(3))
    g = ClusterGraph(nodes, edges)
    tasks = [TaskSpec("big", 100, min_memory_gb=25), TaskSpec("small", 1, min_memory_gb=15)]
    for seed in range(5):
        model = build_model(FeatureConfig.from_graph(g), 2, hidden_dim=8, seed=seed)
        a = assign_tasks(g, model, tasks)
        assert len(a.groups["big"]) == 3 and check_feasibility(g, a.groups["big"], tasks[0])[0]
        assert a.waiting == ["small"] and len(a.leftovers) == 1


def test_to_dict(demo8, tasks2, planner8):
    d = assign_tasks(demo8, planner8, tasks2).to_dict()
    assert set(d) == {"groups", "leftovers", "waiting"}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 12), st.integers(0, 100))
def test_any_model_gives_valid_assignment(seed, n, model_seed):
    g = random_graph(seed, n)
    tasks = [TaskSpec("a", 3 * 10**9), TaskSpec("b", 10**9), TaskSpec("c", 10**8)]
    model = build_model(FeatureConfig.from_graph(g), 3, hidden_dim=8, edge_dim=4, seed=model_seed)
    a = assign_tasks(g, model, tasks)
    seen: set[int] = set()
    for name, grp in a.groups.items():
        assert not seen & set(grp)
        seen |= set(grp)
        task = next(t for t in tasks if t.name == name)
        assert check_feasibility(g, grp, task)[0]
    assert seen | set(a.leftovers) == set(g.ids)
    assert not seen & set(a.leftovers)
    assert set(a.groups) | set(a.waiting) == {t.name for t in tasks}


def test_replan_after_member_failure(demo8, tasks2, planner8):
    for failed in demo8.ids:
        a = replan_after_failure(demo8, planner8, tasks2, failed)
        for t in tasks2:
            grp = a.groups.get(t.name)
            assert failed not in (grp or [])
            assert grp is None and t.name in a.waiting or check_feasibility(demo8, grp, t)[0]


def test_replan_after_isolated_leftover_failure(demo8, tasks2, planner8):
    g = add_machine(demo8, MachineNode(45, "Atlantis", 1, 0.5))
    a = assign_tasks(g, planner8, tasks2)
    assert 45 in a.leftovers
    assert replan_after_failure(g, planner8, tasks2, 45).groups == a.groups


def test_remove_then_readd_same_groups(demo8, tasks2, planner8):
    base = assign_tasks(demo8, planner8, tasks2)
    for nid in demo8.ids:
        links = [(e.b if e.a == nid else e.a, e.ms_per_64b) for e in demo8.edges if nid in (e.a, e.b)]
        g = add_machine(remove_machine(demo8, nid), demo8.node(nid), links)
        assert assign_tasks(g, planner8, tasks2).groups == base.groups


def test_node_45_joins_and_scheduling_still_succeeds(demo8, tasks2, planner8):
    g = add_machine(demo8, MachineNode(45, "Rome", 7, 384), [(4, 19.0), (6, 2.0), (7, 21.0)])
    a = assign_tasks(g, planner8, tasks2)
    assert a.waiting == []
    assert sum(len(v) for v in a.groups.values()) + len(a.leftovers) == 9
    assert np.all([check_feasibility(g, a.groups[t.name], t)[0] for t in tasks2])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 10), st.floats(1.0, 500.0))
def test_extra_machine_never_breaks_precheck(seed, n, mem):
    g = random_graph(seed, n)
    tasks = [TaskSpec("a", 6 * 10**10), TaskSpec("b", 10**10)]
    model = build_model(FeatureConfig.from_graph(g), 2, hidden_dim=8, edge_dim=4)
    try:
        assign_tasks(g, model, tasks)
    except SchedulerError:
        return
    bigger = add_machine(g, MachineNode(n, "Tokyo", 7.0, mem), [(0, 10.0)])
    assign_tasks(bigger, model, tasks)


def test_assignment_is_deterministic(demo46, tasks4):
    model = build_model(FeatureConfig.from_graph(demo46), 4, hidden_dim=16, seed=2)
    assert assign_tasks(demo46, model, tasks4) == assign_tasks(demo46, model, tasks4)
