import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoplacer.cluster import FeatureConfig
from geoplacer.labels import (
    LabelError,
    heuristic_groups,
    labels_to_json,
    latency_clusters,
    parse_labels,
    placement_sequence,
    synthetic_labels,
)
from geoplacer.scheduler import TaskSpec, check_feasibility, class_index, size_classes
from geoplacer.sim import generate_fleet
from geoplacer.training import build_training_set, peel_sequence


def test_demo_clusters(demo8):
    # fastest link 9.3 (London-Paris); the Berlin/London/Rome/Paris block is
    # inside 5x of it, Beijing-Nanjing at 30 is too
    clusters = sorted(latency_clusters(demo8))
    assert clusters == [[0, 1], [2], [3], [4, 5, 6, 7]]


def test_sequence_is_a_permutation(demo46):
    seq = placement_sequence(demo46)
    assert sorted(seq) == sorted(demo46.ids)


def test_demo_labels(demo8, tasks2):
    y, mask = synthetic_labels(demo8, tasks2)
    assert mask.all()
    cls = class_index(tasks2)
    counts = [int((y == cls[t.name]).sum()) for t in tasks2]
    assert counts == size_classes(tasks2, 8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5000), st.integers(4, 30))
def test_heuristic_groups_partition_the_fleet(seed, n):
    g = generate_fleet(seed, n)
    tasks = [TaskSpec("a", 10**10), TaskSpec("b", 2 * 10**9)]
    groups = heuristic_groups(g, tasks)
    assert sorted(sum(groups.values(), [])) == sorted(g.ids)
    assert [len(groups[t.name]) for t in tasks] == size_classes(tasks, n)


def test_labels_round_trip(demo8, tasks2):
    y, mask = synthetic_labels(demo8, tasks2)
    text = labels_to_json(demo8, y, 2)
    y2, mask2, k = parse_labels(text, demo8)
    assert k == 2 and (y2 == y).all() and (mask2 == mask).all()


def test_partial_label_file(demo8):
    y, mask, k = parse_labels(json.dumps({"labels": {"0": 1, "3": 0}, "num_classes": 2}), demo8)
    assert mask.sum() == 2 and y[demo8.index[0]] == 1 and k == 2


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"labels": {}}, "exactly"),
        ({"labels": {"0": 5}, "num_classes": 2}, "outside"),
        ({"labels": {"99": 0}, "num_classes": 2}, "unknown node"),
        ({"labels": {"x": 0}, "num_classes": 2}, "bad node id"),
        ({"labels": {}, "num_classes": 0}, "positive"),
    ],
)
def test_bad_label_files(demo8, doc, match):
    with pytest.raises(LabelError, match=match):
        parse_labels(json.dumps(doc), demo8)


def test_peel_sequence_shrinks(demo46, tasks4):
    y, _ = synthetic_labels(demo46, tasks4)
    graphs = peel_sequence(demo46, y, 4)
    assert [len(h) for h in graphs] == [46, 4, 2, 1]


def test_training_set_stacks_every_residual(demo46, tasks4):
    y, mask = synthetic_labels(demo46, tasks4)
    ts = build_training_set(demo46, y, mask, 4, FeatureConfig.from_graph(demo46))
    assert ts.x.shape[0] == ts.labels.shape[0] == ts.tensors.n == 46 + 4 + 2 + 1
    assert np.array_equal(ts.tensors.norm_adj[:46, 46:], np.zeros((46, 7)))


def test_labeller_groups_are_feasible_on_fleets(tasks4):
    for seed in range(5):
        g = generate_fleet(seed, 46)
        groups = heuristic_groups(g, tasks4)
        for t in tasks4:
            assert check_feasibility(g, groups[t.name], t)[0]
