from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from geoplacer.cluster import ClusterGraph, CommEdge, MachineNode, parse_cluster
from geoplacer.scheduler import parse_tasks

DEMO = Path(__file__).resolve().parent.parent / "demo"
REGIONS = ("Beijing", "Nanjing", "California", "Tokyo", "Berlin")


def random_graph(seed: int, n: int, p: float = 0.6) -> ClusterGraph:
    """Connected random graph: a spanning path plus random extra edges."""
    rng = np.random.default_rng(seed)
    nodes = tuple(
        MachineNode(i, REGIONS[rng.integers(len(REGIONS))], float(rng.uniform(5, 9)),
                    float(rng.choice([48.0, 96.0, 192.0, 384.0])))
        for i in range(n)
    )
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or rng.random() < p:
                edges.append(CommEdge(i, j, float(np.round(rng.uniform(1, 300), 1))))
    return ClusterGraph(nodes, tuple(edges))


@pytest.fixture(scope="session")
def demo8() -> ClusterGraph:
    return parse_cluster((DEMO / "cluster8.json").read_text())


@pytest.fixture(scope="session")
def demo46() -> ClusterGraph:
    return parse_cluster((DEMO / "cluster46.json").read_text())


@pytest.fixture(scope="session")
def tasks2():
    return parse_tasks((DEMO / "tasks2.json").read_text())


@pytest.fixture(scope="session")
def tasks4():
    return parse_tasks((DEMO / "tasks4.json").read_text())


@pytest.fixture(scope="session")
def tasks6():
    return parse_tasks((DEMO / "tasks6.json").read_text())


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
