"""Machine fleet as a latency-weighted undirected graph.

Nodes are machines (region, compute score, total GPU memory); edges carry the
time in milliseconds to push one 64-byte message between two machines. A
missing edge means the pair cannot talk directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

# Regions that appear in the measured latency table; anything else maps to the
# "unknown" slot of the one-hot block.
DEFAULT_REGIONS = (
    "Beijing",
    "Nanjing",
    "California",
    "Tokyo",
    "Berlin",
    "London",
    "New Delhi",
    "Paris",
    "Rome",
    "Brasilia",
)

_NODE_KEYS = {"id", "region", "compute", "memory_gb"}
_EDGE_KEYS = {"a", "b", "ms_per_64b"}


class ClusterError(ValueError):
    """Raised for malformed cluster files and invalid graph mutations."""


@dataclass(frozen=True)
class MachineNode:
    id: int
    region: str
    compute: float
    memory_gb: float


@dataclass(frozen=True)
class CommEdge:
    a: int
    b: int
    ms_per_64b: float

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.a, self.b), max(self.a, self.b))


@dataclass(frozen=True, eq=False)
class ClusterGraph:
    """Immutable machine graph. Mutators return new graphs.

    ``weights[i, j]`` is the latency between the machines at positions i and j
    (0 when unconnected); ``mask[i, j]`` says whether the pair is connected at
    all, so a genuine tiny latency never reads as "no edge".
    """

    nodes: tuple[MachineNode, ...]
    edges: tuple[CommEdge, ...] = ()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClusterGraph):
            return NotImplemented
        if {n.id: n for n in self.nodes} != {n.id: n for n in other.nodes}:
            return False
        return _edge_map(self.edges) == _edge_map(other.edges)

    __hash__ = None  # type: ignore[assignment]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    @cached_property
    def index(self) -> dict[int, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def node(self, node_id: int) -> MachineNode:
        try:
            return self.nodes[self.index[node_id]]
        except KeyError:
            raise ClusterError(f"unknown machine id {node_id}") from None

    @cached_property
    def weights(self) -> np.ndarray:
        n = len(self.nodes)
        w = np.zeros((n, n))
        for e in self.edges:
            i, j = self.index.get(e.a), self.index.get(e.b)
            if i is None or j is None or i == j:
                continue
            w[i, j] = w[j, i] = e.ms_per_64b
        w.setflags(write=False)
        return w

    @cached_property
    def mask(self) -> np.ndarray:
        n = len(self.nodes)
        m = np.zeros((n, n), dtype=bool)
        for e in self.edges:
            i, j = self.index.get(e.a), self.index.get(e.b)
            if i is None or j is None or i == j:
                continue
            m[i, j] = m[j, i] = True
        m.setflags(write=False)
        return m

    @property
    def degree(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def max_latency(self) -> float:
        return float(self.weights.max()) if self.edges else 0.0

    def latency(self, a: int, b: int) -> float | None:
        """Direct latency between two machines, or None when unconnected."""
        i, j = self.index[a], self.index[b]
        return float(self.weights[i, j]) if self.mask[i, j] else None

    def neighbors(self, node_id: int) -> list[int]:
        row = self.mask[self.index[node_id]]
        return [self.nodes[j].id for j in np.flatnonzero(row)]

    def total_memory(self, ids: Iterable[int] | None = None) -> float:
        if ids is None:
            return float(sum(n.memory_gb for n in self.nodes))
        return float(sum(self.node(i).memory_gb for i in ids))

    def subgraph(self, ids: Iterable[int]) -> ClusterGraph:
        """Induced subgraph; keeps this graph's node order."""
        keep = set(ids)
        nodes = tuple(n for n in self.nodes if n.id in keep)
        edges = tuple(e for e in self.edges if e.a in keep and e.b in keep)
        return ClusterGraph(nodes, edges)

    def is_connected(self, ids: Iterable[int] | None = None) -> bool:
        g = self if ids is None else self.subgraph(ids)
        if len(g) == 0:
            return False
        n_comp, _ = connected_components(csr_matrix(g.mask), directed=False)
        return n_comp == 1

    @cached_property
    def shortest_paths(self) -> np.ndarray:
        """All-pairs minimum relay latency (inf where no path exists)."""
        if len(self.nodes) == 0:
            return np.zeros((0, 0))
        dist = dijkstra(csr_matrix(np.where(self.mask, self.weights, 0.0)), directed=False)
        dist.setflags(write=False)
        return dist

    def scaled(self, factor: float) -> ClusterGraph:
        """Same topology with every latency multiplied by ``factor``."""
        return ClusterGraph(
            self.nodes, tuple(CommEdge(e.a, e.b, e.ms_per_64b * factor) for e in self.edges)
        )


def _edge_map(edges: Iterable[CommEdge]) -> dict[tuple[int, int], float]:
    return {e.key: e.ms_per_64b for e in edges}


def _positive(x: float) -> bool:
    return math.isfinite(x) and x > 0


def validate(g: ClusterGraph) -> list[str]:
    """Return every broken graph invariant as a human-readable line."""
    out: list[str] = []
    if not g.nodes:
        out.append("empty cluster")
    seen: set[int] = set()
    for n in g.nodes:
        if n.id in seen:
            out.append(f"duplicate node id {n.id}")
        seen.add(n.id)
        if n.id < 0:
            out.append(f"negative node id {n.id}")
        if not n.region:
            out.append(f"empty region at {n.id}")
        if not _positive(n.compute):
            out.append(f"non-positive compute at {n.id}")
        if not _positive(n.memory_gb):
            out.append(f"non-positive memory at {n.id}")
    pairs: dict[tuple[int, int], float] = {}
    for e in g.edges:
        if e.a == e.b:
            out.append(f"self-loop at {e.a}")
            continue
        for end in (e.a, e.b):
            if end not in seen:
                out.append(f"edge ({e.a},{e.b}) references unknown node {end}")
        if not _positive(e.ms_per_64b):
            out.append(f"non-positive latency on ({e.a},{e.b})")
        if e.key in pairs:
            out.append(f"duplicate edge ({e.a},{e.b})")
        pairs[e.key] = e.ms_per_64b
    return out


def _checked(g: ClusterGraph) -> ClusterGraph:
    problems = validate(g)
    if problems:
        raise ClusterError("; ".join(problems))
    return g


def _expect_keys(obj: object, keys: set[str], what: str) -> dict:
    if not isinstance(obj, dict):
        raise ClusterError(f"{what} must be an object")
    extra = set(obj) - keys
    if extra:
        raise ClusterError(f"unknown keys in {what}: {sorted(extra)}")
    missing = keys - set(obj)
    if missing:
        raise ClusterError(f"missing keys in {what}: {sorted(missing)}")
    return obj


def _number(v: object, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ClusterError(f"{what} must be a number")
    return float(v)


def _integer(v: object, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ClusterError(f"{what} must be an integer")
    return v


def parse_cluster(text: str, *, check: bool = True) -> ClusterGraph:
    """Parse cluster-file JSON into a graph (node order = file order).

    With ``check=False`` only the file structure is enforced, so callers can
    list graph violations themselves via :func:`validate`.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ClusterError(f"malformed cluster file: {exc}") from exc
    doc = _expect_keys(doc, {"nodes", "edges"}, "cluster file")
    if not isinstance(doc["nodes"], list) or not isinstance(doc["edges"], list):
        raise ClusterError("nodes and edges must be arrays")
    if check and not doc["nodes"]:
        raise ClusterError("empty cluster")

    nodes = []
    for raw in doc["nodes"]:
        raw = _expect_keys(raw, _NODE_KEYS, "node")
        if not isinstance(raw["region"], str):
            raise ClusterError("region must be a string")
        nodes.append(
            MachineNode(
                id=_integer(raw["id"], "node id"),
                region=raw["region"],
                compute=_number(raw["compute"], "compute"),
                memory_gb=_number(raw["memory_gb"], "memory_gb"),
            )
        )

    edges: dict[tuple[int, int], CommEdge] = {}
    for raw in doc["edges"]:
        raw = _expect_keys(raw, _EDGE_KEYS, "edge")
        e = CommEdge(
            _integer(raw["a"], "edge endpoint"),
            _integer(raw["b"], "edge endpoint"),
            _number(raw["ms_per_64b"], "ms_per_64b"),
        )
        prev = edges.get(e.key)
        if prev is not None:
            if prev.ms_per_64b != e.ms_per_64b:
                raise ClusterError(
                    f"conflicting latencies for ({e.a},{e.b}): {prev.ms_per_64b} vs {e.ms_per_64b}"
                )
            continue
        edges[e.key] = e
    g = ClusterGraph(tuple(nodes), tuple(edges.values()))
    return _checked(g) if check else g


def cluster_to_dict(g: ClusterGraph) -> dict:
    nodes = sorted(g.nodes, key=lambda n: n.id)
    edges = sorted(g.edges, key=lambda e: e.key)
    return {
        "nodes": [
            {"id": n.id, "region": n.region, "compute": n.compute, "memory_gb": n.memory_gb}
            for n in nodes
        ],
        "edges": [{"a": e.key[0], "b": e.key[1], "ms_per_64b": e.ms_per_64b} for e in edges],
    }


def serialize_cluster(g: ClusterGraph) -> str:
    """Canonical form: nodes by id, edges by (min, max) endpoint."""
    return json.dumps(cluster_to_dict(g), indent=2) + "\n"


def add_machine(
    g: ClusterGraph, m: MachineNode, links: Sequence[tuple[int, float]] = ()
) -> ClusterGraph:
    if m.id in g.index:
        raise ClusterError(f"duplicate machine id {m.id}")
    new_edges = []
    for peer, ms in links:
        if peer not in g.index:
            raise ClusterError(f"unknown peer {peer}")
        if not _positive(ms):
            raise ClusterError(f"non-positive latency on ({m.id},{peer})")
        new_edges.append(CommEdge(m.id, peer, float(ms)))
    return _checked(ClusterGraph(g.nodes + (m,), g.edges + tuple(new_edges)))


def remove_machine(g: ClusterGraph, node_id: int) -> ClusterGraph:
    if node_id not in g.index:
        raise ClusterError(f"unknown machine id {node_id}")
    nodes = tuple(n for n in g.nodes if n.id != node_id)
    edges = tuple(e for e in g.edges if node_id not in (e.a, e.b))
    return ClusterGraph(nodes, edges)


@dataclass(frozen=True)
class FeatureConfig:
    """Region vocabulary and the maxima used to scale numeric features."""

    regions: tuple[str, ...] = DEFAULT_REGIONS
    max_compute: float = 1.0
    max_memory: float = 1.0

    @classmethod
    def from_graph(cls, g: ClusterGraph, regions: Sequence[str] = DEFAULT_REGIONS) -> FeatureConfig:
        return cls(
            tuple(regions),
            max(n.compute for n in g.nodes),
            max(n.memory_gb for n in g.nodes),
        )

    @property
    def dim(self) -> int:
        return len(self.regions) + 3

    def to_dict(self) -> dict:
        return {
            "regions": list(self.regions),
            "max_compute": self.max_compute,
            "max_memory": self.max_memory,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeatureConfig:
        return cls(tuple(d["regions"]), float(d["max_compute"]), float(d["max_memory"]))


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    config: FeatureConfig

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


def embed_features(g: ClusterGraph, config: FeatureConfig | None = None) -> FeatureMatrix:
    """One-hot region block (+ unknown slot) followed by scaled compute and memory.

    Numeric columns are divided by the configured maxima and clipped to [0, 1]
    so graphs with bigger machines than the config saw still embed sanely.
    """
    cfg = config or FeatureConfig.from_graph(g)
    slot = {r: i for i, r in enumerate(cfg.regions)}
    unknown = len(cfg.regions)
    x = np.zeros((len(g.nodes), cfg.dim))
    for row, n in enumerate(g.nodes):
        x[row, slot.get(n.region, unknown)] = 1.0
        x[row, -2] = min(n.compute / cfg.max_compute, 1.0)
        x[row, -1] = min(n.memory_gb / cfg.max_memory, 1.0)
    return FeatureMatrix(x, cfg)
