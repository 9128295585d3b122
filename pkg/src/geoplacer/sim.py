"""Deterministic communication / computation cost model.

Transfer time is linear in 64-byte chunks: ``ceil(bytes / 64) * ms_per_64b``.
When two consecutive machines in a ring or pipeline share no direct link the
message is relayed along the cheapest path through the fleet.

Strategies:

* ``A`` data parallel: machines that fit the whole model, ring all-reduce of
  the gradients in id order.
* ``B`` pipeline: every machine is a stage, id order, layers split by memory.
* ``C`` tensor parallel: every machine, two activation all-reduces per layer.
* grouped (CSV label ``Hulk``): the pipeline rule applied only to the task's planned group, with
  a nearest-neighbour stage chain.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from geoplacer.cluster import ClusterGraph, CommEdge, MachineNode
from geoplacer.gnn import GnnModel
from geoplacer.scheduler import DEFAULT_OVERHEAD, Assignment, TaskSpec, assign_tasks

CHUNK_BYTES = 64
CSV_HEADER = ("strategy", "task", "comm_ms", "compute_ms", "total_ms")


class SimError(ValueError):
    pass


class Strategy(enum.Enum):
    DATA_PARALLEL = "A"
    PIPELINE = "B"
    TENSOR_PARALLEL = "C"
    GROUPED = "Hulk"


STRATEGY_ORDER = (
    Strategy.DATA_PARALLEL,
    Strategy.PIPELINE,
    Strategy.TENSOR_PARALLEL,
    Strategy.GROUPED,
)


@dataclass(frozen=True)
class CostModelConfig:
    # none of these come from measurements; they only set the scale of the numbers
    tokens_per_step: int = 4096
    micro_batches: int = 4
    activation_bytes_per_boundary: float = 65536.0
    flops_per_param_token: float = 6.0
    tflops_per_compute_unit: float = 10.0
    num_layers: int = 24
    memory_overhead: float = DEFAULT_OVERHEAD

    def __post_init__(self) -> None:
        for name in (
            "tokens_per_step",
            "micro_batches",
            "activation_bytes_per_boundary",
            "flops_per_param_token",
            "tflops_per_compute_unit",
            "num_layers",
            "memory_overhead",
        ):
            if not getattr(self, name) > 0:
                raise SimError(f"{name} must be positive")


@dataclass(frozen=True)
class TaskReport:
    strategy: Strategy
    task: str
    comm_ms: float
    compute_ms: float
    nodes: tuple[int, ...] = ()
    note: str = ""

    @property
    def total_ms(self) -> float:
        # no compute/communication overlap is modelled
        return self.comm_ms + self.compute_ms


@dataclass
class SimReport:
    rows: list[TaskReport] = field(default_factory=list)
    assignment: Assignment | None = None

    def total(self, strategy: Strategy, what: str = "comm_ms") -> float:
        return float(sum(getattr(r, what) for r in self.rows if r.strategy is strategy))

    def cell(self, strategy: Strategy, task: str) -> TaskReport:
        for r in self.rows:
            if r.strategy is strategy and r.task == task:
                return r
        raise KeyError((strategy, task))

    def to_csv(self, preamble: str | None = None) -> str:
        buf = io.StringIO()
        if preamble:
            buf.write(f"# {preamble}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(
                [r.strategy.value, r.task, _fmt(r.comm_ms), _fmt(r.compute_ms), _fmt(r.total_ms)]
            )
        return buf.getvalue()

    def grouped_reduction(self) -> float:
        """Percent by which the grouped plan's total comm undercuts the best baseline."""
        base = min(self.total(s) for s in STRATEGY_ORDER[:3])
        ours = self.total(Strategy.GROUPED)
        if not math.isfinite(base) or base == 0:
            return 0.0 if ours == base else -math.inf
        return 100.0 * (base - ours) / base


def _fmt(v: float) -> str:
    return f"{v:.3f}" if math.isfinite(v) else "inf"


# -- timing primitives ---------------------------------------------------------


def _chunks(nbytes: float) -> int:
    return math.ceil(nbytes / CHUNK_BYTES) if nbytes > 0 else 0


def transfer_time(g: ClusterGraph, a: int, b: int, nbytes: float) -> float:
    """Milliseconds to push ``nbytes`` over the direct link a-b."""
    lat = g.latency(a, b)
    if lat is None:
        raise SimError(f"machines {a} and {b} are not connected")
    return _chunks(nbytes) * lat


def hop_ms(g: ClusterGraph, a: int, b: int) -> float:
    """Per-64-byte cost between two machines, relaying when there is no direct link."""
    lat = g.latency(a, b)
    if lat is not None:
        return lat
    d = g.shortest_paths[g.index[a], g.index[b]]
    if not math.isfinite(d):
        raise SimError(f"no route between machines {a} and {b}")
    return float(d)


def _hop_transfer(g: ClusterGraph, a: int, b: int, nbytes: float) -> float:
    return _chunks(nbytes) * hop_ms(g, a, b)


def chain_cost(g: ClusterGraph, order: Sequence[int]) -> float:
    """Sum of per-64-byte hop costs along consecutive stages."""
    return math.fsum(hop_ms(g, a, b) for a, b in zip(order[:-1], order[1:]))


def nearest_neighbour_chain(g: ClusterGraph, ids: Iterable[int]) -> list[int]:
    """Start at the machine with the most memory and keep stepping to the
    closest unvisited machine. Ties go to the lower id."""
    left = sorted(set(ids))
    if not left:
        return []
    start = min(left, key=lambda i: (-g.node(i).memory_gb, i))
    order = [start]
    left.remove(start)
    while left:
        cur = order[-1]
        nxt = min(left, key=lambda i: (hop_ms(g, cur, i), i))
        order.append(nxt)
        left.remove(nxt)
    return order


def stage_order(g: ClusterGraph, ids: Iterable[int]) -> list[int]:
    """Stage order for a planned group: the nearest-neighbour chain, unless plain
    id order is strictly cheaper."""
    ids = sorted(set(ids))
    chain = nearest_neighbour_chain(g, ids)
    return ids if chain_cost(g, ids) < chain_cost(g, chain) else chain


def ring_allreduce_ms(g: ClusterGraph, order: Sequence[int], nbytes: float) -> float:
    """2(n-1) steps of nbytes/n each, every step paced by the slowest ring hop."""
    n = len(order)
    if n <= 1:
        return 0.0
    hops = list(zip(order[:-1], order[1:]))
    if n > 2:
        hops.append((order[-1], order[0]))
    slowest = max(hop_ms(g, a, b) for a, b in hops)
    return 2 * (n - 1) * _chunks(nbytes / n) * slowest


def pipeline_comm_ms(g: ClusterGraph, order: Sequence[int], cfg: CostModelConfig) -> float:
    # forward activations + backward gradients, once per micro-batch; fsum keeps
    # the result independent of traversal direction
    per_boundary = 2 * cfg.micro_batches
    return math.fsum(
        per_boundary * _hop_transfer(g, a, b, cfg.activation_bytes_per_boundary)
        for a, b in zip(order[:-1], order[1:])
    )


def _throughput(node: MachineNode, cfg: CostModelConfig) -> float:
    return node.compute * cfg.tflops_per_compute_unit * 1e12


def task_flops(task: TaskSpec, tokens: float, cfg: CostModelConfig) -> float:
    return cfg.flops_per_param_token * task.param_count * tokens


def pipeline_compute_ms(
    g: ClusterGraph, order: Sequence[int], task: TaskSpec, cfg: CostModelConfig
) -> float:
    nodes = [g.node(i) for i in order]
    flops = task_flops(task, cfg.tokens_per_step, cfg)
    mem = sum(n.memory_gb for n in nodes)
    seconds = sum(flops * n.memory_gb / mem / _throughput(n, cfg) for n in nodes)
    fill = (cfg.micro_batches + len(nodes) - 1) / cfg.micro_batches
    return 1e3 * seconds * fill


def simulate(
    g: ClusterGraph,
    task: TaskSpec,
    strategy: Strategy,
    cfg: CostModelConfig = CostModelConfig(),
    group: Iterable[int] | None = None,
) -> TaskReport:
    """Cost of one task under one strategy. ``group`` is required for the grouped strategy
    and ignored otherwise (the baselines use the whole fleet)."""
    ids = sorted(g.ids)
    if strategy is Strategy.DATA_PARALLEL:
        need = task.required_memory_gb(cfg.memory_overhead)
        ring = [i for i in ids if g.node(i).memory_gb >= need]
        if not ring:
            raise SimError(f"{task.name}: no single machine holds {need:.1f} GB")
        comm = ring_allreduce_ms(g, ring, task.model_bytes)
        slowest = min(g.node(i).compute for i in ring)
        flops = task_flops(task, cfg.tokens_per_step / len(ring), cfg)
        compute = 1e3 * flops / (slowest * cfg.tflops_per_compute_unit * 1e12)
        excluded = len(ids) - len(ring)
        note = f"excluded {excluded} machines" if excluded else ""
        return TaskReport(strategy, task.name, comm, compute, tuple(ring), note)
    if strategy is Strategy.PIPELINE:
        return TaskReport(
            strategy,
            task.name,
            pipeline_comm_ms(g, ids, cfg),
            pipeline_compute_ms(g, ids, task, cfg),
            tuple(ids),
        )
    if strategy is Strategy.TENSOR_PARALLEL:
        comm = cfg.num_layers * 2 * ring_allreduce_ms(g, ids, cfg.activation_bytes_per_boundary)
        agg = sum(_throughput(g.node(i), cfg) for i in ids)
        compute = 1e3 * task_flops(task, cfg.tokens_per_step, cfg) / agg
        return TaskReport(strategy, task.name, comm, compute, tuple(ids))
    if group is None:
        raise SimError("the grouped strategy needs a planned group")
    order = stage_order(g, group)
    if not order:
        raise SimError(f"{task.name}: empty group")
    return TaskReport(
        strategy,
        task.name,
        pipeline_comm_ms(g, order, cfg),
        pipeline_compute_ms(g, order, task, cfg),
        tuple(order),
    )


def compare(
    g: ClusterGraph,
    model: GnnModel,
    tasks: Sequence[TaskSpec],
    cfg: CostModelConfig = CostModelConfig(),
    assignment: Assignment | None = None,
) -> SimReport:
    """Every (strategy, task) cell in fixed order: strategies A, B, C, grouped,
    tasks in manifest order. Cells that cannot run report ``inf``."""
    report = SimReport()
    if not tasks:
        return report
    if assignment is None:
        assignment = assign_tasks(g, model, tasks, cfg.memory_overhead)
    report.assignment = assignment
    for strategy in STRATEGY_ORDER:
        for task in tasks:
            group = assignment.groups.get(task.name)
            if strategy is Strategy.GROUPED and group is None:
                report.rows.append(TaskReport(strategy, task.name, math.inf, math.inf, (), "waiting"))
                continue
            try:
                report.rows.append(simulate(g, task, strategy, cfg, group))
            except SimError as exc:
                report.rows.append(TaskReport(strategy, task.name, math.inf, math.inf, (), str(exc)))
    return report


# -- synthetic fleets ----------------------------------------------------------

# Measured ms per 64 bytes from three source regions; None = cannot communicate.
MEASURED_LATENCY = {
    "Beijing": {"California": 89.1, "Tokyo": 74.3, "Berlin": 250.5, "London": 229.8,
                "New Delhi": 341.9, "Paris": None, "Rome": 296.0, "Brasilia": 341.8},
    "Nanjing": {"California": 97.9, "Tokyo": 173.8, "Berlin": 213.7, "London": 176.7,
                "New Delhi": 236.3, "Paris": 265.1, "Rome": 741.3, "Brasilia": 351.3},
    "California": {"California": 1.0, "Tokyo": 118.8, "Berlin": 144.8, "London": 132.3,
                   "New Delhi": 197.0, "Paris": 133.9, "Rome": 158.6, "Brasilia": 158.6},
}

FLEET_REGIONS = (
    "Beijing", "Nanjing", "California", "Tokyo", "Berlin",
    "London", "New Delhi", "Paris", "Rome", "Brasilia",
)

# (name, compute capability, GB per GPU)
GPU_ROSTER = (
    ("A100", 8.0, 80.0),
    ("A40", 8.6, 48.0),
    ("V100", 7.0, 32.0),
    ("RTX A5000", 8.6, 24.0),
    ("GTX 1080Ti", 6.1, 11.0),
    ("RTX 3090", 8.6, 24.0),
    ("TITAN Xp", 6.1, 12.0),
)
GPUS_PER_MACHINE = (4, 8, 8, 12)


def region_latency_table(
    measured: dict[str, dict[str, float | None]] = MEASURED_LATENCY,
    regions: Sequence[str] = FLEET_REGIONS,
) -> dict[tuple[str, str], float | None]:
    """Symmetric inter-region table. Pairs that were never measured get the
    cheapest one-relay route through a measured region; pairs measured as
    unreachable stay None. Same-region entries are omitted."""
    known: dict[tuple[str, str], float | None] = {}
    for a, row in measured.items():
        for b, v in row.items():
            if a != b:
                known[(a, b)] = known[(b, a)] = v
    table: dict[tuple[str, str], float | None] = {}
    for i, a in enumerate(regions):
        for b in regions[i + 1 :]:
            if (a, b) in known:
                v = known[(a, b)]
            else:
                relays = [
                    known[(a, k)] + known[(k, b)]
                    for k in regions
                    if known.get((a, k)) is not None and known.get((k, b)) is not None
                ]
                v = min(relays) if relays else None
            table[(a, b)] = table[(b, a)] = v
    return table


def generate_fleet(
    seed: int,
    n: int,
    table: dict[tuple[str, str], float | None] | None = None,
    *,
    regions: Sequence[str] = FLEET_REGIONS,
    drop_fraction: float = 0.05,
    jitter: float = 0.10,
    intra_range: tuple[float, float] = (1.0, 5.0),
) -> ClusterGraph:
    """Seeded synthetic fleet. Ids are handed out region by region."""
    if n < 1:
        raise SimError("fleet needs at least one machine")
    table = region_latency_table(regions=regions) if table is None else table
    rng = np.random.default_rng(seed)
    region_idx = np.sort(rng.integers(0, len(regions), size=n))
    nodes = []
    for i, r in enumerate(region_idx):
        _, cc, gb = GPU_ROSTER[rng.integers(len(GPU_ROSTER))]
        count = GPUS_PER_MACHINE[rng.integers(len(GPUS_PER_MACHINE))]
        nodes.append(MachineNode(i, regions[r], cc, count * gb))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            a, b = nodes[i].region, nodes[j].region
            # draw every number for every pair so one pair's outcome never shifts another's
            u_drop, u_lat = rng.random(2)
            if a == b:
                lat = intra_range[0] + u_lat * (intra_range[1] - intra_range[0])
            else:
                base = table[(a, b)]
                if base is None:
                    continue
                lat = base * (1.0 - jitter + 2 * jitter * u_lat)
            if u_drop < drop_fraction:
                continue
            edges.append(CommEdge(i, j, round(lat, 1)))
    return ClusterGraph(tuple(nodes), tuple(edges))
