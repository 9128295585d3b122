"""Command-line entry point: validate, train, assign, simulate, compare.

Exit codes: 0 success, 1 domain failure (invalid or infeasible input),
2 I/O or usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from geoplacer import __version__
from geoplacer.cluster import ClusterError, ClusterGraph, embed_features, parse_cluster, validate
from geoplacer.gnn import GnnError, GnnModel, TrainConfig, evaluate, load_model, save_model
from geoplacer.labels import LabelError, parse_labels, synthetic_labels
from geoplacer.scheduler import Assignment, SchedulerError, TaskSpec, assign_tasks, parse_tasks
from geoplacer.sim import STRATEGY_ORDER, CostModelConfig, SimError, SimReport, Strategy, compare, simulate
from geoplacer.training import fit_planner

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
DOMAIN_ERRORS = (ClusterError, SchedulerError, GnnError, SimError, LabelError)

_MANIFEST_KEYS = {"cluster", "tasks", "labels", "seed", "out", "train", "cost_model"}
_TRAIN_KEYS = {"learning_rate", "steps", "optimizer", "hidden_dim", "edge_dim", "peel"}


class UsageError(Exception):
    pass


@dataclass
class TrainSettings:
    learning_rate: float = 0.01
    steps: int = 50
    optimizer: str = "adam"
    hidden_dim: int = 410
    edge_dim: int = 16
    peel: bool = True


@dataclass
class RunManifest:
    cluster: Path
    tasks: Path
    labels: Path | None = None
    seed: int = 0
    out: Path = Path("out")
    train: TrainSettings = field(default_factory=TrainSettings)
    cost_model: CostModelConfig = field(default_factory=CostModelConfig)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.learning_rate, t.steps, self.seed, t.optimizer)


def _sub(raw: object, allowed: set[str], what: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise UsageError(f"{what} must be an object")
    extra = set(raw) - allowed
    if extra:
        raise UsageError(f"unknown keys in {what}: {sorted(extra)}")
    return raw


def load_manifest(path: Path) -> RunManifest:
    """Read a run manifest. Relative paths resolve against the manifest's directory."""
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed manifest {path}: {exc}") from exc
    doc = _sub(doc, _MANIFEST_KEYS, "manifest")
    for key in ("cluster", "tasks"):
        if not isinstance(doc.get(key), str):
            raise UsageError(f"manifest needs a '{key}' path")
    base = path.parent

    def resolve(p: str) -> Path:
        full = base / p
        if not full.is_file():
            raise UsageError(f"referenced file not found: {full}")
        return full

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise UsageError("seed must be a non-negative integer")
    cost_names = {f.name for f in fields(CostModelConfig)}
    try:
        train = TrainSettings(**_sub(doc.get("train"), _TRAIN_KEYS, "train"))
        cost = CostModelConfig(**_sub(doc.get("cost_model"), cost_names, "cost_model"))
    except (TypeError, SimError) as exc:
        raise UsageError(str(exc)) from exc
    return RunManifest(
        cluster=resolve(doc["cluster"]),
        tasks=resolve(doc["tasks"]),
        labels=resolve(doc["labels"]) if doc.get("labels") else None,
        seed=seed,
        out=base / doc.get("out", "out"),
        train=train,
        cost_model=cost,
    )


# -- helpers -------------------------------------------------------------------


def _stamp(seed: int) -> str:
    return f"geoplacer {__version__} seed={seed}"


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


def _inputs(m: RunManifest) -> tuple[ClusterGraph, list[TaskSpec]]:
    return parse_cluster(m.cluster.read_text()), parse_tasks(m.tasks.read_text())


def _labels(m: RunManifest, g: ClusterGraph, tasks: list[TaskSpec]) -> tuple[np.ndarray, np.ndarray, int]:
    if m.labels is not None:
        return parse_labels(m.labels.read_text(), g)
    y, mask = synthetic_labels(g, tasks)
    return y, mask, len(tasks)


def _checkpoint(m: RunManifest, arg: str | None) -> GnnModel:
    path = Path(arg) if arg else m.out / "model.ckpt"
    return load_model(path.read_bytes())


def _assignment_json(a: Assignment, seed: int) -> str:
    doc = {"version": __version__, "seed": seed, **a.to_dict(), "status": a.status}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- commands ------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        g = parse_cluster(Path(args.cluster).read_text(), check=False)
    except ClusterError as exc:
        print(exc)
        return EXIT_DOMAIN
    problems = validate(g)
    for line in problems:
        print(line)
    return EXIT_DOMAIN if problems else EXIT_OK


def cmd_train(args: argparse.Namespace, m: RunManifest) -> int:
    g, tasks = _inputs(m)
    y, mask, k = _labels(m, g, tasks)
    t = m.train
    model, trace = fit_planner(
        g, tasks, m.train_config(), labels=(y, mask), num_classes=k, peel=t.peel,
        hidden_dim=t.hidden_dim, edge_dim=t.edge_dim,
    )
    _, acc = evaluate(model, g, embed_features(g, model.features), y, mask)

    buf = io.StringIO()
    buf.write(f"# {_stamp(m.seed)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "accuracy"])
    for step, (loss, a) in enumerate(trace):
        w.writerow([step, f"{loss:.6f}", f"{a:.6f}"])
    _write(m.out / "trace.csv", buf.getvalue())
    _write(Path(args.checkpoint) if args.checkpoint else m.out / "model.ckpt", save_model(model))
    print(f"parameters: {model.param_count}")
    print(f"final accuracy: {acc:.4f}")
    return EXIT_OK


def _summarise(g: ClusterGraph, tasks: Sequence[TaskSpec], a: Assignment, overhead: float) -> None:
    for task in tasks:
        grp = a.groups.get(task.name)
        if grp is None:
            print(f"{task.name}: waiting")
            continue
        need = task.required_memory_gb(overhead)
        print(f"{task.name}: {len(grp)} machines, {g.total_memory(grp):.1f}/{need:.1f} GB, feasible")
    print(f"leftovers: {len(a.leftovers)}")


def cmd_assign(args: argparse.Namespace, m: RunManifest) -> int:
    g, tasks = _inputs(m)
    model = _checkpoint(m, args.checkpoint)
    a = assign_tasks(g, model, tasks, m.cost_model.memory_overhead)
    _write(m.out / "assignment.json", _assignment_json(a, m.seed))
    _summarise(g, tasks, a, m.cost_model.memory_overhead)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, m: RunManifest) -> int:
    g, tasks = _inputs(m)
    strategy = Strategy(args.strategy)
    report = SimReport()
    groups: dict[str, list[int]] = {}
    if strategy is Strategy.GROUPED:
        a = assign_tasks(g, _checkpoint(m, args.checkpoint), tasks, m.cost_model.memory_overhead)
        groups = a.groups
    for task in tasks:
        if strategy is Strategy.GROUPED and task.name not in groups:
            raise SchedulerError(f"{task.name} is waiting; nothing to simulate")
        report.rows.append(simulate(g, task, strategy, m.cost_model, groups.get(task.name)))
    _write(m.out / "simulate.csv", report.to_csv(_stamp(m.seed)))
    for r in report.rows:
        print(f"{r.task}: comm {r.comm_ms:.3f} ms, compute {r.compute_ms:.3f} ms")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, m: RunManifest) -> int:
    g, tasks = _inputs(m)
    report = compare(g, _checkpoint(m, args.checkpoint), tasks, m.cost_model)
    _write(m.out / "report.csv", report.to_csv(_stamp(m.seed)))
    for s in STRATEGY_ORDER:
        print(f"{s.value}: total comm {report.total(s):.3f} ms")
    print(f"grouped plan comm reduction vs best baseline: {report.grouped_reduction():+.1f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoplacer", description="Latency-aware training placement planner.")
    p.add_argument("--version", action="version", version=f"geoplacer {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a cluster file")
    v.add_argument("--cluster", required=True)

    def run_cmd(name: str, help_: str) -> argparse.ArgumentParser:
        c = sub.add_parser(name, help=help_)
        c.add_argument("--manifest", required=True)
        c.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.ckpt)")
        c.add_argument("--seed", type=int, help="override the manifest seed")
        c.add_argument("--out", help="override the manifest output directory")
        return c

    run_cmd("train", "fit the classifier; writes model.ckpt and trace.csv")
    run_cmd("assign", "place tasks; writes assignment.json")
    s = run_cmd("simulate", "time one strategy; writes simulate.csv")
    s.add_argument("--strategy", choices=[x.value for x in Strategy], default=Strategy.GROUPED.value)
    run_cmd("compare", "all strategies side by side; writes report.csv")
    return p


COMMANDS = {"train": cmd_train, "assign": cmd_assign, "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args)
        m = load_manifest(Path(args.manifest))
        if args.seed is not None:
            if args.seed < 0:
                raise UsageError("seed must be non-negative")
            m.seed = args.seed
        if args.out is not None:
            m.out = Path(args.out)
        return COMMANDS[args.command](args, m)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
