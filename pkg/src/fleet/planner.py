"""Whitelist validation and compilation of pipelines into task graphs.

Everything here is a pure function of its inputs: identical pipelines over
identical federations compile to identical graph shapes and assignments
(task ids excluded, which are random).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .errors import NoDataHolders, UnassignableTask, ValidationError
from .model import (
    Aggregation,
    Artifact,
    Collect,
    Finalize,
    Instruction,
    Opaque,
    OpaqueTransformer,
    Parallel,
    Project,
    Task,
    TaskStatus,
    Train,
    TrainTest,
    new_id,
)

BLOCK = "block"
STEP = "step"
TRANSFORMER = "transformer"


@dataclass(frozen=True)
class InstructionInfo:
    """Executor descriptor: how a kind expands and how it runs.

    ``runner`` is the execution entry point for schedulable steps; block and
    transformer kinds, and the collect marker, carry none.
    """

    kind: str
    role: str
    runner: Callable | None = None


class InstructionRegistry:
    """The active whitelist; fixed per node after startup via :meth:`freeze`."""

    def __init__(self, infos: Iterable[InstructionInfo] = ()):
        self._infos: dict[str, InstructionInfo] = {}
        self._frozen = False
        for info in infos:
            self.register(info)

    def register(self, info: InstructionInfo) -> None:
        """In-process plugin hook. Instructions registered here are granted;
        their safety is on the registrant."""
        if self._frozen:
            raise RuntimeError("instruction registry is frozen after node startup")
        if info.role not in (BLOCK, STEP, TRANSFORMER):
            raise ValueError(f"unknown instruction role '{info.role}'")
        self._infos[info.kind] = info

    def freeze(self) -> "InstructionRegistry":
        self._frozen = True
        return self

    def get(self, kind: str) -> InstructionInfo | None:
        return self._infos.get(kind)

    def kinds(self) -> frozenset[str]:
        return frozenset(self._infos)


DEFAULT_INFOS = (
    InstructionInfo("parallel", BLOCK),
    InstructionInfo("finalize", BLOCK),
    InstructionInfo("train_test", STEP),
    InstructionInfo("train", STEP),
    InstructionInfo("collect", STEP),
    InstructionInfo("aggregation", STEP),
    InstructionInfo("federated_splitter", TRANSFORMER),
)


def default_registry(runners: Mapping[str, Callable] | None = None) -> InstructionRegistry:
    """The default whitelist: exactly the built-in kinds, optionally wired to
    their execution entry points (kept separate so validation-only callers
    need no executor)."""
    runners = runners or {}
    return InstructionRegistry(
        InstructionInfo(i.kind, i.role, runners.get(i.kind)) for i in DEFAULT_INFOS
    )


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

def _registered(registry: InstructionRegistry, kind: str, role: str) -> InstructionInfo:
    info = registry.get(kind)
    if info is None:
        raise ValidationError(kind, f"instruction kind '{kind}' is not whitelisted")
    if info.role != role:
        raise ValidationError(kind, f"instruction kind '{kind}' is not allowed here")
    return info


def _validate_step(step: Instruction, registry: InstructionRegistry) -> None:
    _registered(registry, step.kind, STEP)
    if isinstance(step, TrainTest):
        splitters = 0
        for t in step.query.transformers:
            _registered(registry, t.kind, TRANSFORMER)
            if not isinstance(t, OpaqueTransformer):
                splitters += 1
        if splitters > 1:
            raise ValidationError("federated_splitter", "a query may hold at most one splitter")


def _validate_block(block: Instruction, registry: InstructionRegistry) -> None:
    _registered(registry, block.kind, BLOCK)
    steps = block.steps
    if not steps:
        raise ValidationError(block.kind, f"{block.kind} block has no steps")
    for step in steps:
        _validate_step(step, registry)
    payload_steps = [s for s in steps if not isinstance(s, Collect)]
    if len(payload_steps) != 1:
        raise ValidationError(block.kind, f"{block.kind} block must carry exactly one executable step")
    if isinstance(block, Parallel):
        if any(isinstance(s, (TrainTest, Train)) for s in steps) and not isinstance(steps[-1], Collect):
            raise ValidationError("parallel", "a parallel block that trains must end with collect")
    else:
        if any(isinstance(s, Collect) for s in steps):
            raise ValidationError("finalize", "collect is meaningless inside finalize")


def validate(artifact: Artifact, registry: InstructionRegistry) -> None:
    """Reject the pipeline before any task exists; raises ValidationError
    naming the first offending kind."""
    if not artifact.instructions:
        raise ValidationError("empty", "pipeline has no instructions")
    for block in artifact.instructions:
        if not isinstance(block, (Parallel, Finalize)):
            # Includes Opaque and stray steps at top level.
            raise ValidationError(block.kind, f"top level only admits parallel/finalize blocks, got '{block.kind}'")
        _validate_block(block, registry)


# --------------------------------------------------------------------------
# compilation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskGraph:
    artifact_id: str
    tasks: dict[str, Task]

    def to_jsonable(self) -> dict:
        return {"artifact_id": self.artifact_id,
                "tasks": {tid: t.to_jsonable() for tid, t in sorted(self.tasks.items())}}


def involved_nodes(project: Project, nodes: Mapping[str, str]) -> list[str]:
    """Fingerprints of known nodes holding >=1 data source of the project,
    sorted lexicographically so every caller enumerates identically."""
    holders = sorted({fp for fp, _ in project.data_source_refs if fp in nodes})
    if not holders:
        raise NoDataHolders(f"project '{project.code}' has no data on any known node")
    return holders


def _block_payload(block: Parallel | Finalize) -> Instruction:
    return next(s for s in block.steps if not isinstance(s, Collect))


def _block_collects(block: Parallel | Finalize) -> bool:
    return isinstance(block, Parallel) and any(isinstance(s, Collect) for s in block.steps)


def compile(artifact: Artifact, project: Project, nodes: Mapping[str, str],
            self_fingerprint: str) -> TaskGraph:
    """Expand validated blocks into per-node tasks chained in list order.

    Each parallel block fans out to one task per involved node; each finalize
    block becomes one task on the scheduling node. Every task of block i
    depends on all tasks of block i-1; outputs flow only across a collect
    boundary. Tasks that would need inputs produced on other nodes may not
    land on client-mode nodes, which cannot be pushed to.
    """
    holders = involved_nodes(project, nodes)
    tasks: dict[str, Task] = {}
    prev_ids: tuple[str, ...] = ()
    prev_collected = False

    for block in artifact.instructions:
        payload = _block_payload(block)
        input_from = prev_ids if prev_collected else ()
        if isinstance(block, Parallel):
            assignees = holders
        else:
            assignees = [self_fingerprint]
        block_ids = []
        for fp in assignees:
            cross_input = any(tasks[d].assigned_node != fp for d in input_from)
            if cross_input and nodes.get(fp) == "client":
                raise UnassignableTask(
                    f"task with inputs from other nodes cannot target client-mode node {fp}")
            task = Task(
                task_id=new_id(),
                artifact_id=artifact.artifact_id,
                project_code=artifact.project_code,
                instruction=payload,
                assigned_node=fp,
                depends_on=frozenset(prev_ids),
                input_from=frozenset(input_from),
            )
            tasks[task.task_id] = task
            block_ids.append(task.task_id)
        prev_ids = tuple(block_ids)
        prev_collected = _block_collects(block)

    return TaskGraph(artifact_id=artifact.artifact_id, tasks=tasks)


def ready_set(graph: TaskGraph) -> set[str]:
    """Tasks still CREATED whose dependencies are all COMPLETED."""
    ready = set()
    for tid, task in graph.tasks.items():
        if task.status is not TaskStatus.CREATED:
            continue
        if all(graph.tasks[d].status is TaskStatus.COMPLETED for d in task.depends_on):
            ready.add(tid)
    return ready


def assert_acyclic(graph: TaskGraph) -> list[str]:
    """Topological order of the graph; raises ValueError on a cycle or a
    dangling dependency."""
    indegree = {tid: 0 for tid in graph.tasks}
    for task in graph.tasks.values():
        for dep in task.depends_on:
            if dep not in graph.tasks:
                raise ValueError(f"task {task.task_id} depends on unknown task {dep}")
            indegree[task.task_id] += 1
    frontier = sorted(tid for tid, deg in indegree.items() if deg == 0)
    order: list[str] = []
    dependents: dict[str, list[str]] = {tid: [] for tid in graph.tasks}
    for task in graph.tasks.values():
        for dep in task.depends_on:
            dependents[dep].append(task.task_id)
    while frontier:
        tid = frontier.pop()
        order.append(tid)
        for nxt in dependents[tid]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                frontier.append(nxt)
    if len(order) != len(graph.tasks):
        raise ValueError("task graph contains a cycle")
    return order
