"""Built-in instruction implementations and the task execution entry point.

``run_task`` re-checks the whitelist at execution time (defense in depth;
validation already happened at submission) and maps any failure to a FAILED
result with a reason string instead of letting exceptions escape the worker.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import FleetError, MissingModel, UnknownInstruction
from .forest import aggregate_merge, deserialize_forest, evaluate, train_forest
from .model import (
    Aggregation,
    DataSource,
    FederatedSplitter,
    Task,
    TaskStatus,
    Train,
    TrainTest,
    canonical_serialize,
)
from .planner import InstructionRegistry, default_registry
from .tabular import Table, extract, split

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResourceDraft:
    """A produced output awaiting upload to the scheduling node's store."""

    name: str
    data: bytes


@dataclass(frozen=True)
class TaskResult:
    status: TaskStatus
    resources: tuple[ResourceDraft, ...] = ()
    reason: str | None = None


@dataclass
class ExecutionContext:
    """Everything a task needs locally: who we are, our data, and a way to
    fetch input resources (local store or the scheduling node)."""

    self_fingerprint: str
    datasources: Sequence[DataSource] = ()
    # (inputs descriptors) -> list of (producer_fp, name, bytes); descriptors
    # come from the dispatch payload and are already producer-ordered.
    fetch_inputs: Callable[[Sequence[dict]], list[tuple[str, str, bytes]]] = lambda inputs: []
    registry: InstructionRegistry = field(default_factory=lambda: default_registry(builtin_runners()))
    bootstrap: bool = True  # test hook; production path always bootstraps
    cancelled: Callable[[], bool] = lambda: False


def _training_table(task: Task, ctx: ExecutionContext,
                    splitter: FederatedSplitter | None) -> tuple[Table, Table]:
    # Without a splitter the label falls back to the last declared column and
    # everything trains; the test partition is then empty.
    if splitter is not None:
        table = extract(task.project_code, ctx.datasources, splitter.label)
        return split(table, splitter)
    tagged = [ds for ds in ctx.datasources if task.project_code in ds.project_codes]
    label = tagged[0].columns[-1] if tagged and tagged[0].columns else None
    table = extract(task.project_code, ctx.datasources, label)
    return table, Table(table.columns, (), label)


def run_train_test(task: Task, inputs: Sequence[dict], ctx: ExecutionContext) -> list[ResourceDraft]:
    instruction = task.instruction
    assert isinstance(instruction, TrainTest)
    splitter = next((t for t in instruction.query.transformers
                     if isinstance(t, FederatedSplitter)), None)
    train_table, test_table = _training_table(task, ctx, splitter)
    forest = train_forest(train_table, instruction.model, ctx.self_fingerprint,
                          bootstrap=ctx.bootstrap)
    metrics = evaluate(forest, test_table)
    return [ResourceDraft("model", canonical_serialize(forest)),
            ResourceDraft("metrics", canonical_serialize(metrics))]


def run_train(task: Task, inputs: Sequence[dict], ctx: ExecutionContext) -> list[ResourceDraft]:
    instruction = task.instruction
    assert isinstance(instruction, Train)
    train_table, _ = _training_table(task, ctx, None)
    forest = train_forest(train_table, instruction.model, ctx.self_fingerprint,
                          bootstrap=ctx.bootstrap)
    return [ResourceDraft("model", canonical_serialize(forest))]


def run_aggregation(task: Task, inputs: Sequence[dict], ctx: ExecutionContext) -> list[ResourceDraft]:
    assert isinstance(task.instruction, Aggregation)
    fetched = ctx.fetch_inputs([d for d in inputs if d.get("name") == "model"])
    fetched.sort(key=lambda item: item[0])  # merge order: producer fingerprint
    forests = [deserialize_forest(data) for _, _, data in fetched]
    if not forests:
        raise MissingModel("aggregation task received no input models")
    merged = aggregate_merge(forests, ctx.self_fingerprint)
    return [ResourceDraft("model", canonical_serialize(merged))]


def builtin_runners() -> dict[str, Callable]:
    return {"train_test": run_train_test, "train": run_train, "aggregation": run_aggregation}


def run_task(task: Task, inputs: Sequence[dict], ctx: ExecutionContext) -> TaskResult:
    """Dispatch a task to its registered runner and normalize the outcome."""
    info = ctx.registry.get(task.instruction.kind)
    if info is None or info.runner is None:
        return TaskResult(TaskStatus.FAILED,
                          reason=UnknownInstruction(
                              f"instruction kind '{task.instruction.kind}' has no executor").args[0])
    try:
        if ctx.cancelled():
            return TaskResult(TaskStatus.FAILED, reason="cancelled before start")
        resources = tuple(info.runner(task, inputs, ctx))
        return TaskResult(TaskStatus.COMPLETED, resources=resources)
    except FleetError as exc:
        logger.warning("task %s failed: %s", task.task_id, exc)
        return TaskResult(TaskStatus.FAILED, reason=f"{exc.code}: {exc}")
    except Exception as exc:  # noqa: BLE001 - worker boundary
        logger.exception("task %s raised", task.task_id)
        return TaskResult(TaskStatus.FAILED, reason=f"{type(exc).__name__}: {exc}")
