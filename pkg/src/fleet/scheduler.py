"""Task-lifecycle state machine for the scheduling (entry-point) node.

All transitions are applied under one lock so concurrent request handlers
observe a linearizable event order. Each applied event is appended to a
local log file, one canonical-JSON line per event, for crash inspection;
the authoritative state itself is in memory only.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

from . import canonical
from .errors import DuplicateArtifact, UnknownArtifact, UnknownNode, UnknownTask
from .model import Artifact, Task, TaskStatus, transition
from .planner import TaskGraph, assert_acyclic, ready_set

DEFAULT_TASK_TIMEOUT_S = 300.0
DEFAULT_POLL_MAX = 16


class ArtifactStatus(str, Enum):
    SUBMITTED = "submitted"
    RUNNING = "running"
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class DispatchIntent:
    """A task payload the node layer must push to a default-mode target."""

    target: str
    payload: dict


@dataclass(frozen=True)
class AbortNotice:
    artifact_id: str
    failed_task_id: str
    reason: str
    cancelled: tuple[str, ...]
    push_targets: tuple[str, ...]  # default-mode nodes to notify immediately

    def to_jsonable(self) -> dict:
        return {"artifact_id": self.artifact_id, "cancelled": sorted(self.cancelled),
                "failed_task_id": self.failed_task_id, "reason": self.reason}


@dataclass
class UpdateOutcome:
    intents: list[DispatchIntent] = field(default_factory=list)
    abort: AbortNotice | None = None


@dataclass
class _ArtifactState:
    artifact: Artifact | None
    graph: TaskGraph
    status: ArtifactStatus = ArtifactStatus.SUBMITTED
    reason: str | None = None


class Scheduler:
    """Owner of every artifact submitted to this node.

    ``mode_of`` resolves a node fingerprint to "default" or "client" (None for
    unknown nodes); it is consulted at dispatch time to decide between an
    immediate push intent and the polling outbox.
    """

    def __init__(self, self_fingerprint: str, mode_of: Callable[[str], str | None],
                 event_log: str | None = None,
                 task_timeout_s: float = DEFAULT_TASK_TIMEOUT_S,
                 clock: Callable[[], float] = time.time):
        self.self_fingerprint = self_fingerprint
        self.mode_of = mode_of
        self.task_timeout_s = task_timeout_s
        self.clock = clock
        self._event_log = event_log
        self._lock = threading.RLock()
        self._artifacts: dict[str, _ArtifactState] = {}
        self._task_index: dict[str, str] = {}
        self._outboxes: dict[str, deque[str]] = {}
        self._deadlines: dict[str, float] = {}
        self._resources: dict[str, list[dict]] = {}
        self._abort_queues: dict[str, list[dict]] = {}
        self._dispatched: set[str] = set()
        self._seq = 0

    # -- event log ---------------------------------------------------------

    def _log(self, event: str, **fields) -> None:
        self._seq += 1
        if not self._event_log:
            return
        line = canonical.dumps({"event": event, "seq": self._seq, **fields})
        with open(self._event_log, "ab") as fh:
            fh.write(line + b"\n")

    # -- internal helpers (must hold the lock) ------------------------------

    def _state_for_task(self, task_id: str) -> tuple[_ArtifactState, Task]:
        artifact_id = self._task_index.get(task_id)
        if artifact_id is None:
            raise UnknownTask(f"no task {task_id}")
        state = self._artifacts[artifact_id]
        return state, state.graph.tasks[task_id]

    def _set_task(self, state: _ArtifactState, task: Task, **changes) -> Task:
        updated = replace(task, **changes)
        state.graph.tasks[task.task_id] = updated
        return updated

    def _enriched_payload(self, state: _ArtifactState, task: Task) -> dict:
        inputs = []
        for dep in sorted(task.input_from):
            producer = state.graph.tasks[dep].assigned_node
            for descriptor in self._resources.get(dep, []):
                inputs.append({**descriptor, "producer": producer})
        inputs.sort(key=lambda d: (d["producer"], d["name"], d["resource_id"]))
        return {"inputs": inputs, "scheduler": self.self_fingerprint,
                "task": task.to_jsonable()}

    def _promote_ready(self, state: _ArtifactState) -> list[DispatchIntent]:
        """Mark newly unblocked tasks ELIGIBLE and route them for delivery."""
        if state.status is ArtifactStatus.ABORTED:
            return []
        intents = []
        for tid in sorted(ready_set(state.graph)):
            task = state.graph.tasks[tid]
            task = self._set_task(state, task, status=transition(task.status, TaskStatus.ELIGIBLE))
            if tid in self._dispatched:
                continue  # exactly-once: never route a task twice
            self._dispatched.add(tid)
            mode = self.mode_of(task.assigned_node)
            payload = self._enriched_payload(state, task)
            if mode == "client":
                self._outboxes.setdefault(task.assigned_node, deque()).append(tid)
                self._log("enqueue", task=tid, node=task.assigned_node)
            else:
                self._deadlines[tid] = self.clock() + self.task_timeout_s
                intents.append(DispatchIntent(task.assigned_node, payload))
                self._log("dispatch", task=tid, node=task.assigned_node)
        return intents

    def _maybe_complete(self, state: _ArtifactState) -> None:
        tasks = state.graph.tasks.values()
        if tasks and all(t.status is TaskStatus.COMPLETED for t in tasks):
            state.status = ArtifactStatus.COMPLETED
            self._log("artifact", artifact=state.graph.artifact_id, status=state.status.value)

    def _abort(self, state: _ArtifactState, failed_task: Task, reason: str) -> AbortNotice:
        state.status = ArtifactStatus.ABORTED
        state.reason = f"task {failed_task.task_id} failed: {reason}"
        affected = {t.assigned_node for t in state.graph.tasks.values()
                    if t.status is TaskStatus.RUNNING or t.task_id in self._deadlines}
        cancelled = []
        for tid, task in state.graph.tasks.items():
            if task.status in (TaskStatus.CREATED, TaskStatus.ELIGIBLE):
                self._set_task(state, task, status=transition(task.status, TaskStatus.CANCELLED),
                               reason="artifact aborted")
                cancelled.append(tid)
                self._deadlines.pop(tid, None)
        for outbox in self._outboxes.values():
            purged = [tid for tid in outbox if tid in state.graph.tasks]
            for tid in purged:
                outbox.remove(tid)
        notice = AbortNotice(
            artifact_id=state.graph.artifact_id,
            failed_task_id=failed_task.task_id,
            reason=reason,
            cancelled=tuple(cancelled),
            push_targets=tuple(sorted(fp for fp in affected
                                      if self.mode_of(fp) == "default" and fp != self.self_fingerprint)),
        )
        for fp in affected:
            if self.mode_of(fp) == "client":
                self._abort_queues.setdefault(fp, []).append(notice.to_jsonable())
        self._log("abort", artifact=state.graph.artifact_id, task=failed_task.task_id,
                  reason=reason, cancelled=sorted(cancelled))
        return notice

    def _apply_update(self, task_id: str, new_status: TaskStatus,
                      resources: list[dict], reason: str | None) -> UpdateOutcome:
        state, task = self._state_for_task(task_id)
        status = transition(task.status, new_status)
        self._log("task_update", task=task_id, status=status.value, seq_resources=len(resources))
        if status is TaskStatus.RUNNING:
            self._deadlines.pop(task_id, None)
            self._set_task(state, task, status=status)
            return UpdateOutcome()
        if status is TaskStatus.COMPLETED:
            self._deadlines.pop(task_id, None)
            self._resources[task_id] = list(resources)
            self._set_task(state, task, status=status,
                           produced_resources=tuple(r["resource_id"] for r in resources))
            intents = self._promote_ready(state)
            self._maybe_complete(state)
            return UpdateOutcome(intents=intents)
        # FAILED
        self._deadlines.pop(task_id, None)
        failed = self._set_task(state, task, status=status, reason=reason or "task failed")
        abort = None
        if state.status is not ArtifactStatus.ABORTED:
            abort = self._abort(state, failed, reason or "task failed")
        return UpdateOutcome(abort=abort)

    # -- public API ----------------------------------------------------------

    def submit(self, graph: TaskGraph, artifact: Artifact | None = None) -> list[DispatchIntent]:
        with self._lock:
            if graph.artifact_id in self._artifacts:
                raise DuplicateArtifact(f"artifact {graph.artifact_id} already submitted")
            assert_acyclic(graph)
            for task in graph.tasks.values():
                if self.mode_of(task.assigned_node) is None:
                    raise UnknownNode(f"task assigned to unknown node {task.assigned_node}")
            state = _ArtifactState(artifact=artifact, graph=graph)
            self._artifacts[graph.artifact_id] = state
            self._task_index.update({tid: graph.artifact_id for tid in graph.tasks})
            self._log("submit", artifact=graph.artifact_id, tasks=sorted(graph.tasks))
            if not graph.tasks:
                state.status = ArtifactStatus.COMPLETED
                self._log("artifact", artifact=graph.artifact_id, status=state.status.value)
                return []
            state.status = ArtifactStatus.RUNNING
            return self._promote_ready(state)

    def task_update(self, task_id: str, new_status: TaskStatus,
                    resources: list[dict] | None = None, reason: str | None = None) -> UpdateOutcome:
        with self._lock:
            return self._apply_update(task_id, new_status, list(resources or []), reason)

    def next_tasks_for(self, fingerprint: str, max_n: int = DEFAULT_POLL_MAX) -> list[dict]:
        """Drain up to max_n queued tasks for a polling node, marking them
        delivered (the ack deadline starts now)."""
        with self._lock:
            if self.mode_of(fingerprint) is None:
                raise UnknownNode(f"unknown node {fingerprint}")
            outbox = self._outboxes.get(fingerprint)
            payloads: list[dict] = []
            while outbox and len(payloads) < max_n:
                tid = outbox.popleft()
                state, task = self._state_for_task(tid)
                if task.status is not TaskStatus.ELIGIBLE:
                    continue
                self._deadlines[tid] = self.clock() + self.task_timeout_s
                payloads.append(self._enriched_payload(state, task))
                self._log("deliver", task=tid, node=fingerprint)
            return payloads

    def pending_aborts(self, fingerprint: str) -> list[dict]:
        with self._lock:
            return self._abort_queues.pop(fingerprint, [])

    def expire_overdue(self, now: float | None = None) -> list[UpdateOutcome]:
        """Fail every delivered-but-unacknowledged task past its deadline.

        The executor never acknowledged, so the task is walked through
        RUNNING to FAILED to keep the transition relation exact.
        """
        now = self.clock() if now is None else now
        outcomes = []
        with self._lock:
            overdue = sorted(tid for tid, deadline in self._deadlines.items() if deadline <= now)
            for tid in overdue:
                if tid not in self._deadlines:
                    continue  # an earlier expiry in this sweep aborted its artifact
                state, task = self._state_for_task(tid)
                if task.status is TaskStatus.ELIGIBLE:
                    self._set_task(state, task, status=transition(task.status, TaskStatus.RUNNING))
                self._log("expire", task=tid)
                outcomes.append(self._apply_update(tid, TaskStatus.FAILED, [], "timeout"))
        return outcomes

    # -- snapshots -----------------------------------------------------------

    def has_artifact(self, artifact_id: str) -> bool:
        with self._lock:
            return artifact_id in self._artifacts

    def artifact_snapshot(self, artifact_id: str) -> dict:
        with self._lock:
            state = self._artifacts.get(artifact_id)
            if state is None:
                raise UnknownArtifact(f"no artifact {artifact_id}")
            tasks = [{"assigned_node": t.assigned_node, "instruction": t.instruction.kind,
                      "reason": t.reason, "status": t.status.value, "task_id": t.task_id}
                     for t in state.graph.tasks.values()]
            tasks.sort(key=lambda t: t["task_id"])
            return {"artifact_id": artifact_id, "reason": state.reason,
                    "status": state.status.value, "tasks": tasks}

    def submitted_by(self, artifact_id: str) -> str | None:
        with self._lock:
            state = self._artifacts.get(artifact_id)
            if state is None or state.artifact is None:
                return None
            return state.artifact.submitted_by

    def task_assignee(self, task_id: str) -> str | None:
        with self._lock:
            artifact_id = self._task_index.get(task_id)
            if artifact_id is None:
                return None
            return self._artifacts[artifact_id].graph.tasks[task_id].assigned_node

    def is_dependent_assignee(self, artifact_id: str, producing_task_id: str,
                              fingerprint: str) -> bool:
        """True when the fingerprint owns a task that depends on the producer
        (the access rule for pulling input resources)."""
        with self._lock:
            state = self._artifacts.get(artifact_id)
            if state is None:
                return False
            return any(producing_task_id in t.depends_on and t.assigned_node == fingerprint
                       for t in state.graph.tasks.values())

    def final_task_ids(self, artifact_id: str) -> list[str]:
        """Sink tasks (no dependents): the pipeline's final block."""
        with self._lock:
            state = self._artifacts.get(artifact_id)
            if state is None:
                raise UnknownArtifact(f"no artifact {artifact_id}")
            depended = set()
            for task in state.graph.tasks.values():
                depended |= task.depends_on
            return sorted(tid for tid in state.graph.tasks if tid not in depended)

    def artifact_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._artifacts)
