"""Domain types and their canonical JSON forms.

All values here are immutable; anything that crosses a process or node
boundary goes through ``canonical_serialize`` so signatures and determinism
checks see identical bytes for equal values. Parsing is strict about known
shapes (missing or extra fields fail) but deliberately lenient about unknown
instruction kinds: those parse to :class:`Opaque` and are rejected later by
the whitelist, which keeps validation as the single security gate.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from . import canonical
from .errors import IllegalTransition, InvariantViolation, MalformedDocument

HEX_ID_LEN = 32


def new_id() -> str:
    """Fresh 128-bit random id rendered as 32 lowercase hex chars."""
    return secrets.token_hex(16)


# --------------------------------------------------------------------------
# parse helpers
# --------------------------------------------------------------------------

def _require_mapping(doc: Any, what: str) -> Mapping:
    if not isinstance(doc, Mapping):
        raise MalformedDocument(f"{what} must be an object")
    return doc


def _take(doc: Mapping, key: str, what: str) -> Any:
    if key not in doc:
        raise MalformedDocument(f"{what} is missing required field '{key}'")
    return doc[key]


def _check_no_extras(doc: Mapping, allowed: set[str], what: str) -> None:
    extras = set(doc) - allowed
    if extras:
        raise MalformedDocument(f"{what} has unexpected fields {sorted(extras)}")


def _as_str(value: Any, what: str) -> str:
    if not isinstance(value, str):
        raise MalformedDocument(f"{what} must be a string")
    return value


def _as_uint64(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedDocument(f"{what} must be an integer")
    if not 0 <= value < (1 << 64):
        raise InvariantViolation(f"{what} must fit in an unsigned 64-bit value")
    return value


def _as_positive_int(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedDocument(f"{what} must be an integer")
    if value < 1:
        raise InvariantViolation(f"{what} must be >= 1")
    return value


def _as_number(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument(f"{what} must be a number")
    return float(value)


# --------------------------------------------------------------------------
# instructions
# --------------------------------------------------------------------------

class Strategy(str, Enum):
    MERGE = "merge"


class ModelKind(str, Enum):
    RANDOM_FOREST = "random_forest"


@dataclass(frozen=True)
class FederatedSplitter:
    """Transformer that shuffles local rows and carves off a test fraction."""

    random_state: int
    test_percentage: float
    label: str
    kind = "federated_splitter"

    def __post_init__(self):
        if not 0 < self.test_percentage < 1:
            raise InvariantViolation("test_percentage must lie strictly between 0 and 1")
        if not self.label:
            raise InvariantViolation("label must be non-empty")
        _as_uint64(self.random_state, "random_state")

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "label": self.label,
            "random_state": self.random_state,
            "test_percentage": self.test_percentage,
        }


@dataclass(frozen=True)
class OpaqueTransformer:
    """Unknown transformer kind, preserved verbatim for the whitelist to reject."""

    kind: str
    payload: dict = field(compare=True)

    def to_jsonable(self) -> dict:
        return dict(self.payload)


Transformer = FederatedSplitter | OpaqueTransformer


@dataclass(frozen=True)
class Query:
    transformers: tuple[Transformer, ...]

    def to_jsonable(self) -> dict:
        return {"transformers": [t.to_jsonable() for t in self.transformers]}


@dataclass(frozen=True)
class ModelSpec:
    n_estimators: int
    max_depth: int
    random_state: int
    strategy: Strategy = Strategy.MERGE
    kind: ModelKind = ModelKind.RANDOM_FOREST

    def __post_init__(self):
        _as_positive_int(self.n_estimators, "n_estimators")
        _as_positive_int(self.max_depth, "max_depth")
        _as_uint64(self.random_state, "random_state")

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind.value,
            "max_depth": self.max_depth,
            "n_estimators": self.n_estimators,
            "random_state": self.random_state,
            "strategy": self.strategy.value,
        }


@dataclass(frozen=True)
class TrainTest:
    query: Query
    model: ModelSpec
    kind = "train_test"

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "model": self.model.to_jsonable(),
                "query": self.query.to_jsonable()}


@dataclass(frozen=True)
class Train:
    model: ModelSpec
    kind = "train"

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "model": self.model.to_jsonable()}


@dataclass(frozen=True)
class Collect:
    kind = "collect"

    def to_jsonable(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Aggregation:
    strategy: Strategy = Strategy.MERGE
    kind = "aggregation"

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "strategy": self.strategy.value}


@dataclass(frozen=True)
class Parallel:
    steps: tuple["Instruction", ...]
    kind = "parallel"

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "steps": [s.to_jsonable() for s in self.steps]}


@dataclass(frozen=True)
class Finalize:
    steps: tuple["Instruction", ...]
    kind = "finalize"

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "steps": [s.to_jsonable() for s in self.steps]}


@dataclass(frozen=True)
class Opaque:
    """Unknown instruction kind, preserved verbatim; rejected by the whitelist."""

    kind: str
    payload: dict

    def to_jsonable(self) -> dict:
        return dict(self.payload)


Instruction = Parallel | Finalize | TrainTest | Train | Collect | Aggregation | Opaque


def _parse_strategy(value: Any, what: str) -> Strategy:
    name = _as_str(value, what)
    try:
        return Strategy(name)
    except ValueError:
        raise InvariantViolation(f"{what} '{name}' is not a supported strategy") from None


def parse_model_spec(doc: Any) -> ModelSpec:
    doc = _require_mapping(doc, "model")
    _check_no_extras(doc, {"kind", "max_depth", "n_estimators", "random_state", "strategy"}, "model")
    kind = _as_str(_take(doc, "kind", "model"), "model.kind")
    try:
        model_kind = ModelKind(kind)
    except ValueError:
        raise InvariantViolation(f"model kind '{kind}' is not supported") from None
    return ModelSpec(
        n_estimators=_as_positive_int(_take(doc, "n_estimators", "model"), "n_estimators"),
        max_depth=_as_positive_int(_take(doc, "max_depth", "model"), "max_depth"),
        random_state=_as_uint64(_take(doc, "random_state", "model"), "random_state"),
        strategy=_parse_strategy(_take(doc, "strategy", "model"), "model.strategy"),
        kind=model_kind,
    )


def parse_transformer(doc: Any) -> Transformer:
    doc = _require_mapping(doc, "transformer")
    kind = _as_str(_take(doc, "kind", "transformer"), "transformer.kind")
    if kind == "federated_splitter":
        _check_no_extras(doc, {"kind", "label", "random_state", "test_percentage"}, "federated_splitter")
        return FederatedSplitter(
            random_state=_as_uint64(_take(doc, "random_state", "federated_splitter"), "random_state"),
            test_percentage=_as_number(_take(doc, "test_percentage", "federated_splitter"), "test_percentage"),
            label=_as_str(_take(doc, "label", "federated_splitter"), "label"),
        )
    return OpaqueTransformer(kind=kind, payload=dict(doc))


def parse_query(doc: Any) -> Query:
    doc = _require_mapping(doc, "query")
    _check_no_extras(doc, {"transformers"}, "query")
    raw = _take(doc, "transformers", "query")
    if not isinstance(raw, list):
        raise MalformedDocument("query.transformers must be an array")
    return Query(transformers=tuple(parse_transformer(t) for t in raw))


def parse_instruction(doc: Any, depth: int = 0) -> Instruction:
    doc = _require_mapping(doc, "instruction")
    kind = _as_str(_take(doc, "kind", "instruction"), "instruction.kind")
    if kind == "parallel" or kind == "finalize":
        _check_no_extras(doc, {"kind", "steps"}, kind)
        raw = _take(doc, "steps", kind)
        if not isinstance(raw, list):
            raise MalformedDocument(f"{kind}.steps must be an array")
        steps = tuple(parse_instruction(s, depth + 1) for s in raw)
        return Parallel(steps) if kind == "parallel" else Finalize(steps)
    if kind == "train_test":
        _check_no_extras(doc, {"kind", "model", "query"}, "train_test")
        return TrainTest(query=parse_query(_take(doc, "query", "train_test")),
                         model=parse_model_spec(_take(doc, "model", "train_test")))
    if kind == "train":
        _check_no_extras(doc, {"kind", "model"}, "train")
        return Train(model=parse_model_spec(_take(doc, "model", "train")))
    if kind == "collect":
        _check_no_extras(doc, {"kind"}, "collect")
        return Collect()
    if kind == "aggregation":
        _check_no_extras(doc, {"kind", "strategy"}, "aggregation")
        return Aggregation(strategy=_parse_strategy(_take(doc, "strategy", "aggregation"), "strategy"))
    return Opaque(kind=kind, payload=dict(doc))


def parse_instructions(doc: Any) -> tuple[Instruction, ...]:
    if not isinstance(doc, list):
        raise MalformedDocument("instructions must be an array")
    return tuple(parse_instruction(i) for i in doc)


# --------------------------------------------------------------------------
# artifact
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Artifact:
    artifact_id: str
    project_code: str
    instructions: tuple[Instruction, ...]
    submitted_by: str

    def to_jsonable(self) -> dict:
        return {
            "artifact_id": self.artifact_id,
            "instructions": [i.to_jsonable() for i in self.instructions],
            "project_code": self.project_code,
            "submitted_by": self.submitted_by,
        }


def parse_artifact(doc: Any) -> Artifact:
    doc = _require_mapping(doc, "artifact")
    _check_no_extras(doc, {"artifact_id", "instructions", "project_code", "submitted_by"}, "artifact")
    return Artifact(
        artifact_id=_as_str(_take(doc, "artifact_id", "artifact"), "artifact_id"),
        project_code=_as_str(_take(doc, "project_code", "artifact"), "project_code"),
        instructions=parse_instructions(_take(doc, "instructions", "artifact")),
        submitted_by=_as_str(_take(doc, "submitted_by", "artifact"), "submitted_by"),
    )


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------

class TaskStatus(str, Enum):
    CREATED = "created"
    ELIGIBLE = "eligible"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    CANCELLED = "cancelled"


# The complete legal transition relation; anything else is rejected.
_TASK_EDGES: dict[TaskStatus, frozenset[TaskStatus]] = {
    TaskStatus.CREATED: frozenset({TaskStatus.ELIGIBLE, TaskStatus.CANCELLED}),
    TaskStatus.ELIGIBLE: frozenset({TaskStatus.RUNNING, TaskStatus.CANCELLED}),
    TaskStatus.RUNNING: frozenset({TaskStatus.COMPLETED, TaskStatus.FAILED}),
    TaskStatus.COMPLETED: frozenset(),
    TaskStatus.FAILED: frozenset(),
    TaskStatus.CANCELLED: frozenset(),
}

TERMINAL_STATUSES = frozenset({TaskStatus.COMPLETED, TaskStatus.FAILED, TaskStatus.CANCELLED})


def transition(current: TaskStatus, new: TaskStatus) -> TaskStatus:
    """Return ``new`` if the edge current->new is legal, else raise."""
    if new not in _TASK_EDGES[current]:
        raise IllegalTransition(f"cannot move task from {current.value} to {new.value}")
    return new


@dataclass(frozen=True)
class Task:
    task_id: str
    artifact_id: str
    project_code: str
    instruction: Instruction
    assigned_node: str
    depends_on: frozenset[str] = frozenset()
    # Dependencies whose outputs feed this task (set when the previous block
    # ended with a collect step); a subset of depends_on.
    input_from: frozenset[str] = frozenset()
    status: TaskStatus = TaskStatus.CREATED
    produced_resources: tuple[str, ...] = ()
    reason: str | None = None

    def to_jsonable(self) -> dict:
        return {
            "artifact_id": self.artifact_id,
            "assigned_node": self.assigned_node,
            "depends_on": sorted(self.depends_on),
            "input_from": sorted(self.input_from),
            "instruction": self.instruction.to_jsonable(),
            "produced_resources": list(self.produced_resources),
            "project_code": self.project_code,
            "reason": self.reason,
            "status": self.status.value,
            "task_id": self.task_id,
        }


def parse_task(doc: Any) -> Task:
    doc = _require_mapping(doc, "task")
    _check_no_extras(doc, {"artifact_id", "assigned_node", "depends_on", "input_from",
                           "instruction", "produced_resources", "project_code",
                           "reason", "status", "task_id"}, "task")
    status_name = _as_str(_take(doc, "status", "task"), "task.status")
    try:
        status = TaskStatus(status_name)
    except ValueError:
        raise InvariantViolation(f"unknown task status '{status_name}'") from None
    deps = _take(doc, "depends_on", "task")
    inputs = _take(doc, "input_from", "task")
    produced = _take(doc, "produced_resources", "task")
    if not (isinstance(deps, list) and isinstance(inputs, list) and isinstance(produced, list)):
        raise MalformedDocument("task list fields must be arrays")
    reason = doc.get("reason")
    if reason is not None and not isinstance(reason, str):
        raise MalformedDocument("task.reason must be a string or null")
    return Task(
        task_id=_as_str(_take(doc, "task_id", "task"), "task_id"),
        artifact_id=_as_str(_take(doc, "artifact_id", "task"), "artifact_id"),
        project_code=_as_str(_take(doc, "project_code", "task"), "project_code"),
        instruction=parse_instruction(_take(doc, "instruction", "task")),
        assigned_node=_as_str(_take(doc, "assigned_node", "task"), "assigned_node"),
        depends_on=frozenset(_as_str(d, "depends_on entry") for d in deps),
        input_from=frozenset(_as_str(d, "input_from entry") for d in inputs),
        status=status,
        produced_resources=tuple(_as_str(r, "produced_resources entry") for r in produced),
        reason=reason,
    )


# --------------------------------------------------------------------------
# resources, projects, data sources
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Resource:
    resource_id: str
    artifact_id: str
    task_id: str
    name: str
    data: bytes
    created_seq: int

    def descriptor(self) -> dict:
        """Metadata-only view used in task updates and dispatch payloads."""
        return {"created_seq": self.created_seq, "name": self.name,
                "resource_id": self.resource_id, "task_id": self.task_id}


@dataclass(frozen=True)
class Project:
    code: str
    name: str
    data_source_refs: tuple[tuple[str, str], ...]  # (node fingerprint, data_source_id)

    def __post_init__(self):
        if not self.code:
            raise InvariantViolation("project code must be non-empty")

    def holders(self) -> tuple[str, ...]:
        return tuple(sorted({fp for fp, _ in self.data_source_refs}))

    def to_jsonable(self) -> dict:
        return {"code": self.code,
                "data_source_refs": [[fp, ds] for fp, ds in self.data_source_refs],
                "name": self.name}


def parse_project(doc: Any) -> Project:
    doc = _require_mapping(doc, "project")
    _check_no_extras(doc, {"code", "data_source_refs", "name"}, "project")
    refs = _take(doc, "data_source_refs", "project")
    if not isinstance(refs, list):
        raise MalformedDocument("project.data_source_refs must be an array")
    parsed = []
    for ref in refs:
        if not (isinstance(ref, list) and len(ref) == 2):
            raise MalformedDocument("project ref must be a [fingerprint, data_source_id] pair")
        parsed.append((_as_str(ref[0], "ref fingerprint"), _as_str(ref[1], "ref id")))
    return Project(code=_as_str(_take(doc, "code", "project"), "code"),
                   name=_as_str(_take(doc, "name", "project"), "name"),
                   data_source_refs=tuple(parsed))


@dataclass(frozen=True)
class DataSource:
    data_source_id: str
    path: str
    columns: tuple[str, ...]
    project_codes: frozenset[str]
    kind: str = "csv"

    def __post_init__(self):
        if self.kind != "csv":
            raise InvariantViolation(f"unsupported data source kind '{self.kind}'")

    def metadata(self) -> dict:
        """Shareable description: ids, columns and codes, never row data."""
        return {"columns": list(self.columns), "data_source_id": self.data_source_id,
                "kind": self.kind, "project_codes": sorted(self.project_codes)}


def parse_data_source_metadata(doc: Any) -> DataSource:
    doc = _require_mapping(doc, "data source")
    _check_no_extras(doc, {"columns", "data_source_id", "kind", "project_codes"}, "data source")
    cols = _take(doc, "columns", "data source")
    codes = _take(doc, "project_codes", "data source")
    if not (isinstance(cols, list) and isinstance(codes, list)):
        raise MalformedDocument("data source columns/project_codes must be arrays")
    return DataSource(
        data_source_id=_as_str(_take(doc, "data_source_id", "data source"), "data_source_id"),
        path="",
        columns=tuple(_as_str(c, "column") for c in cols),
        project_codes=frozenset(_as_str(c, "project code") for c in codes),
        kind=_as_str(_take(doc, "kind", "data source"), "kind"),
    )


# --------------------------------------------------------------------------
# canonical byte forms
# --------------------------------------------------------------------------

def canonical_serialize(value: Any) -> bytes:
    """Canonical bytes of any domain value (or plain jsonable structure)."""
    jsonable = value.to_jsonable() if hasattr(value, "to_jsonable") else value
    return canonical.dumps(jsonable)


def deserialize_instruction(data: bytes | str) -> Instruction:
    return parse_instruction(canonical.loads(data))


def deserialize_instructions(data: bytes | str) -> tuple[Instruction, ...]:
    return parse_instructions(canonical.loads(data))


def deserialize_artifact(data: bytes | str) -> Artifact:
    return parse_artifact(canonical.loads(data))


def deserialize_task(data: bytes | str) -> Task:
    return parse_task(canonical.loads(data))
