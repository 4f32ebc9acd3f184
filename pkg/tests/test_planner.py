from __future__ import annotations

from dataclasses import replace

import pytest

from conftest import N1, N2, N3, SELF, listing1_instructions, make_artifact
from fleet.errors import NoDataHolders, UnassignableTask, ValidationError
from fleet.model import (
    Aggregation,
    Collect,
    Finalize,
    Opaque,
    Parallel,
    Project,
    TaskStatus,
    TrainTest,
)
from fleet.planner import (
    InstructionInfo,
    InstructionRegistry,
    TaskGraph,
    assert_acyclic,
    compile,
    default_registry,
    involved_nodes,
    ready_set,
    validate,
)

THREE_DEFAULT = {N1: "default", N2: "default", N3: "default", SELF: "default"}


def test_listing1_pipeline_validates():
    validate(make_artifact(), default_registry())


def test_unknown_kind_named_in_error():
    bad = (Parallel(steps=(Opaque("exfiltrate", {"kind": "exfiltrate"}), Collect())),)
    with pytest.raises(ValidationError) as err:
        validate(make_artifact(bad), default_registry())
    assert err.value.kind == "exfiltrate"


def test_empty_pipeline_rejected():
    with pytest.raises(ValidationError) as err:
        validate(make_artifact(()), default_registry())
    assert err.value.kind == "empty"


def test_top_level_step_rejected():
    artifact = make_artifact((listing1_instructions()[0].steps[0],))
    with pytest.raises(ValidationError) as err:
        validate(artifact, default_registry())
    assert err.value.kind == "train_test"


def test_nested_block_rejected():
    inner = Parallel(steps=(Collect(),))
    artifact = make_artifact((Parallel(steps=(inner,)),))
    with pytest.raises(ValidationError) as err:
        validate(artifact, default_registry())
    assert err.value.kind == "parallel"


def test_training_parallel_without_collect_rejected():
    block = Parallel(steps=(listing1_instructions()[0].steps[0],))
    with pytest.raises(ValidationError):
        validate(make_artifact((block, Finalize(steps=(Aggregation(),)))), default_registry())


def test_plugin_kind_can_be_registered():
    registry = default_registry()
    registry.register(InstructionInfo("notch_filter", "step"))
    block = Parallel(steps=(Opaque("notch_filter", {"kind": "notch_filter"}),))
    validate(make_artifact((block,)), registry)
    registry.freeze()
    with pytest.raises(RuntimeError):
        registry.register(InstructionInfo("late", "step"))


def test_registry_default_kinds_exact():
    assert default_registry().kinds() == frozenset(
        {"parallel", "finalize", "train_test", "train", "collect", "aggregation",
         "federated_splitter"})


# --- involved_nodes ---------------------------------------------------------

def test_involved_nodes_sorted(three_holder_project):
    assert involved_nodes(three_holder_project, THREE_DEFAULT) == sorted([N1, N2, N3])


def test_involved_nodes_dedupes_multi_source_holder():
    project = Project(code="p1", name="p",
                      data_source_refs=((N2, "a"), (N2, "b"), (N1, "c")))
    assert involved_nodes(project, THREE_DEFAULT) == [N1, N2]


def test_no_data_holders():
    project = Project(code="p9", name="empty", data_source_refs=())
    with pytest.raises(NoDataHolders):
        involved_nodes(project, THREE_DEFAULT)


# --- compile -----------------------------------------------------------------

def test_compile_listing1_three_holders(three_holder_project):
    graph = compile(make_artifact(), three_holder_project, THREE_DEFAULT, SELF)
    assert len(graph.tasks) == 4
    parallel = [t for t in graph.tasks.values() if isinstance(t.instruction, TrainTest)]
    final = [t for t in graph.tasks.values() if isinstance(t.instruction, Aggregation)]
    assert len(parallel) == 3 and len(final) == 1
    assert sorted(t.assigned_node for t in parallel) == sorted([N1, N2, N3])
    assert not any(t.depends_on for t in parallel)
    agg = final[0]
    assert agg.assigned_node == SELF
    assert agg.depends_on == {t.task_id for t in parallel}
    assert agg.input_from == agg.depends_on
    assert_acyclic(graph)


def test_compile_single_holder():
    project = Project(code="p1", name="p", data_source_refs=((N1, "only"),))
    graph = compile(make_artifact(), project, THREE_DEFAULT, SELF)
    assert len(graph.tasks) == 2


def test_compile_chained_parallels():
    block = listing1_instructions()[0]
    artifact = make_artifact((block, block, Finalize(steps=(Aggregation(),))))
    project = Project(code="p1", name="p", data_source_refs=((N1, "a"), (N2, "b")))
    graph = compile(artifact, project, THREE_DEFAULT, SELF)
    assert len(graph.tasks) == 5
    first = [t for t in graph.tasks.values() if not t.depends_on]
    assert len(first) == 2
    second = [t for t in graph.tasks.values()
              if t.depends_on == {t2.task_id for t2 in first}]
    # the finalize task also depends on block 2, not block 1
    assert len(second) == 2
    final = [t for t in graph.tasks.values() if isinstance(t.instruction, Aggregation)]
    assert final[0].depends_on == {t.task_id for t in second}


def test_compile_refuses_cross_input_on_client_node():
    block = listing1_instructions()[0]
    artifact = make_artifact((block, block))
    project = Project(code="p1", name="p", data_source_refs=((N1, "a"), (N2, "b")))
    modes = {N1: "client", N2: "client", SELF: "default"}
    with pytest.raises(UnassignableTask):
        compile(artifact, project, modes, SELF)


def test_compile_deterministic_shape(three_holder_project):
    a = compile(make_artifact(), three_holder_project, THREE_DEFAULT, SELF)
    b = compile(make_artifact(), three_holder_project, THREE_DEFAULT, SELF)

    def shape(graph):
        return sorted((t.instruction.kind, t.assigned_node, len(t.depends_on))
                      for t in graph.tasks.values())

    assert shape(a) == shape(b)


# --- ready_set ---------------------------------------------------------------

def test_ready_set_unlock_rule(three_holder_project):
    graph = compile(make_artifact(), three_holder_project, THREE_DEFAULT, SELF)
    first = ready_set(graph)
    assert len(first) == 3
    agg_id = next(tid for tid, t in graph.tasks.items() if t.depends_on)
    assert agg_id not in first
    for tid in first:
        graph.tasks[tid] = replace(graph.tasks[tid], status=TaskStatus.COMPLETED)
    assert ready_set(graph) == {agg_id}


def test_ready_set_empty_graph():
    assert ready_set(TaskGraph(artifact_id="x" * 32, tasks={})) == set()
