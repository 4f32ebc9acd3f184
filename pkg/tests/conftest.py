from __future__ import annotations

import pytest

from fleet.model import (
    Aggregation,
    Artifact,
    Collect,
    FederatedSplitter,
    Finalize,
    ModelSpec,
    Parallel,
    Project,
    Query,
    TrainTest,
)

N1 = "aaa1" * 16
N2 = "bbb2" * 16
N3 = "ccc3" * 16
SELF = "eee0" * 16


def listing1_instructions(n_estimators: int = 10, random_state: int = 42,
                          test_percentage: float = 0.2, label: str = "target",
                          max_depth: int = 5):
    """The reference pipeline: parallel train/test on every holder, collect,
    then a finalize block that merges the local forests."""
    model = ModelSpec(n_estimators=n_estimators, max_depth=max_depth,
                      random_state=random_state)
    return (
        Parallel(steps=(
            TrainTest(
                query=Query(transformers=(FederatedSplitter(
                    random_state=random_state, test_percentage=test_percentage,
                    label=label),)),
                model=model,
            ),
            Collect(),
        )),
        Finalize(steps=(Aggregation(),)),
    )


def make_artifact(instructions=None, artifact_id: str = "ab" * 16,
                  project_code: str = "p1", submitted_by: str = "wb" + "00" * 15):
    return Artifact(artifact_id=artifact_id, project_code=project_code,
                    instructions=instructions if instructions is not None else listing1_instructions(),
                    submitted_by=submitted_by)


@pytest.fixture
def three_holder_project():
    return Project(code="p1", name="first",
                   data_source_refs=((N1, "ds1"), (N2, "ds2"), (N3, "ds3")))
