import json

import pytest

from ramehr.ehr import CodeType, Dataset, MedicalCode, PatientRecord, TaskSpec, Visit, Vocabulary


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def small_vocab():
    return Vocabulary([
        MedicalCode("D1", CodeType.DISEASE, "heart failure"),
        MedicalCode("D2", CodeType.DISEASE, "sepsis"),
        MedicalCode("M1", CodeType.MEDICATION, "furosemide"),
        MedicalCode("M2", CodeType.MEDICATION, "heparin"),
        MedicalCode("P1", CodeType.PROCEDURE, "dialysis"),
    ])


@pytest.fixture
def small_task():
    return TaskSpec("toy", 2, ("a", "b"), "two toy labels")


@pytest.fixture
def small_dataset(small_vocab, small_task):
    recs = (
        PatientRecord("p0", (Visit(("D1", "M1"), 0), Visit(("D2", "P1"), 1)), (1, 0)),
        PatientRecord("p1", (Visit(("M2",), 0),), (0, 1)),
        PatientRecord("p2", (Visit(("D2", "M1", "M2"), 0), Visit(("D1",), 1)), (1, 1)),
        PatientRecord("p3", (Visit(("P1", "D1"), 0),), (0, 0)),
    )
    return Dataset(recs, small_task, small_vocab)
