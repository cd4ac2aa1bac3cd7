import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramehr.ehr import (CodeType, MedicalCode, PatientRecord, TaskSpec, Visit, Vocabulary, load_dataset,
                        load_vocab, split_dataset, split_indices)
from ramehr.errors import ConfigError, DataError

from conftest import write_jsonl


def test_vocab_round_trip_keeps_order(tmp_path, small_vocab):
    small_vocab.save(tmp_path / "v.jsonl")
    again = load_vocab(tmp_path / "v.jsonl")
    assert again == small_vocab
    assert [c.id for c in again] == ["D1", "D2", "M1", "M2", "P1"]
    assert again.rank("M1") == 2
    assert [c.id for c in again.of_kind(CodeType.MEDICATION)] == ["M1", "M2"]


def test_vocab_rejects_duplicates_and_empty_names(tmp_path):
    with pytest.raises(DataError):
        Vocabulary([MedicalCode("A", CodeType.DISEASE, "x"), MedicalCode("A", CodeType.DISEASE, "y")])
    with pytest.raises(DataError):
        MedicalCode("A", CodeType.DISEASE, "  ")
    write_jsonl(tmp_path / "v.jsonl", [{"code": "A", "type": "organ", "name": "x"}])
    with pytest.raises(DataError, match=":1:"):
        load_vocab(tmp_path / "v.jsonl")


def test_task_round_trip_and_validation(tmp_path, small_task):
    small_task.save(tmp_path / "t.json")
    assert TaskSpec.load(tmp_path / "t.json") == small_task
    with pytest.raises(ConfigError):
        TaskSpec("x", 2, ("only-one",), "")
    (tmp_path / "bad.json").write_text(json.dumps({"name": "x"}))
    with pytest.raises(DataError):
        TaskSpec.load(tmp_path / "bad.json")


def test_dataset_round_trip(tmp_path, small_dataset, small_vocab, small_task):
    small_dataset.save(tmp_path / "d.jsonl")
    again = load_dataset(tmp_path / "d.jsonl", small_vocab, small_task)
    assert again == small_dataset
    assert [v.timestamp_rank for v in again[0].visits] == [0, 1]
    np.testing.assert_array_equal(again.labels(), [[1, 0], [0, 1], [1, 1], [0, 0]])


def _patient(pid="p", codes=("D1",), labels=(0, 1)):
    return {"patient_id": pid, "visits": [{"codes": list(codes)}], "labels": list(labels)}


@pytest.mark.parametrize("rows, pattern", [
    ([_patient(), _patient(pid="q", codes=("ZZZ",))], r":2: unknown code id 'ZZZ'"),
    ([_patient(labels=(1,))], r":1: .*has 1 labels"),
    ([_patient(), _patient()], r":2: duplicate patient_id"),
    ([_patient(labels=(0, 2))], r":1: .*labels must be 0/1"),
    ([{"patient_id": "p", "visits": [], "labels": [0, 0]}], r":1: .*no visits"),
    ([_patient(codes=("D1", "D1"))], r":1: .*repeats a code"),
    ([{"patient_id": "p", "labels": [0, 0]}], r":1: missing field"),
])
def test_dataset_errors_carry_line_numbers(tmp_path, small_vocab, small_task, rows, pattern):
    write_jsonl(tmp_path / "d.jsonl", rows)
    with pytest.raises(DataError, match=pattern):
        load_dataset(tmp_path / "d.jsonl", small_vocab, small_task)


def test_malformed_json_line(tmp_path, small_vocab, small_task):
    (tmp_path / "d.jsonl").write_text(json.dumps(_patient()) + "\n{not json\n")
    with pytest.raises(DataError, match=":2: malformed JSON"):
        load_dataset(tmp_path / "d.jsonl", small_vocab, small_task)


def test_visit_ranks_must_increase():
    with pytest.raises(DataError):
        PatientRecord("p", (Visit(("A",), 1), Visit(("B",), 1)), (0,))


def test_all_codes_deduplicates_in_first_seen_order(small_dataset):
    assert small_dataset[2].all_codes() == ["D2", "M1", "M2", "D1"]


def test_split_is_a_seeded_partition():
    tr, va, te = split_indices(1000, (0.8, 0.1, 0.1), seed=3)
    assert (len(tr), len(va), len(te)) == (800, 100, 100)
    assert sorted(tr + va + te) == list(range(1000))
    assert split_indices(1000, seed=3) == (tr, va, te)
    assert split_indices(1000, seed=4) != (tr, va, te)


@pytest.mark.parametrize("fractions", [(0.8, 0.2), (0.5, 0.5, 0.1), (1.0, 0.0, 0.0), (0.9, 0.2, -0.1)])
def test_split_rejects_bad_fractions(fractions):
    with pytest.raises(ConfigError):
        split_indices(10, fractions)


def test_split_dataset_keeps_patients_whole(small_dataset):
    parts = split_dataset(small_dataset, (0.5, 0.25, 0.25), seed=0)
    ids = [r.patient_id for part in parts for r in part]
    assert sorted(ids) == ["p0", "p1", "p2", "p3"]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 500), seed=st.integers(0, 2 ** 16),
       a=st.floats(0.05, 0.9), b=st.floats(0.05, 0.9))
def test_split_partition_property(n, seed, a, b):
    if a + b >= 0.99:
        return
    tr, va, te = split_indices(n, (a, b, 1.0 - a - b), seed)
    assert sorted(tr + va + te) == list(range(n))
    assert abs(len(tr) - a * n) <= 1
