"""Coded-event data model: vocabulary, visits, patients, task definitions.

Visits hold code ids only; the :class:`Vocabulary` owns all code metadata.
Everything here is frozen after loading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ramehr.errors import ConfigError, DataError


class CodeType(Enum):
    DISEASE = "disease"
    MEDICATION = "medication"
    PROCEDURE = "procedure"


@dataclass(frozen=True)
class MedicalCode:
    id: str
    kind: CodeType
    name: str

    def __post_init__(self):
        if not self.name.strip():
            raise DataError(f"code {self.id!r} has an empty name")


class Vocabulary:
    """Ordered code table; iteration order is file order and defines vocabulary ids."""

    def __init__(self, codes: Sequence[MedicalCode]):
        self._codes: dict[str, MedicalCode] = {}
        for c in codes:
            if c.id in self._codes:
                raise DataError(f"duplicate code id {c.id!r} in vocabulary")
            self._codes[c.id] = c
        self._rank = {cid: i for i, cid in enumerate(self._codes)}

    def __len__(self) -> int:
        return len(self._codes)

    def __iter__(self) -> Iterator[MedicalCode]:
        return iter(self._codes.values())

    def __contains__(self, code_id: str) -> bool:
        return code_id in self._codes

    def __getitem__(self, code_id: str) -> MedicalCode:
        return self._codes[code_id]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and list(self) == list(other)

    def rank(self, code_id: str) -> int:
        return self._rank[code_id]

    def of_kind(self, kind: CodeType) -> list[MedicalCode]:
        return [c for c in self if c.kind is kind]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for c in self:
                fh.write(json.dumps({"code": c.id, "type": c.kind.value, "name": c.name}) + "\n")


def load_vocab(path: str | Path) -> Vocabulary:
    codes = []
    for lineno, obj in _jsonl(path):
        try:
            codes.append(MedicalCode(str(obj["code"]), CodeType(obj["type"]), str(obj["name"])))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad vocabulary entry ({exc})") from None
    return Vocabulary(codes)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    num_labels: int
    label_names: tuple[str, ...]
    description: str

    def __post_init__(self):
        object.__setattr__(self, "label_names", tuple(self.label_names))
        if self.num_labels < 1:
            raise ConfigError("num_labels must be >= 1")
        if len(self.label_names) != self.num_labels:
            raise ConfigError(
                f"task {self.name!r}: {len(self.label_names)} label names for {self.num_labels} labels"
            )

    @classmethod
    def load(cls, path: str | Path) -> "TaskSpec":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            return cls(obj["name"], int(obj["num_labels"]), tuple(obj["label_names"]), obj["description"])
        except KeyError as exc:
            raise DataError(f"{path}: task file missing field {exc}") from None

    def save(self, path: str | Path) -> None:
        obj = {
            "name": self.name,
            "num_labels": self.num_labels,
            "label_names": list(self.label_names),
            "description": self.description,
        }
        Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Visit:
    codes: tuple[str, ...]
    timestamp_rank: int

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(self.codes))
        if len(set(self.codes)) != len(self.codes):
            raise DataError(f"visit {self.timestamp_rank} repeats a code")
        if self.timestamp_rank < 0:
            raise DataError("timestamp_rank must be >= 0")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if not self.visits:
            raise DataError(f"patient {self.patient_id!r} has no visits")
        ranks = [v.timestamp_rank for v in self.visits]
        if any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise DataError(f"patient {self.patient_id!r}: visit ranks not strictly increasing")
        if any(v not in (0, 1) for v in self.labels):
            raise DataError(f"patient {self.patient_id!r}: labels must be 0/1")

    def all_codes(self) -> list[str]:
        seen: dict[str, None] = {}
        for v in self.visits:
            for c in v.codes:
                seen.setdefault(c, None)
        return list(seen)


@dataclass(frozen=True)
class Dataset:
    records: tuple[PatientRecord, ...]
    task: TaskSpec
    vocab: Vocabulary = field(compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PatientRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> PatientRecord:
        return self.records[i]

    def labels(self) -> np.ndarray:
        return np.array([r.labels for r in self.records], dtype=np.float32).reshape(len(self), self.task.num_labels)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in indices), self.task, self.vocab)

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        recs = tuple(
            PatientRecord(r.patient_id, r.visits, tuple(int(x) for x in row))
            for r, row in zip(self.records, labels)
        )
        return Dataset(recs, self.task, self.vocab)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                obj = {
                    "patient_id": r.patient_id,
                    "visits": [{"codes": list(v.codes)} for v in r.visits],
                    "labels": list(r.labels),
                }
                fh.write(json.dumps(obj) + "\n")


def _jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_dataset(path: str | Path, vocab: Vocabulary, task: TaskSpec) -> Dataset:
    """Read patient JSONL, validating every code id and label vector."""
    records = []
    seen_ids: set[str] = set()
    for lineno, obj in _jsonl(path):
        try:
            pid = str(obj["patient_id"])
            raw_visits = obj["visits"]
            labels = obj["labels"]
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from None
        if pid in seen_ids:
            raise DataError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
        seen_ids.add(pid)
        if len(labels) != task.num_labels:
            raise DataError(
                f"{path}:{lineno}: patient {pid!r} has {len(labels)} labels, task {task.name!r} expects {task.num_labels}"
            )
        visits = []
        for rank, v in enumerate(raw_visits):
            codes = [str(c) for c in v["codes"]]
            for c in codes:
                if c not in vocab:
                    raise DataError(f"{path}:{lineno}: unknown code id {c!r} (patient {pid!r})")
            try:
                visits.append(Visit(tuple(codes), rank))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
        try:
            records.append(PatientRecord(pid, tuple(visits), tuple(labels)))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return Dataset(tuple(records), task, vocab)


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Patient-level random partition into train/val/test."""
    idx = split_indices(len(ds), fractions, seed)
    return tuple(ds.subset(part) for part in idx)  # type: ignore[return-value]


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    train = sorted(perm[:n_train].tolist())
    val = sorted(perm[n_train:n_train + n_val].tolist())
    test = sorted(perm[n_train + n_val:].tolist())
    return train, val, test
