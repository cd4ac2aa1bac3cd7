"""Unified passage corpus built from exported knowledge sources.

Text sources (PubMed, DrugBank, MeSH, Wikipedia) arrive as passage JSONL;
knowledge-graph triplets arrive as triplet JSONL and are turned into
sentences with a fixed relation template table.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from ramehr.errors import DataError


class SourceTag(Enum):
    PUBMED = "pubmed"
    DRUGBANK = "drugbank"
    MESH = "mesh"
    WIKIPEDIA = "wikipedia"
    KG = "kg"


RELATION_TEMPLATES: dict[str, str] = {
    "phenotype present": "[ent1] has the phenotype [ent2]",
    "carrier": "[ent1] interacts with the carrier [ent2]",
    "enzyme": "[ent1] interacts with the enzyme [ent2]",
    "target": "The target of [ent1] is [ent2]",
    "transporter": "[ent2] transports [ent1]",
    "associated with": "[ent2] is associated with [ent1]",
    "parent-child": "[ent2] is a subclass of [ent1]",
    "side effect": "[ent1] has the side effect of [ent2]",
}

_WS = re.compile(r"\s+")
_SLOT = re.compile(r"\[ent([12])\]")


def normalize_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


class UnknownRelationError(DataError):
    def __init__(self, relation: str):
        super().__init__(f"no sentence template for relation {relation!r}")
        self.relation = relation


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str


@dataclass(frozen=True)
class Passage:
    id: str
    source: SourceTag
    text: str

    def __post_init__(self):
        object.__setattr__(self, "text", normalize_ws(self.text))
        if not self.text:
            raise DataError(f"passage {self.id!r} has empty text")

    def to_json(self) -> dict:
        return {"id": self.id, "source": self.source.value, "text": self.text}


def verbalize_triplet(t: Triplet) -> str:
    try:
        template = RELATION_TEMPLATES[t.relation]
    except KeyError:
        raise UnknownRelationError(t.relation) from None
    # single pass: entity strings that themselves contain "[ent1]" stay verbatim
    return _SLOT.sub(lambda m: t.head if m.group(1) == "1" else t.tail, template)


def triplet_passage_id(t: Triplet) -> str:
    return f"kg:{t.head}|{t.relation}|{t.tail}"


class Corpus:
    """Ordered, id-unique collection of passages."""

    def __init__(self, passages: Iterable[Passage] = ()):
        self._by_id: dict[str, Passage] = {}
        for p in passages:
            self.add(p)

    def add(self, p: Passage) -> None:
        if p.id in self._by_id:
            raise DataError(f"duplicate passage id {p.id!r}")
        self._by_id[p.id] = p

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self._by_id.values())

    def __getitem__(self, pid: str) -> Passage:
        return self._by_id[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._by_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and list(self) == list(other)

    def ids(self) -> list[str]:
        return list(self._by_id)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self:
                fh.write(json.dumps(p.to_json()) + "\n")


def _read_units(path: Path) -> Iterator[tuple[int, Passage]]:
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
            try:
                if "relation" in obj:
                    t = Triplet(str(obj["head"]), str(obj["relation"]), str(obj["tail"]))
                    yield lineno, Passage(triplet_passage_id(t), SourceTag.KG, verbalize_triplet(t))
                else:
                    yield lineno, Passage(str(obj["id"]), SourceTag(obj["source"]), str(obj["text"]))
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from None
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def ingest(paths: Sequence[str | Path]) -> Corpus:
    """Merge passage and triplet JSONL files, in argument order, into one corpus."""
    corpus = Corpus()
    for path in paths:
        path = Path(path)
        for lineno, passage in _read_units(path):
            if passage.id in corpus:
                raise DataError(f"{path}:{lineno}: duplicate passage id {passage.id!r}")
            corpus.add(passage)
    return corpus


def load_corpus(path: str | Path) -> Corpus:
    return ingest([path])
