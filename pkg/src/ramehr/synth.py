"""Deterministic synthetic benchmark with planted, complementary label signal.

Every label has two disjoint sets of predictive codes:

* a co-occurrence set drawn from frequent codes, whose knowledge passages
  say nothing about the label; the visit model can learn these from data;
* a knowledge set drawn from the whole vocabulary (rare codes included),
  whose passages carry the label's marker words; the text model can pick
  those up through retrieved summaries and generalize to rare codes.

Code names are two-word combinations from small shared word pools, so a
name's tokens alone identify a code only weakly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ramehr.corpus import Corpus, Passage, SourceTag, Triplet, triplet_passage_id, verbalize_triplet
from ramehr.ehr import CodeType, Dataset, MedicalCode, PatientRecord, TaskSpec, Visit, Vocabulary
from ramehr.errors import ConfigError

_SYLLABLES = ("ka", "lo", "ran", "vi", "ter", "mo", "sen", "dra", "pli", "nu", "zel", "fa",
              "quin", "bru", "tas", "gor", "phe", "lin", "ost", "mar", "cy", "dol", "rex", "sa")
_TYPE_PREFIX = {CodeType.DISEASE: "ICD", CodeType.MEDICATION: "ATC", CodeType.PROCEDURE: "PRC"}
_TEXT_SOURCES = {
    CodeType.DISEASE: (SourceTag.PUBMED, SourceTag.MESH, SourceTag.WIKIPEDIA),
    CodeType.MEDICATION: (SourceTag.DRUGBANK, SourceTag.PUBMED, SourceTag.WIKIPEDIA),
    CodeType.PROCEDURE: (SourceTag.MESH, SourceTag.PUBMED, SourceTag.WIKIPEDIA),
}


@dataclass(frozen=True)
class SynthConfig:
    num_patients: int = 2000
    num_codes: int = 24            # per code type
    num_labels: int = 5
    codes_per_visit: int = 5
    visits_per_patient: int = 3
    knowledge_signal: float = 0.7  # strength of the knowledge-set signal
    cooccurrence_signal: float = 0.7
    prevalence: float = 0.3
    cooc_set_size: int = 3
    knowledge_set_size: int = 8
    passages_per_code: int = 3
    distractor_passages: int = 40
    popularity_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_patients, self.num_codes, self.num_labels, self.codes_per_visit,
                  self.visits_per_patient, self.passages_per_code)
        if min(counts) < 1:
            raise ConfigError("synthetic benchmark counts must all be >= 1")
        for name in ("knowledge_signal", "cooccurrence_signal"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError("prevalence must lie in (0, 1)")
        if self.codes_per_visit > 3 * self.num_codes:
            raise ConfigError("codes_per_visit exceeds the vocabulary size")


@dataclass
class SynthBenchmark:
    config: SynthConfig
    dataset: Dataset
    vocab: Vocabulary
    task: TaskSpec
    passages: list[Passage]
    triplets: list[Triplet]
    oracle_summaries: dict[str, str]
    cooc_sets: list[list[str]]
    knowledge_sets: list[list[str]]
    markers: list[str] = field(default_factory=list)

    def corpus(self) -> Corpus:
        kg = [Passage(triplet_passage_id(t), SourceTag.KG, verbalize_triplet(t)) for t in self.triplets]
        return Corpus(self.passages + kg)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "vocab": out / "vocab.jsonl",
            "dataset": out / "dataset.jsonl",
            "task": out / "task.json",
            "passages": out / "passages.jsonl",
            "triplets": out / "triplets.jsonl",
            "oracle": out / "oracle_summaries.jsonl",
            "meta": out / "synth_meta.json",
        }
        self.vocab.save(paths["vocab"])
        self.dataset.save(paths["dataset"])
        self.task.save(paths["task"])
        with open(paths["passages"], "w", encoding="utf-8") as fh:
            for p in self.passages:
                fh.write(json.dumps(p.to_json()) + "\n")
        with open(paths["triplets"], "w", encoding="utf-8") as fh:
            for t in self.triplets:
                fh.write(json.dumps({"head": t.head, "relation": t.relation, "tail": t.tail}) + "\n")
        with open(paths["oracle"], "w", encoding="utf-8") as fh:
            for code, text in self.oracle_summaries.items():
                fh.write(json.dumps({"code": code, "summary": text}) + "\n")
        meta = {"config": asdict(self.config), "cooc_sets": self.cooc_sets,
                "knowledge_sets": self.knowledge_sets, "markers": self.markers}
        paths["meta"].write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        return paths


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], syllables=(2, 3)) -> list[str]:
    words: list[str] = []
    while len(words) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x, dtype=np.float64)


def generate(cfg: SynthConfig = SynthConfig()) -> SynthBenchmark:
    rng = np.random.default_rng(cfg.seed)
    taken: set[str] = set()

    # vocabulary: names are two words from small per-type pools
    pool = int(np.ceil(np.sqrt(cfg.num_codes))) + 1
    codes: list[MedicalCode] = []
    for kind in CodeType:
        first = _pseudo_words(rng, pool, taken)
        second = _pseudo_words(rng, pool, taken)
        combos = [(a, b) for a in first for b in second]
        pick = rng.choice(len(combos), size=cfg.num_codes, replace=False)
        for j, ci in enumerate(pick):
            a, b = combos[ci]
            codes.append(MedicalCode(f"{_TYPE_PREFIX[kind]}:{j:03d}", kind, f"{a} {b}"))
    vocab = Vocabulary(codes)
    ids = [c.id for c in codes]
    n_codes = len(ids)

    ranks = rng.permutation(n_codes)
    popularity = 1.0 / (ranks + 1.0) ** cfg.popularity_exponent
    popularity /= popularity.sum()

    # planted signal sets
    frequent = np.argsort(-popularity)[: max(cfg.cooc_set_size * 3, n_codes // 3)]
    cooc_sets, know_sets = [], []
    for _ in range(cfg.num_labels):
        c_idx = rng.choice(frequent, size=min(cfg.cooc_set_size, frequent.size), replace=False)
        rest = np.setdiff1d(np.arange(n_codes), c_idx)
        k_idx = rng.choice(rest, size=min(cfg.knowledge_set_size, rest.size), replace=False)
        cooc_sets.append(sorted(int(i) for i in c_idx))
        know_sets.append(sorted(int(i) for i in k_idx))
    markers = _pseudo_words(rng, cfg.num_labels, taken, syllables=(3, 3))
    fillers = _pseudo_words(rng, 60, taken)

    # patients
    records = []
    presence = np.zeros((cfg.num_patients, n_codes), dtype=bool)
    for p in range(cfg.num_patients):
        visits = []
        for v in range(cfg.visits_per_patient):
            chosen = rng.choice(n_codes, size=cfg.codes_per_visit, replace=False, p=popularity)
            presence[p, chosen] = True
            visits.append(Visit(tuple(ids[i] for i in chosen), v))
        records.append((f"P{p:05d}", tuple(visits)))

    # labels: thresholded mixture of the two planted scores plus noise
    rho_c, rho_k = cfg.cooccurrence_signal, cfg.knowledge_signal
    noise_sd = float(np.sqrt(max(1.0 - (rho_c ** 2 + rho_k ** 2) / 2.0, 0.1)))
    labels = np.zeros((cfg.num_patients, cfg.num_labels), dtype=np.int64)
    for l in range(cfg.num_labels):
        zc = _zscore(presence[:, cooc_sets[l]].sum(axis=1).astype(np.float64))
        zk = _zscore(presence[:, know_sets[l]].sum(axis=1).astype(np.float64))
        score = rho_c * zc + rho_k * zk + noise_sd * rng.standard_normal(cfg.num_patients)
        n_pos = int(round(cfg.prevalence * cfg.num_patients))
        top = np.argsort(-score, kind="stable")[:n_pos]
        labels[top, l] = 1

    task = TaskSpec(
        name="synthetic-phenotype",
        num_labels=cfg.num_labels,
        label_names=tuple(f"phenotype-{l}" for l in range(cfg.num_labels)),
        description="predict which synthetic phenotypes are present at the patient's next visit",
    )
    dataset = Dataset(
        tuple(PatientRecord(pid, visits, tuple(int(x) for x in labels[i])) for i, (pid, visits) in enumerate(records)),
        task, vocab,
    )

    # knowledge: per-code passages, KG triplets, distractors
    code_markers: dict[int, list[str]] = {i: [] for i in range(n_codes)}
    for l, ks in enumerate(know_sets):
        for i in ks:
            code_markers[i].append(markers[l])
    passages: list[Passage] = []
    triplets: list[Triplet] = []
    oracle: dict[str, str] = {}
    for i, code in enumerate(codes):
        sources = _TEXT_SOURCES[code.kind]
        for j in range(cfg.passages_per_code):
            filler = " ".join(rng.choice(fillers, size=6))
            if code_markers[i]:
                body = f"{code.name} is linked to {' '.join(code_markers[i])} {filler}"
            else:
                body = f"{code.name} is described as {filler}"
            passages.append(Passage(f"{code.id}#{j}", sources[j % len(sources)], body))
        for m in code_markers[i]:
            triplets.append(Triplet(code.name, "associated with", m))
        if code_markers[i]:
            oracle[code.id] = f"linked to {' '.join(code_markers[i])}"
        else:
            oracle[code.id] = "no specific findings"
    for j in range(cfg.distractor_passages):
        passages.append(Passage(f"misc#{j}", SourceTag.WIKIPEDIA, " ".join(rng.choice(fillers, size=10))))

    return SynthBenchmark(
        config=cfg, dataset=dataset, vocab=vocab, task=task, passages=passages, triplets=triplets,
        oracle_summaries=oracle,
        cooc_sets=[[ids[i] for i in s] for s in cooc_sets],
        knowledge_sets=[[ids[i] for i in s] for s in know_sets],
        markers=markers,
    )
