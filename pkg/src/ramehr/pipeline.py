"""End-to-end wiring: corpus -> index -> summaries -> co-training -> reports.

``RunConfig`` carries every knob the command line exposes.  Its defaults are
sized for a single CPU core (narrow models, short documents, larger learning
rates than a pretrained encoder would use); ``CoTrainConfig()`` on its own
keeps the fine-tuning defaults.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ramehr.augmented import HashTokenizer, TextEncoderConfig
from ramehr.corpus import Corpus
from ramehr.cotrain import CoTrainConfig, CoTrainer, PreparedData
from ramehr.ehr import Dataset, MedicalCode, TaskSpec, split_indices
from ramehr.errors import ConfigError
from ramehr.hygt import HyGTConfig
from ramehr.metrics import EvalReport
from ramehr.retrieval import Embedder, FileEmbedder, VectorIndex, build_index, hash_embedder
from ramehr.summarizer import HTTPClient, StubClient, SummaryCache, SummaryClient, Summarizer
from ramehr.synth import SynthBenchmark, SynthConfig, generate


@dataclass(frozen=True)
class HTTPConfig:
    endpoint: str = ""
    model: str = ""
    token_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0


@dataclass(frozen=True)
class Paths:
    """File locations; relative paths resolve against the working directory."""

    vocab: str = "vocab.jsonl"
    dataset: str = "dataset.jsonl"
    task: str = "task.json"
    sources: tuple[str, ...] = ("passages.jsonl", "triplets.jsonl")
    corpus: str = "corpus.jsonl"
    index: str = "index.bin"
    retrieval: str = "retrieval.jsonl"
    cache: str = "summaries.jsonl"
    checkpoints: str = "checkpoints"
    report: str = "report.json"

    def resolve(self, name: str, workdir: str | Path = ".") -> Path:
        return Path(workdir) / getattr(self, name)


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = Paths()
    train: CoTrainConfig = CoTrainConfig(lr_aug=3e-3, lr_local=1e-3)
    aug: TextEncoderConfig = TextEncoderConfig(d=32, max_len=64, vocab_size=2 ** 14)
    local: HyGTConfig = HyGTConfig(d=32)
    k: int = 5
    embedder: str = "hash"
    embed_dim: int = 64
    embed_seed: int = 0
    embedder_file: str | None = None
    client: str = "stub"
    stub_words: int = 12
    http: HTTPConfig = HTTPConfig()
    workers: int = 1
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    tokenizer_seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.embedder not in ("hash", "file"):
            raise ConfigError(f"embedder must be 'hash' or 'file', got {self.embedder!r}")
        if self.embedder == "file" and not self.embedder_file:
            raise ConfigError("embedder 'file' needs embedder_file")
        if self.client not in ("stub", "http"):
            raise ConfigError(f"client must be 'stub' or 'http', got {self.client!r}")
        if self.client == "http" and not (self.http.endpoint and self.http.model):
            raise ConfigError("client 'http' needs http.endpoint and http.model")
        if len(self.split) != 3:
            raise ConfigError("split needs three fractions")

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"] = self.train.to_json()
        out["split"] = list(self.split)
        out["paths"]["sources"] = list(self.paths.sources)
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RunConfig":
        obj = dict(obj)
        nested = {"train": CoTrainConfig, "aug": TextEncoderConfig, "local": HyGTConfig, "http": HTTPConfig,
                  "paths": Paths}
        base = cls()
        for key, typ in nested.items():
            if key in obj:
                if not isinstance(obj[key], Mapping):
                    raise ConfigError(f"config key {key!r} must be an object")
                merged = _field_dict(getattr(base, key))
                sub = dict(obj[key])
                if typ is CoTrainConfig and "lambda" in sub:
                    sub["lam"] = sub.pop("lambda")
                merged.update(sub)
                if typ is Paths and "sources" in merged:
                    merged["sources"] = tuple(merged["sources"])
                obj[key] = _build(typ, merged, key)
        if "split" in obj:
            obj["split"] = tuple(obj["split"])
        return _build(cls, {**_field_dict(base, shallow=True), **obj}, "config")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _field_dict(obj, shallow: bool = False) -> dict:
    if shallow:
        return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    return dataclasses.asdict(obj)


def _build(cls, values: Mapping[str, Any], where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from None


def load_run_config(path: str | Path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_json(obj)


# -- component factories -----------------------------------------------------

def make_embedder(cfg: RunConfig) -> Embedder:
    if cfg.embedder == "file":
        return FileEmbedder(cfg.embedder_file)
    return hash_embedder(cfg.embed_dim, cfg.embed_seed)


def make_client(cfg: RunConfig) -> SummaryClient:
    if cfg.client == "http":
        h = cfg.http
        return HTTPClient(h.endpoint, h.model, h.token_env, h.timeout)
    return StubClient(cfg.stub_words)


def summarize_vocab(codes: Sequence[MedicalCode], task: TaskSpec, corpus: Corpus, index: VectorIndex,
                    emb: Embedder, client: SummaryClient, cache: SummaryCache, cfg: RunConfig) -> dict[str, str]:
    """Summaries for ``codes`` (cached ones are reused); returns code id -> text for ``task``."""
    Summarizer(corpus, index, emb, client, cache, k=cfg.k).summarize_all(list(codes), task, cfg.workers)
    return cache.texts_for(task.name)


def prepare(ds: Dataset, summaries: Mapping[str, str], cfg: RunConfig) -> PreparedData:
    tok = HashTokenizer(cfg.aug.vocab_size, cfg.tokenizer_seed)
    return PreparedData(ds, summaries, tok, max_len=cfg.aug.max_len)


def make_trainer(data: PreparedData, cfg: RunConfig, mode: str = "both", **train_changes) -> CoTrainer:
    train = dataclasses.replace(cfg.train, **train_changes) if train_changes else cfg.train
    return CoTrainer(data, train, cfg.aug, cfg.local, mode=mode)


# -- synthetic experiment ------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = SynthConfig()
    run: RunConfig = RunConfig()


@dataclass
class ExperimentResult:
    reports: dict[str, EvalReport]
    timings: dict[str, float] = field(default_factory=dict)
    stub_calls: int = 0

    def auroc(self, name: str) -> float:
        return self.reports[name].auroc

    def to_json(self) -> dict:
        """Deterministic part of the result (timings excluded)."""
        return {name: rep.to_json() for name, rep in sorted(self.reports.items())}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def permuted_labels(labels: np.ndarray, seed: int) -> np.ndarray:
    """Shuffle whole label rows across patients (keeps each label's prevalence and co-occurrence)."""
    return labels[np.random.default_rng([seed, 4]).permutation(labels.shape[0])]


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), bench: SynthBenchmark | None = None,
                   log=None) -> ExperimentResult:
    """Three trainings on one synthetic benchmark.

    * lambda = 0: the two models train independently; their test AUROCs are
      the single-model baselines.
    * lambda = configured value: co-training; the blend is the headline number.
    * the same co-training on row-permuted labels: a null control.
    """
    say = log or (lambda msg: None)
    run = cfg.run
    times: dict[str, float] = {}
    t0 = time.perf_counter()

    bench = bench if bench is not None else generate(cfg.synth)
    corpus = bench.corpus()
    emb = make_embedder(run)
    index = build_index(corpus, emb)
    client = make_client(run)
    texts = summarize_vocab(list(bench.vocab), bench.task, corpus, index, emb, client, SummaryCache(None), run)
    data = prepare(bench.dataset, texts, run)
    tr, va, te = split_indices(len(data), run.split, run.train.seed)
    times["prepare"] = time.perf_counter() - t0
    say(f"prepared {len(data)} patients, {len(corpus)} passages in {times['prepare']:.1f}s")

    reports: dict[str, EvalReport] = {}

    def train(name: str, prepared: PreparedData, lam: float, outputs: Mapping[str, str]) -> None:
        t = time.perf_counter()
        trainer = make_trainer(prepared, run, lam=lam)
        trainer.fit(tr, va)
        for which, key in outputs.items():
            reports[key] = trainer.evaluate(te, which)
        times[name] = time.perf_counter() - t
        summary = ", ".join(f"{key}={reports[key].auroc:.4f}" for key in outputs.values())
        say(f"{name}: {summary} ({times[name]:.1f}s)")

    train("independent", data, 0.0, {"aug": "aug_only", "local": "local_only", "blend": "blend_lambda0"})
    train("cotrain", data, run.train.lam, {"blend": "cotrained_blend", "aug": "cotrained_aug",
                                           "local": "cotrained_local"})
    control = data.with_labels(permuted_labels(data.labels, run.train.seed))
    train("control", control, run.train.lam, {"blend": "control_blend", "aug": "control_aug",
                                              "local": "control_local"})
    times["total"] = time.perf_counter() - t0
    return ExperimentResult(reports, times, getattr(client, "calls", 0))
