"""Task-conditioned knowledge summaries per medical code, with a persistent cache.

For each code the top-k passages retrieved for its surface name are rendered
into a prompt together with the task description, sent to a completion
client, and the answer is cached under ``(code id, task name)``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from ramehr.corpus import Corpus, Passage
from ramehr.ehr import MedicalCode, TaskSpec
from ramehr.errors import ConfigError, DataError, SummarizerError
from ramehr.retrieval import Embedder, VectorIndex, topk

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = (
    "Task: {task}\n"
    "Below are passages retrieved for the {code_type} \"{code_name}\". "
    "Write a short summary of the knowledge in them that matters for the task above.\n"
    "Passages:\n"
    "{passages}\n"
    "Summary:"
)

_PASSAGE_LINE = re.compile(r"^\[(\d+)\] (.*)$", re.MULTILINE)


@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_TEMPLATE

    def render(self, **slots: str) -> str:
        try:
            return self.text.format_map(slots)
        except KeyError as exc:
            raise ConfigError(f"prompt template slot {exc} is unresolved") from None


def render_prompt(tpl: PromptTemplate, task: TaskSpec, code: MedicalCode, passages: Sequence[Passage]) -> str:
    if not passages:
        raise ConfigError(f"no passages to summarize for code {code.id!r}")
    listing = "\n".join(f"[{i}] {p.text}" for i, p in enumerate(passages, start=1))
    return tpl.render(task=task.description, code_type=code.kind.value, code_name=code.name, passages=listing)


class SummaryClient(Protocol):
    tag: str

    def complete(self, prompt: str) -> str: ...


class StubClient:
    """Deterministic offline client: echoes the first ``n_words`` words of the listed passages."""

    def __init__(self, n_words: int = 40):
        self.n_words = n_words
        self.tag = f"stub-{n_words}"
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        texts = [m.group(2) for m in _PASSAGE_LINE.finditer(prompt)]
        words = " ".join(texts).split() if texts else prompt.split()
        return " ".join(words[: self.n_words])


class HTTPClient:
    """Client for an OpenAI-style chat-completions endpoint."""

    def __init__(self, endpoint: str, model: str, token_env: str = "OPENAI_API_KEY", timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.tag = f"http:{model}"

    def complete(self, prompt: str) -> str:
        body = json.dumps({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, method="POST")
        req.add_header("Content-Type", "application/json")
        token = os.environ.get(self.token_env)
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise SummarizerError(f"completion request failed: {exc}") from exc
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise SummarizerError(f"unexpected completion payload: {str(payload)[:200]}") from None
        return str(text).strip()


@dataclass(frozen=True)
class KnowledgeSummary:
    code: str
    task: str
    text: str
    provenance: tuple[str, ...]
    client_tag: str

    def __post_init__(self):
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if not self.text.strip():
            raise SummarizerError(f"empty summary for code {self.code!r}")

    def to_json(self) -> dict:
        return {
            "code": self.code,
            "task": self.task,
            "summary": self.text,
            "provenance": list(self.provenance),
            "client_tag": self.client_tag,
        }


class SummaryCache:
    """Map ``(code, task) -> KnowledgeSummary`` backed by append-only JSONL.

    Concurrent ``get_or_create`` calls for the same key run the factory once;
    the other callers wait for and share its result.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[tuple[str, str], KnowledgeSummary] = {}
        self._inflight: dict[tuple[str, str], threading.Event] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._replay()

    def _replay(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    s = KnowledgeSummary(obj["code"], obj["task"], obj["summary"],
                                         tuple(obj["provenance"]), obj["client_tag"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DataError(f"{self.path}:{lineno}: bad cache entry ({exc})") from None
                key = (s.code, s.task)
                if key in self._entries:
                    raise DataError(f"{self.path}:{lineno}: duplicate cache key {key}")
                self._entries[key] = s

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._entries

    def get(self, code: str, task: str) -> KnowledgeSummary | None:
        return self._entries.get((code, task))

    def items(self) -> dict[tuple[str, str], KnowledgeSummary]:
        with self._lock:
            return dict(self._entries)

    def texts_for(self, task: str) -> dict[str, str]:
        return {code: s.text for (code, t), s in self.items().items() if t == task}

    def put(self, summary: KnowledgeSummary) -> None:
        key = (summary.code, summary.task)
        with self._lock:
            if key in self._entries:
                raise DataError(f"cache already holds {key}")
            self._write(summary)
            self._entries[key] = summary

    def _write(self, summary: KnowledgeSummary) -> None:
        if self.path is None:
            return
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(summary.to_json()) + "\n")
                fh.flush()
        except OSError as exc:
            raise SummarizerError(f"could not persist summary for {summary.code!r}: {exc}") from exc

    def get_or_create(self, code: str, task: str, factory: Callable[[], KnowledgeSummary]) -> KnowledgeSummary:
        key = (code, task)
        while True:
            with self._lock:
                hit = self._entries.get(key)
                if hit is not None:
                    return hit
                event = self._inflight.get(key)
                if event is None:
                    event = self._inflight[key] = threading.Event()
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                continue  # re-check: the owner may have failed
            try:
                summary = factory()
                self.put(summary)
                return summary
            finally:
                with self._lock:
                    del self._inflight[key]
                event.set()


def complete_with_retry(client: SummaryClient, prompt: str, retries: int = 3, backoff: float = 0.5) -> str:
    """Call ``client.complete`` with up to ``retries`` extra attempts and exponential backoff."""
    attempt = 0
    while True:
        try:
            text = client.complete(prompt)
            if not text.strip():
                raise SummarizerError("client returned an empty completion")
            return text
        except Exception as exc:
            if attempt >= retries:
                raise SummarizerError(f"completion failed after {attempt + 1} attempts: {exc}") from exc
            delay = backoff * (2 ** attempt)
            log.warning("completion attempt %d failed (%s); retrying in %.2fs", attempt + 1, exc, delay)
            if delay > 0:
                time.sleep(delay)
            attempt += 1


@dataclass
class Summarizer:
    """Bundles what a summarization pass needs; ``summarize`` is the per-code entry point."""

    corpus: Corpus
    index: VectorIndex
    emb: Embedder
    client: SummaryClient
    cache: SummaryCache
    k: int = 5
    template: PromptTemplate = field(default_factory=PromptTemplate)
    retries: int = 3
    backoff: float = 0.5

    def summarize(self, code: MedicalCode, task: TaskSpec) -> KnowledgeSummary:
        return summarize_code(code, task, self.corpus, self.index, self.emb, self.client, self.cache,
                              k=self.k, template=self.template, retries=self.retries, backoff=self.backoff)

    def summarize_all(self, codes: Sequence[MedicalCode], task: TaskSpec, workers: int = 1) -> list[KnowledgeSummary]:
        if workers <= 1:
            return [self.summarize(c, task) for c in codes]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda c: self.summarize(c, task), codes))


def summarize_code(
    code: MedicalCode,
    task: TaskSpec,
    corpus: Corpus,
    index: VectorIndex,
    emb: Embedder,
    client: SummaryClient,
    cache: SummaryCache,
    k: int = 5,
    template: PromptTemplate = PromptTemplate(),
    retries: int = 3,
    backoff: float = 0.5,
) -> KnowledgeSummary:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")

    def make() -> KnowledgeSummary:
        result = topk(index, emb, code.name, k, query_code=code.id)
        passages = [corpus[pid] for pid, _ in result.hits]
        prompt = render_prompt(template, task, code, passages)
        text = complete_with_retry(client, prompt, retries, backoff)
        return KnowledgeSummary(code.id, task.name, text, tuple(p.id for p in passages), client.tag)

    return cache.get_or_create(code.id, task.name, make)


def summaries_from_mapping(texts: Mapping[str, str], task: str, tag: str = "oracle") -> list[KnowledgeSummary]:
    return [KnowledgeSummary(code, task, text, (), tag) for code, text in texts.items()]
