"""Dense passage retrieval with an exact inner-product index.

Scores are the raw inner product between the query embedding and each
passage embedding.  Ties are broken by ascending passage id so results
are fully deterministic.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ramehr.corpus import Corpus, normalize_ws
from ramehr.errors import ConfigError, DataError, NumericError

INDEX_MAGIC = b"RAMIDX1"


class Embedder(Protocol):
    dim: int

    def encode_query(self, text: str) -> np.ndarray: ...

    def encode_passage(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Character 3-gram feature hashing followed by a signed random projection.

    Query and passage roles share one projection, so the embedder is
    symmetric.  Output vectors are float32 with unit L2 norm.
    """

    n_buckets = 4096

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 8:
            raise ConfigError(f"hash embedder needs dim >= 8, got {dim}")
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._proj = rng.choice(np.array([-1.0, 1.0]), size=(self.n_buckets, dim))
        self._salt = seed.to_bytes(8, "little", signed=True)

    def _features(self, text: str) -> np.ndarray:
        counts = np.zeros(self.n_buckets)
        padded = f" {normalize_ws(text).lower()} "
        for i in range(len(padded) - 2):
            counts[zlib.crc32(self._salt + padded[i:i + 3].encode("utf-8")) % self.n_buckets] += 1.0
        return counts

    def _encode(self, text: str) -> np.ndarray:
        if not normalize_ws(text):
            return np.full(self.dim, 1.0 / np.sqrt(self.dim), dtype=np.float32)
        vec = self._features(text) @ self._proj
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            return np.full(self.dim, 1.0 / np.sqrt(self.dim), dtype=np.float32)
        return (vec / norm).astype(np.float32)

    encode_query = _encode
    encode_passage = _encode


def hash_embedder(dim: int = 64, seed: int = 0) -> HashEmbedder:
    return HashEmbedder(dim, seed)


class FileEmbedder:
    """Looks up vectors produced by an external encoder.

    The file is JSONL with one ``{"role": "query"|"passage", "text": ..., "vector": [...]}``
    object per line.  Unknown texts raise ``KeyError``.
    """

    def __init__(self, path: str | Path):
        self._vectors: dict[tuple[str, str], np.ndarray] = {}
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                vec = np.asarray(obj["vector"], dtype=np.float32)
                if dim is None:
                    dim = vec.size
                elif vec.size != dim:
                    raise DataError(f"{path}:{lineno}: vector length {vec.size} != {dim}")
                self._vectors[(obj["role"], normalize_ws(obj["text"]))] = vec
        if dim is None:
            raise DataError(f"{path}: no embeddings found")
        self.dim = dim

    def encode_query(self, text: str) -> np.ndarray:
        return self._vectors[("query", normalize_ws(text))]

    def encode_passage(self, text: str) -> np.ndarray:
        return self._vectors[("passage", normalize_ws(text))]


@dataclass(frozen=True)
class RetrievalResult:
    query_code: str
    hits: tuple[tuple[str, float], ...]

    def to_json(self) -> dict:
        return {"code": self.query_code, "hits": [{"id": pid, "score": s} for pid, s in self.hits]}


class VectorIndex:
    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise DataError(f"index has {len(ids)} ids but matrix shape {matrix.shape}")
        if not np.isfinite(matrix).all():
            raise NumericError("index rows must be finite")
        self.ids = list(ids)
        self.matrix = matrix
        self.dim = matrix.shape[1]
        self._m64 = matrix.astype(np.float64)
        order = np.argsort(np.array(self.ids, dtype=object), kind="stable")
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))

    def __len__(self) -> int:
        return len(self.ids)

    def search(self, qvec: np.ndarray, k: int) -> list[tuple[str, float]]:
        if k <= 0:
            raise ConfigError(f"k must be >= 1, got {k}")
        q = np.asarray(qvec, dtype=np.float32).astype(np.float64)
        if q.shape != (self.dim,):
            raise DataError(f"query dim {q.shape} does not match index dim {self.dim}")
        scores = self._m64 @ q
        n = scores.size
        if k < n:
            kth = np.partition(scores, n - k)[n - k]
            cand = np.flatnonzero(scores >= kth)
        else:
            cand = np.arange(n)
        order = cand[np.lexsort((self._id_rank[cand], -scores[cand]))][:k]
        return [(self.ids[i], float(np.float32(scores[i]))) for i in order]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        header = INDEX_MAGIC + struct.pack("<IQ", self.dim, len(self.ids))
        path.write_bytes(header + self.matrix.astype("<f4").tobytes())
        ids_path(path).write_text("".join(f"{i}\n" for i in self.ids), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        path = Path(path)
        buf = path.read_bytes()
        if buf[:7] != INDEX_MAGIC:
            raise DataError(f"{path}: not an index file (bad magic)")
        dim, count = struct.unpack_from("<IQ", buf, 7)
        matrix = np.frombuffer(buf, dtype="<f4", count=dim * count, offset=7 + 12).reshape(count, dim)
        ids = ids_path(path).read_text(encoding="utf-8").splitlines()
        if len(ids) != count:
            raise DataError(f"{path}: {count} rows but {len(ids)} ids")
        return cls(ids, matrix)


def ids_path(index_path: Path) -> Path:
    return index_path.with_name(index_path.name + ".ids")


def build_index(corpus: Corpus, emb: Embedder) -> VectorIndex:
    if len(corpus) == 0:
        raise DataError("cannot index an empty corpus")
    rows = np.empty((len(corpus), emb.dim), dtype=np.float32)
    for i, p in enumerate(corpus):
        vec = np.asarray(emb.encode_passage(p.text), dtype=np.float32)
        if vec.shape != (emb.dim,):
            raise DataError(f"embedding for passage {p.id!r} has shape {vec.shape}, expected ({emb.dim},)")
        if not np.isfinite(vec).all():
            raise NumericError(f"non-finite embedding for passage {p.id!r}")
        rows[i] = vec
    return VectorIndex(corpus.ids(), rows)


def topk(index: VectorIndex, emb: Embedder, query: str, k: int = 5, query_code: str = "") -> RetrievalResult:
    if k <= 0:
        raise ConfigError(f"k must be >= 1, got {k}")
    hits = index.search(emb.encode_query(query), k)
    return RetrievalResult(query_code or query, tuple(hits))
