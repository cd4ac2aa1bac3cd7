"""Knowledge-augmented predictor over flattened, summary-enriched visit text.

A patient becomes three documents (diseases, medications, procedures).  Each
document walks the visits from most recent to earliest and emits
``code name + summary`` for every code of that type.  One encoder, shared by
the three documents, maps each to its [CLS] vector; the three vectors are
concatenated in (disease, medication, procedure) order and fed to an MLP.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ramehr import tensor as T
from ramehr.ehr import CodeType, PatientRecord, Vocabulary
from ramehr.errors import ConfigError
from ramehr.nn import head_dim, init_block, init_mlp, mlp, self_attention
from ramehr.tensor import Tensor

PAD_ID = 0
CLS_ID = 1
_RESERVED = 2

DOC_KINDS = (CodeType.DISEASE, CodeType.MEDICATION, CodeType.PROCEDURE)


class HashTokenizer:
    """Whitespace tokenizer mapping lower-cased tokens to hashed ids."""

    def __init__(self, vocab_size: int = 2 ** 16, seed: int = 0):
        if vocab_size <= _RESERVED:
            raise ConfigError("vocab_size too small")
        self.vocab_size = vocab_size
        self._salt = seed.to_bytes(8, "little", signed=True)
        self._memo: dict[str, int] = {}

    def token_id(self, token: str) -> int:
        tid = self._memo.get(token)
        if tid is None:
            h = zlib.crc32(self._salt + token.lower().encode("utf-8"))
            tid = self._memo[token] = _RESERVED + h % (self.vocab_size - _RESERVED)
        return tid

    def encode(self, text: str) -> list[int]:
        return [self.token_id(t) for t in text.split()]


@dataclass(frozen=True)
class FlattenedDoc:
    kind: CodeType
    tokens: tuple[int, ...]


def flatten_patient(p: PatientRecord, kind: CodeType, summaries: Mapping[str, str], vocab: Vocabulary,
                    tokenizer: HashTokenizer, max_len: int = 512) -> FlattenedDoc:
    """Most recent visit first; within a visit, codes keep their stored order.

    Codes without a summary contribute their name only.
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    tokens = [CLS_ID]
    for visit in reversed(p.visits):
        for cid in visit.codes:
            code = vocab[cid]
            if code.kind is not kind:
                continue
            text = code.name
            summary = summaries.get(cid)
            if summary:
                text = f"{text} {summary}"
            tokens.extend(tokenizer.encode(text))
            if len(tokens) >= max_len:
                return FlattenedDoc(kind, tuple(tokens[:max_len]))
    return FlattenedDoc(kind, tuple(tokens))


@dataclass(frozen=True)
class TextEncoderConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn_mult: int = 2
    max_len: int = 512
    vocab_size: int = 2 ** 16
    kind: str = "transformer"  # or "bag": mean of token embeddings
    init_std: float = 0.02


class TextEncoder:
    def __init__(self, cfg: TextEncoderConfig, rng: np.random.Generator, dtype=np.float32):
        if cfg.kind not in ("transformer", "bag"):
            raise ConfigError(f"unknown encoder kind {cfg.kind!r}")
        head_dim(cfg.d, cfg.heads)
        self.cfg = cfg
        self.params: dict[str, Tensor] = {
            "tok_emb": T.normal_param(rng, (cfg.vocab_size, cfg.d), cfg.init_std, dtype),
        }
        if cfg.kind == "transformer":
            self.params["pos_emb"] = T.normal_param(rng, (cfg.max_len, cfg.d), cfg.init_std, dtype)
            for n in range(cfg.layers):
                self.params.update(init_block(rng, cfg.d, cfg.ffn_mult * cfg.d, f"enc{n}", dtype))

    def encode(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        """[B, T] token ids with validity mask -> [B, d] [CLS] representations."""
        b, t = tokens.shape
        x = T.take(self.params["tok_emb"], tokens)
        if self.cfg.kind == "bag":
            m = Tensor(mask[..., None].astype(x.dtype))
            counts = Tensor(mask.sum(axis=1, keepdims=True).astype(x.dtype))
            return (x * m).sum(axis=1) / counts
        if t > self.cfg.max_len:
            raise ConfigError(f"document length {t} exceeds max_len {self.cfg.max_len}")
        x = x + T.take(self.params["pos_emb"], np.arange(t))
        last = self.cfg.layers - 1
        for n in range(self.cfg.layers):
            x = self_attention(x, mask, self.params, f"enc{n}", self.cfg.heads, first_only=(n == last))
        return x.reshape(b, self.cfg.d)


@dataclass(frozen=True)
class AugPrediction:
    logits: np.ndarray
    probs: np.ndarray


def pack_docs(docs: Sequence[Sequence[FlattenedDoc]]) -> tuple[np.ndarray, np.ndarray]:
    """Per-patient (disease, medication, procedure) docs -> tokens/mask of shape [3, B, T]."""
    width = max(len(doc.tokens) for triple in docs for doc in triple)
    tokens = np.full((len(DOC_KINDS), len(docs), width), PAD_ID, dtype=np.int64)
    for j, triple in enumerate(docs):
        for i, doc in enumerate(triple):
            tokens[i, j, :len(doc.tokens)] = doc.tokens
    mask = np.zeros_like(tokens, dtype=bool)
    for j, triple in enumerate(docs):
        for i, doc in enumerate(triple):
            mask[i, j, :len(doc.tokens)] = True
    return tokens, mask


class AugmentedModel:
    def __init__(self, num_labels: int, cfg: TextEncoderConfig = TextEncoderConfig(),
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.num_labels = num_labels
        self.encoder = TextEncoder(cfg, rng, dtype)
        self.head = init_mlp(rng, len(DOC_KINDS) * cfg.d, cfg.d, num_labels, "readout", dtype)

    def encoder_for(self, kind: CodeType) -> TextEncoder:
        return self.encoder

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update(self.head)
        return out

    def logits(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        """tokens/mask: [3, B, T] as produced by :func:`pack_docs`."""
        k, b, t = tokens.shape
        cls = self.encoder.encode(tokens.reshape(k * b, t), mask.reshape(k * b, t))
        joined = cls.reshape(k, b, self.cfg.d).transpose(1, 0, 2).reshape(b, k * self.cfg.d)
        return mlp(joined, self.head, "readout")

    def flatten(self, p: PatientRecord, summaries: Mapping[str, str], vocab: Vocabulary,
                tokenizer: HashTokenizer) -> tuple[FlattenedDoc, ...]:
        return tuple(flatten_patient(p, kind, summaries, vocab, tokenizer, self.cfg.max_len) for kind in DOC_KINDS)


def aug_forward(p: PatientRecord, model: AugmentedModel, summaries: Mapping[str, str], vocab: Vocabulary,
                tokenizer: HashTokenizer) -> AugPrediction:
    tokens, mask = pack_docs([model.flatten(p, summaries, vocab, tokenizer)])
    z = model.logits(tokens, mask).data[0].copy()
    return AugPrediction(z, T.sigmoid(Tensor(z)).data)
