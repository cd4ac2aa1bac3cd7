"""Co-training of the augmented and local models with consistency regularization.

Per batch both models predict, a blended target
``y_blend = beta * y_aug + (1 - beta) * y_loc`` is formed, and each model is
updated by its own loss ``bce(y_model, y) + lambda * KL(y_model || y_blend)``.
By default the blended target is a constant in both KL terms.  At inference
the blend itself is the prediction.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ramehr import tensor as T
from ramehr.augmented import AugmentedModel, FlattenedDoc, HashTokenizer, TextEncoderConfig, pack_docs
from ramehr.ehr import Dataset
from ramehr.errors import ConfigError, NumericError, ShapeError
from ramehr.hygt import HyGT, HyGTConfig, Hypergraph, build_hypergraph
from ramehr.metrics import EvalReport, UndefinedMetric, auroc, evaluate
from ramehr.tensor import Adam, Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class CoTrainConfig:
    beta: float = 0.2
    lam: float = 1.0
    lr_aug: float = 5e-5
    lr_local: float = 1e-4
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    threshold: float = 0.5
    detach_target: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")

    def to_json(self) -> dict:
        return {"beta": self.beta, "lambda": self.lam, "lr_aug": self.lr_aug, "lr_local": self.lr_local,
                "batch_size": self.batch_size, "epochs": self.epochs, "seed": self.seed,
                "threshold": self.threshold, "detach_target": self.detach_target}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CoTrainConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        return cls(**obj)


# -- losses --------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def bce(pred, target) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets."""
    p = _as_tensor(pred)
    y = np.asarray(target, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    p = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return -ll.mean()


def bernoulli_kl(p, q) -> Tensor:
    """Mean per-label KL(Bernoulli(p) || Bernoulli(q)).

    Pass ``q`` as an array (or detached tensor) to keep it out of the gradient.
    """
    p = _as_tensor(p)
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=p.dtype))
    if q.shape != p.shape:
        raise ShapeError(f"KL argument shapes differ: {p.shape} vs {q.shape}")
    p = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    q = T.clip(q, PROB_EPS, 1.0 - PROB_EPS)
    kl = p * (T.log(p) - T.log(q)) + (1.0 - p) * (T.log(1.0 - p) - T.log(1.0 - q))
    return kl.mean()


# -- blended prediction ----------------------------------------------------

def blend(y1: np.ndarray, y2: np.ndarray, beta: float) -> np.ndarray:
    """``beta * y1 + (1 - beta) * y2``; where the two agree the result is exactly that value."""
    out = beta * y1 + (1.0 - beta) * y2
    return np.where(y1 == y2, y1, out).astype(out.dtype, copy=False)


@dataclass(frozen=True)
class PredictionPair:
    y1: np.ndarray
    y2: np.ndarray
    beta: float

    @property
    def y_blend(self) -> np.ndarray:
        return blend(self.y1, self.y2, self.beta)

    def hard(self, threshold: float = 0.5) -> np.ndarray:
        return (self.y_blend >= threshold).astype(np.int64)


# -- prepared inputs ---------------------------------------------------------

class PreparedData:
    """Everything both models read, precomputed once for a (transductive) dataset.

    The hypergraph spans every patient in ``ds``; only the rows passed to
    training contribute labels.
    """

    def __init__(self, ds: Dataset, summaries: Mapping[str, str], tokenizer: HashTokenizer | None = None,
                 max_len: int = 512, graph: Hypergraph | None = None):
        from ramehr.augmented import DOC_KINDS, flatten_patient

        self.ds = ds
        self.tokenizer = tokenizer or HashTokenizer()
        self.max_len = max_len
        self.labels = ds.labels()
        self.graph = graph if graph is not None else build_hypergraph(ds)
        self.docs: list[tuple[FlattenedDoc, ...]] = [
            tuple(flatten_patient(p, kind, summaries, ds.vocab, self.tokenizer, max_len) for kind in DOC_KINDS)
            for p in ds
        ]
        self.edge_rows = np.array([self.graph.edge_index(p.patient_id) for p in ds], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ds)

    def batch_docs(self, rows: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        return pack_docs([self.docs[i] for i in rows])

    def with_labels(self, labels: np.ndarray) -> "PreparedData":
        """Same inputs, different targets (e.g. a permutation control); nothing is re-tokenized."""
        labels = np.asarray(labels, dtype=np.float32)
        if labels.shape != self.labels.shape:
            raise ShapeError(f"labels {labels.shape} do not match {self.labels.shape}")
        other = copy.copy(self)
        other.labels = labels
        other.ds = self.ds.with_labels(labels.astype(np.int64))
        return other


# -- trainer --------------------------------------------------------------

MODES = ("both", "aug", "local")


class CoTrainer:
    """Holds both models, their optimizers, and the training loop.

    ``mode="aug"`` / ``"local"`` trains one model alone on plain BCE with the
    same initialization and batch order a co-training run would use.
    """

    def __init__(self, data: PreparedData, cfg: CoTrainConfig, aug_cfg: TextEncoderConfig = TextEncoderConfig(),
                 local_cfg: HyGTConfig = HyGTConfig(), mode: str = "both", dtype=np.float32):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if aug_cfg.max_len < data.max_len:
            raise ConfigError(f"encoder max_len {aug_cfg.max_len} < document max_len {data.max_len}")
        self.data = data
        self.cfg = cfg
        self.mode = mode
        n_labels = data.labels.shape[1]
        self.aug = AugmentedModel(n_labels, aug_cfg, np.random.default_rng([cfg.seed, 1]), dtype)
        self.local = HyGT(data.graph.num_nodes, data.graph.num_edges, n_labels, local_cfg,
                          np.random.default_rng([cfg.seed, 2]), dtype)
        self.opt_aug = Adam(self.aug.parameters(), lr=cfg.lr_aug)
        self.opt_local = Adam(self.local.parameters(), lr=cfg.lr_local)
        self._order_rng = np.random.default_rng([cfg.seed, 3])
        self.history: list[dict] = []
        self.steps = 0

    # forward helpers
    def _aug_probs(self, rows: Sequence[int]) -> Tensor:
        tokens, mask = self.data.batch_docs(rows)
        return T.sigmoid(self.aug.logits(tokens, mask))

    def _local_probs(self, rows: Sequence[int]) -> Tensor:
        return T.sigmoid(self.local.logits(self.data.graph, self.data.edge_rows[np.asarray(rows)]))

    def step(self, rows: Sequence[int], batch_index: int | None = None) -> tuple[float, float]:
        """One co-training update on ``rows``; returns (loss_aug, loss_loc)."""
        where = f"batch {batch_index if batch_index is not None else self.steps}"
        y = self.data.labels[np.asarray(rows)]
        beta, lam = self.cfg.beta, self.cfg.lam
        try:
            y1 = self._aug_probs(rows) if self.mode != "local" else None
            y2 = self._local_probs(rows) if self.mode != "aug" else None
            loss_aug = loss_loc = None
            if self.mode == "both":
                if self.cfg.detach_target:
                    target = blend(y1.data, y2.data, beta)
                else:
                    target = y1 * beta + y2 * (1.0 - beta)
                loss_aug = bce(y1, y) + bernoulli_kl(y1, target) * lam
                loss_loc = bce(y2, y) + bernoulli_kl(y2, target) * lam
            elif self.mode == "aug":
                loss_aug = bce(y1, y)
            else:
                loss_loc = bce(y2, y)
        except NumericError as exc:
            raise NumericError(f"{where}: {exc}") from exc
        for name, loss in (("aug", loss_aug), ("local", loss_loc)):
            if loss is not None and not np.isfinite(loss.data):
                raise NumericError(f"{where}: non-finite {name} loss")

        self.opt_aug.zero_grad()
        self.opt_local.zero_grad()
        coupled = self.mode == "both" and not self.cfg.detach_target
        if loss_aug is not None:
            loss_aug.backward(retain_graph=coupled)
        if coupled:
            # the aug loss also reached the local params through the target; keep only its own share
            aug_grads = {k: p.grad for k, p in self.aug.parameters().items()}
            self.opt_aug.zero_grad()
            self.opt_local.zero_grad()
        if loss_loc is not None:
            loss_loc.backward()
        if coupled:
            for k, p in self.aug.parameters().items():
                p.grad = aug_grads[k]
        try:
            if loss_aug is not None:
                self.opt_aug.step()
            if loss_loc is not None:
                self.opt_local.step()
        except NumericError as exc:
            raise NumericError(f"{where}: {exc}") from exc
        self.steps += 1
        return (float(loss_aug.data) if loss_aug is not None else float("nan"),
                float(loss_loc.data) if loss_loc is not None else float("nan"))

    def batches(self, rows: Sequence[int]) -> list[np.ndarray]:
        rows = np.asarray(rows, dtype=np.int64)
        perm = rows[self._order_rng.permutation(rows.size)]
        bs = self.cfg.batch_size
        return [perm[i:i + bs] for i in range(0, perm.size, bs)]

    def fit(self, train_rows: Sequence[int], val_rows: Sequence[int] | None = None,
            on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
        for epoch in range(1, self.cfg.epochs + 1):
            for bi, batch in enumerate(self.batches(train_rows)):
                la, ll = self.step(batch, bi)
                self.history.append({"epoch": epoch, "step": self.steps, "loss_aug": la, "loss_loc": ll,
                                     "val_auroc": None})
            if val_rows is not None and len(val_rows):
                self.history[-1]["val_auroc"] = self.score(val_rows)
            log.info("epoch %d: loss_aug=%.4f loss_loc=%.4f val_auroc=%s", epoch,
                     self.history[-1]["loss_aug"], self.history[-1]["loss_loc"], self.history[-1]["val_auroc"])
            if on_epoch is not None:
                on_epoch(self.history[-1])
        return self.history

    # inference
    def predict(self, rows: Sequence[int], chunk: int = 128) -> PredictionPair:
        rows = np.asarray(rows, dtype=np.int64)
        n_labels = self.data.labels.shape[1]
        y1 = np.full((rows.size, n_labels), np.nan)
        y2 = np.full((rows.size, n_labels), np.nan)
        if self.mode != "local":
            parts = [self._aug_probs(rows[i:i + chunk]).data for i in range(0, rows.size, chunk)]
            y1 = np.concatenate(parts).astype(np.float64) if parts else y1
        if self.mode != "aug":
            y2 = self._local_probs(rows).data.astype(np.float64)
        beta = {"both": self.cfg.beta, "aug": 1.0, "local": 0.0}[self.mode]
        if self.mode == "aug":
            y2 = np.zeros_like(y1)
        elif self.mode == "local":
            y1 = np.zeros_like(y2)
        return PredictionPair(y1, y2, beta)

    def score(self, rows: Sequence[int]) -> float:
        """Macro AUROC of the blended prediction on ``rows``."""
        pair = self.predict(rows)
        return evaluate(pair.y_blend, self.data.labels[np.asarray(rows)], self.cfg.threshold).auroc

    def evaluate(self, rows: Sequence[int], which: str = "blend") -> EvalReport:
        pair = self.predict(rows)
        scores = {"blend": pair.y_blend, "aug": pair.y1, "local": pair.y2}[which]
        return evaluate(scores, self.data.labels[np.asarray(rows)], self.cfg.threshold,
                        self.data.ds.task.label_names)

    # checkpoints
    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        T.save_checkpoint(directory / "aug.ckpt", self.aug.parameters())
        T.save_checkpoint(directory / "local.ckpt", self.local.parameters())

    def load(self, directory: str | Path) -> None:
        directory = Path(directory)
        T.assign_params(self.aug.parameters(), T.load_checkpoint(directory / "aug.ckpt"))
        T.assign_params(self.local.parameters(), T.load_checkpoint(directory / "local.ckpt"))

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "loss_aug", "loss_loc", "val_auroc"])
            for row in self.history:
                w.writerow([row["epoch"], row["step"], repr(row["loss_aug"]), repr(row["loss_loc"]),
                            "" if row["val_auroc"] is None else repr(row["val_auroc"])])


def cotrain_step(trainer: CoTrainer, rows: Sequence[int]) -> tuple[float, float]:
    return trainer.step(rows)


def infer(trainer: CoTrainer, row: int) -> PredictionPair:
    """Blended prediction for one patient (row index into the prepared data)."""
    return trainer.predict([row])


def select_hyperparams(betas: Iterable[float], lams: Iterable[float],
                       val_auroc: Callable[[float, float], float], base: CoTrainConfig = CoTrainConfig()) -> CoTrainConfig:
    """Grid search maximizing validation AUROC; ties prefer smaller lambda, then smaller beta."""
    cells = [(lam, beta) for lam in sorted(set(lams)) for beta in sorted(set(betas))]
    if not cells:
        raise ConfigError("hyperparameter grid is empty")
    best = None
    for lam, beta in cells:
        score = val_auroc(beta, lam)
        log.info("grid beta=%s lambda=%s -> val AUROC %.4f", beta, lam, score)
        if best is None or score > best[0]:
            best = (score, lam, beta)
    return replace(base, beta=best[2], lam=best[1])
