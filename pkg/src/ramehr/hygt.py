"""Hypergraph transformer over codes (nodes) and patients (hyperedges).

Each layer updates every hyperedge from its member nodes and every node from
its incident hyperedges, both from the previous layer's embeddings.  The
update of element ``x`` is self-attention over ``[x; neighbours]`` read out
at position 0.  The patient representation is the final hyperedge embedding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from ramehr import tensor as T
from ramehr.ehr import Dataset
from ramehr.errors import DataError, ShapeError
from ramehr.nn import head_dim, init_block, init_mlp, mlp, set_attention
from ramehr.tensor import Tensor


@dataclass(frozen=True)
class Hypergraph:
    node_ids: tuple[str, ...]
    edge_ids: tuple[str, ...]
    incidence: tuple[tuple[int, ...], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edge_ids)

    def edge_index(self, patient_id: str) -> int:
        try:
            return self._edge_pos[patient_id]
        except KeyError:
            raise KeyError(f"patient {patient_id!r} is not a hyperedge of this graph") from None

    @cached_property
    def _edge_pos(self) -> dict[str, int]:
        return {pid: i for i, pid in enumerate(self.edge_ids)}

    @cached_property
    def node_incidence(self) -> tuple[tuple[int, ...], ...]:
        per_node: list[list[int]] = [[] for _ in self.node_ids]
        for e, members in enumerate(self.incidence):
            for v in members:
                per_node[v].append(e)
        return tuple(tuple(es) for es in per_node)

    @cached_property
    def padded(self) -> "PaddedIncidence":
        return PaddedIncidence.build(self)

    def to_json(self) -> dict:
        return {"nodes": list(self.node_ids), "edges": list(self.edge_ids),
                "incidence": [list(m) for m in self.incidence]}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")


def _pad(lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max((len(x) for x in lists), default=1))
    idx = np.zeros((len(lists), width), dtype=np.int64)
    mask = np.zeros((len(lists), width), dtype=bool)
    for i, x in enumerate(lists):
        idx[i, :len(x)] = x
        mask[i, :len(x)] = True
    return idx, mask


@dataclass(frozen=True)
class PaddedIncidence:
    edge_members: np.ndarray
    edge_mask: np.ndarray
    node_edges: np.ndarray
    node_mask: np.ndarray

    @classmethod
    def build(cls, g: Hypergraph) -> "PaddedIncidence":
        em, emask = _pad(g.incidence)
        ne, nmask = _pad(g.node_incidence)
        return cls(em, emask, ne, nmask)


def build_hypergraph(ds: Dataset) -> Hypergraph:
    """One hyperedge per patient over the union of its codes; nodes are the codes that occur."""
    if len(ds) == 0:
        raise DataError("cannot build a hypergraph from an empty dataset")
    per_patient = []
    used: set[str] = set()
    for r in ds:
        codes = set(r.all_codes())
        if not codes:
            raise DataError(f"patient {r.patient_id!r} has no codes")
        per_patient.append(codes)
        used |= codes
    nodes = sorted(used, key=ds.vocab.rank)
    pos = {c: i for i, c in enumerate(nodes)}
    incidence = tuple(tuple(sorted(pos[c] for c in codes)) for codes in per_patient)
    return Hypergraph(tuple(nodes), tuple(r.patient_id for r in ds), incidence)


@dataclass(frozen=True)
class HyGTConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn_mult: int = 2
    init_std: float = 0.02


@dataclass(frozen=True)
class LocalPrediction:
    logits: np.ndarray
    probs: np.ndarray


class HyGT:
    def __init__(self, num_nodes: int, num_edges: int, num_labels: int, cfg: HyGTConfig = HyGTConfig(),
                 rng: np.random.Generator | None = None, dtype=np.float32):
        head_dim(cfg.d, cfg.heads)
        if cfg.layers < 1:
            raise ValueError("HyGT needs at least one layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.num_labels = num_labels
        d = cfg.d
        self.params: dict[str, Tensor] = {
            "x0": T.normal_param(rng, (num_nodes, d), cfg.init_std, dtype),
            "e0": T.normal_param(rng, (num_edges, d), cfg.init_std, dtype),
        }
        for l in range(1, cfg.layers + 1):
            self.params.update(init_block(rng, d, cfg.ffn_mult * d, f"layer{l}.edge", dtype))
            self.params.update(init_block(rng, d, cfg.ffn_mult * d, f"layer{l}.node", dtype))
        self.params.update(init_mlp(rng, d, d, num_labels, "readout", dtype))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _check(self, g: Hypergraph) -> None:
        if self.params["x0"].shape[0] != g.num_nodes or self.params["e0"].shape[0] != g.num_edges:
            raise ShapeError(
                f"model built for {self.params['x0'].shape[0]} nodes / {self.params['e0'].shape[0]} edges, "
                f"graph has {g.num_nodes} / {g.num_edges}"
            )

    def edge_update(self, X: Tensor, own: Tensor, g: Hypergraph, layer: int, rows: np.ndarray | None = None) -> Tensor:
        """Update hyperedges ``rows`` (all when ``None``); ``own`` holds exactly those edges' embeddings."""
        pad = g.padded
        members, mask = pad.edge_members, pad.edge_mask
        if rows is not None:
            members, mask = members[rows], mask[rows]
        return set_attention(own, X, members, mask, self.params, f"layer{layer}.edge", self.cfg.heads)

    def node_update(self, X: Tensor, E: Tensor, g: Hypergraph, layer: int) -> Tensor:
        pad = g.padded
        return set_attention(X, E, pad.node_edges, pad.node_mask, self.params, f"layer{layer}.node", self.cfg.heads)

    def edge_embeddings(self, g: Hypergraph, rows: Sequence[int] | None = None) -> Tensor:
        """Final-layer hyperedge embeddings for ``rows`` (all edges when ``None``)."""
        self._check(g)
        X, E = self.params["x0"], self.params["e0"]
        last = self.cfg.layers
        if rows is None:
            for l in range(1, last):
                X, E = hygt_layer(X, E, g, self, l)
            return self.edge_update(X, E, g, last)
        rows = np.asarray(rows, dtype=np.int64)
        # nodes need every hyperedge of the previous layer, but from layer L-1 on
        # only the requested hyperedges are ever read again
        for l in range(1, last - 1):
            X, E = hygt_layer(X, E, g, self, l)
        E_rows = T.take(E, rows)
        if last > 1:
            X, E_rows = self.node_update(X, E, g, last - 1), self.edge_update(X, E_rows, g, last - 1, rows)
        return self.edge_update(X, E_rows, g, last, rows)

    def logits(self, g: Hypergraph, rows: Sequence[int] | None = None) -> Tensor:
        return mlp(self.edge_embeddings(g, rows), self.params, "readout")


def hygt_layer(X: Tensor, E: Tensor, g: Hypergraph, model: HyGT, layer: int) -> tuple[Tensor, Tensor]:
    """Simultaneous node and hyperedge update for layer ``layer`` (1-based)."""
    if not 1 <= layer <= model.cfg.layers:
        raise ValueError(f"layer must be in 1..{model.cfg.layers}, got {layer}")
    d = model.cfg.d
    if X.shape != (g.num_nodes, d) or E.shape != (g.num_edges, d):
        raise ShapeError(f"embedding shapes {X.shape}, {E.shape} do not match graph/width")
    return model.node_update(X, E, g, layer), model.edge_update(X, E, g, layer)


def local_forward(g: Hypergraph, model: HyGT, patient_index: int) -> LocalPrediction:
    if not 0 <= patient_index < g.num_edges:
        raise KeyError(f"patient index {patient_index} not in graph with {g.num_edges} hyperedges")
    z = model.logits(g, [patient_index])
    logits = z.data[0].copy()
    return LocalPrediction(logits, T.sigmoid(Tensor(logits)).data)
