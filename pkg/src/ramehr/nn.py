"""Multi-head attention block shared by the hypergraph and text models.

Block:  Y = LayerNorm(S + concat_i SA_i(S)),  out = LayerNorm(Y + FFN(Y))
with SA_i(S) = softmax(S Wq_i (S Wk_i)^T / sqrt(d // h)) S Wv_i and a
two-layer ReLU FFN.  There is no output projection after the head concat.
"""

from __future__ import annotations

import numpy as np

from ramehr import tensor as T
from ramehr.errors import ConfigError
from ramehr.tensor import Tensor

MASK_FILL = -1e9


def init_block(rng: np.random.Generator, d: int, d_ff: int, prefix: str, dtype=np.float32) -> dict[str, Tensor]:
    return {
        f"{prefix}.wq": T.glorot_param(rng, d, d, dtype),
        f"{prefix}.wk": T.glorot_param(rng, d, d, dtype),
        f"{prefix}.wv": T.glorot_param(rng, d, d, dtype),
        f"{prefix}.ln1.g": T.const_param((d,), 1.0, dtype),
        f"{prefix}.ln1.b": T.const_param((d,), 0.0, dtype),
        f"{prefix}.ff.w1": T.glorot_param(rng, d, d_ff, dtype),
        f"{prefix}.ff.b1": T.const_param((d_ff,), 0.0, dtype),
        f"{prefix}.ff.w2": T.glorot_param(rng, d_ff, d, dtype),
        f"{prefix}.ff.b2": T.const_param((d,), 0.0, dtype),
        f"{prefix}.ln2.g": T.const_param((d,), 1.0, dtype),
        f"{prefix}.ln2.b": T.const_param((d,), 0.0, dtype),
    }


def init_mlp(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int, prefix: str, dtype=np.float32) -> dict[str, Tensor]:
    return {
        f"{prefix}.w1": T.glorot_param(rng, d_in, d_hidden, dtype),
        f"{prefix}.b1": T.const_param((d_hidden,), 0.0, dtype),
        f"{prefix}.w2": T.glorot_param(rng, d_hidden, d_out, dtype),
        f"{prefix}.b2": T.const_param((d_out,), 0.0, dtype),
    }


def mlp(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def head_dim(d: int, heads: int) -> int:
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    return d // heads


def _mask_bias(mask: np.ndarray, dtype) -> Tensor:
    # [B, Tk] -> [B, 1, 1, Tk]
    bias = np.where(mask, 0.0, MASK_FILL).astype(dtype)
    return Tensor(bias[:, None, None, :])


def attend(resid: Tensor, q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray,
           p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Attention + FFN sub-layers given projected queries/keys/values.

    ``resid`` and ``q`` are [B, Tq, d]; ``k`` and ``v`` are [B, Tk, d];
    ``key_mask`` is a boolean [B, Tk] array of valid key positions.
    """
    b, tq, d = q.shape
    tk = k.shape[1]
    dh = head_dim(d, heads)
    qh = q.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, tk, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh) * (1.0 / np.sqrt(dh)) + _mask_bias(key_mask, q.dtype)
    ctx = (T.softmax(scores, axis=-1) @ vh).transpose(0, 2, 1, 3).reshape(b, tq, d)
    return _residual_ffn(resid, ctx, p, prefix)


def _residual_ffn(resid: Tensor, ctx: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    y = T.layer_norm(resid + ctx, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    ff = mlp(y, p, f"{prefix}.ff")
    return T.layer_norm(y + ff, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def self_attention(s: Tensor, key_mask: np.ndarray, p: dict[str, Tensor], prefix: str, heads: int,
                   first_only: bool = False) -> Tensor:
    """Full self-attention over [B, T, d]; with ``first_only`` only position 0 is returned ([B, 1, d])."""
    q_in = s[:, 0:1] if first_only else s
    return attend(q_in, q_in @ p[f"{prefix}.wq"], s @ p[f"{prefix}.wk"], s @ p[f"{prefix}.wv"],
                  key_mask, p, prefix, heads)


# above this many query-table pairs the gathered form is used
DENSE_LIMIT = 1 << 22


def set_attention(own: Tensor, table: Tensor, nbr_idx: np.ndarray, nbr_mask: np.ndarray,
                  p: dict[str, Tensor], prefix: str, heads: int, dense: bool | None = None) -> Tensor:
    """Self-attention over ``[own_i; table[nbr_idx[i]]]`` read out at position 0.  Returns [B, d].

    Keys and values are projected on the table, never on gathered copies.
    Two equivalent forms: ``dense`` scores each query against the whole table
    under an incidence mask; otherwise projected rows are gathered per query.
    Neighbour lists must not repeat an index (true for incidence lists).
    """
    b, n = own.shape[0], table.shape[0]
    if dense is None:
        dense = b * n <= DENSE_LIMIT
    fn = _set_attention_dense if dense else _set_attention_gather
    return fn(own, table, np.asarray(nbr_idx), np.asarray(nbr_mask, dtype=bool), p, prefix, heads)


def _set_attention_gather(own, table, nbr_idx, nbr_mask, p, prefix, heads):
    b, d = own.shape
    wk, wv = p[f"{prefix}.wk"], p[f"{prefix}.wv"]
    own3 = own.reshape(b, 1, d)
    k = T.concat([(own @ wk).reshape(b, 1, d), T.take(table @ wk, nbr_idx)], axis=1)
    v = T.concat([(own @ wv).reshape(b, 1, d), T.take(table @ wv, nbr_idx)], axis=1)
    mask = np.concatenate([np.ones((b, 1), dtype=bool), nbr_mask], axis=1)
    out = attend(own3, own3 @ p[f"{prefix}.wq"], k, v, mask, p, prefix, heads)
    return out.reshape(b, d)


def _set_attention_dense(own, table, nbr_idx, nbr_mask, p, prefix, heads):
    b, d = own.shape
    n = table.shape[0]
    dh = head_dim(d, heads)
    wq, wk, wv = p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"]
    adj = np.zeros((b, n), dtype=bool)
    adj[np.nonzero(nbr_mask)[0], nbr_idx[nbr_mask]] = True
    keep = np.concatenate([np.ones((b, 1), dtype=bool), adj], axis=1)
    bias = Tensor(np.where(keep, 0.0, MASK_FILL).astype(own.dtype))     # [B, 1+N]

    q = (own @ wq).reshape(b, heads, dh).transpose(1, 0, 2)             # [h, B, dh]
    k_own = (own @ wk).reshape(b, heads, dh).transpose(1, 0, 2)
    v_own = (own @ wv).reshape(b, heads, dh).transpose(1, 0, 2)
    k_tab = (table @ wk).reshape(n, heads, dh).transpose(1, 2, 0)       # [h, dh, N]
    v_tab = (table @ wv).reshape(n, heads, dh).transpose(1, 0, 2)       # [h, N, dh]

    scale = 1.0 / np.sqrt(dh)
    s_own = (q * k_own).sum(axis=-1, keepdims=True)                     # [h, B, 1]
    scores = T.concat([s_own, q @ k_tab], axis=-1) * scale + bias
    probs = T.softmax(scores, axis=-1)
    ctx = probs[:, :, 0:1] * v_own + probs[:, :, 1:] @ v_tab             # [h, B, dh]
    ctx = ctx.transpose(1, 0, 2).reshape(b, d)
    return _residual_ffn(own, ctx, p, prefix)
