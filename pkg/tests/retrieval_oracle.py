"""Exhaustive-scan oracle for top-k search and the randomized corpora it is checked on."""

import string

import numpy as np


def brute_force_topk(ids, matrix, q, k):
    """Score every row, fully sort by (score desc, id asc), keep k."""
    scores = matrix.astype(np.float64) @ np.asarray(q, dtype=np.float64)
    ranked = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in ranked[:k]]


def random_corpus(rng, max_n=10_000, max_k=32):
    """Random index contents with frequent exact ties (rows drawn from a small pool)."""
    n = int(rng.integers(1, max_n + 1))
    dim = int(rng.integers(2, 17))
    if rng.random() < 0.5:
        pool = rng.normal(size=(int(rng.integers(1, 20)), dim)).astype(np.float32)
        matrix = pool[rng.integers(0, len(pool), size=n)]
    else:
        matrix = rng.normal(size=(n, dim)).astype(np.float32)
    letters = np.array(list(string.ascii_lowercase))
    stems = ["".join(row) for row in letters[rng.integers(0, 26, size=(n, 6))]]
    ids = [f"{stem}-{i}" for stem, i in zip(stems, rng.permutation(n))]
    q = rng.normal(size=dim).astype(np.float32)
    k = int(rng.integers(1, max_k + 1))
    return ids, matrix, q, k
