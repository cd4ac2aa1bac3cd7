"""Central finite-difference checks for the tensor engine.

Errors are norm-wise per parameter tensor:
``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, floor)``.
The floor keeps exactly-zero gradients (masked entries, unused rows) from
turning round-off into a large relative error.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ramehr.tensor import Tensor

DEFAULT_STEP = 1e-6
NORM_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP,
                 entries: np.ndarray | None = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place (restored afterwards).

    With ``entries`` (flat indices) only those coordinates are probed; the
    result then has one value per entry.
    """
    flat = x.reshape(-1)
    which = np.arange(flat.size) if entries is None else np.asarray(entries)
    out = np.empty(which.size, dtype=np.float64)
    for j, i in enumerate(which):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[j] = (up - down) / (2 * h)
    return out.reshape(x.shape) if entries is None else out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = NORM_FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = DEFAULT_STEP,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error of backprop against finite differences for every tensor in ``params``.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    return a scalar.  Parameters should be float64.  With ``max_entries``,
    larger tensors are checked on a random subset of coordinates.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = rng if rng is not None else np.random.default_rng(0)

    def f() -> float:
        return float(loss_fn().data)

    errors = {}
    for name, p in params.items():
        entries = None
        if max_entries is not None and p.data.size > max_entries:
            entries = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        num = numeric_grad(f, p.data, h, entries)
        ana = analytic[name] if entries is None else analytic[name].reshape(-1)[entries]
        errors[name] = relative_error(ana, num)
    return errors
