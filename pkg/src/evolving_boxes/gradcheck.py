"""Central finite-difference checks for graph operations (run in float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.ravel(analytic).astype(np.float64)
    n = np.ravel(numeric).astype(np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / denom)


def check_op(build: Callable[..., ad.Node], inputs: Sequence[np.ndarray],
             step: float = 1e-3, seed: int = 0, max_entries: int = 200,
             wrt: Sequence[int] | None = None) -> list[float]:
    """Compare analytic and central-difference gradients of ``build(*nodes)``.

    The scalar probed is ``sum(R * build(...))`` for a fixed random ``R`` so
    every output element contributes. At most ``max_entries`` randomly chosen
    entries per input are perturbed. Returns one relative error per checked
    input.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    def run(arrs, want_grad):
        g = ad.Graph(np.float64)
        nodes = [g.input(a, requires_grad=want_grad) for a in arrs]
        out = build(*nodes)
        return g, nodes, out

    g, nodes, out = run(arrays, True)
    weights = rng.standard_normal(out.value.shape)
    loss = ad.total(ad.scale(out, weights))
    g.backward(loss)

    def value(arrs):
        _, _, o = run(arrs, False)
        return float((o.value * weights).sum())

    errors = []
    for k in wrt:
        base = arrays[k]
        flat_count = base.size
        picks = np.arange(flat_count) if flat_count <= max_entries else rng.choice(
            flat_count, max_entries, replace=False)
        numeric = np.empty(len(picks))
        for t, idx in enumerate(picks):
            pos = np.unravel_index(idx, base.shape)
            saved = base[pos]
            base[pos] = saved + step
            up = value(arrays)
            base[pos] = saved - step
            down = value(arrays)
            base[pos] = saved
            numeric[t] = (up - down) / (2 * step)
        analytic = nodes[k].grad.reshape(-1)[picks]
        errors.append(relative_error(analytic, numeric))
    return errors
