"""Shared oracles for the test suite: central finite differences and error metrics."""

from __future__ import annotations

import numpy as np

from tfmixer import autodiff as ad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(graph: ad.Graph, out: ad.Tensor, leaf: ad.Tensor, seed, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of <seed, out> w.r.t. one leaf, via tape replay."""
    seed = np.asarray(seed, dtype=float)
    base = leaf.data.copy()
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape or (1,)):
        if base.shape == ():
            idx = ()
        plus = base.copy()
        plus[idx] += h
        graph.forward({leaf: plus})
        f_plus = float((out.data * seed).sum())
        minus = base.copy()
        minus[idx] -= h
        graph.forward({leaf: minus})
        f_minus = float((out.data * seed).sum())
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    graph.forward({leaf: base})
    return grad


def check_grads(graph: ad.Graph, out: ad.Tensor, leaves, seed=None, h: float = 1e-5,
                tol: float = 1e-4) -> float:
    """Assert analytic grads of every leaf match finite differences; returns worst error."""
    if seed is None:
        seed = np.ones(out.shape)
    graph.mark_output(out)
    graph.forward()
    analytic = graph.backward(seed)
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(graph, out, leaf, seed, h=h)
        ana = analytic.get(leaf)
        assert ana is not None, f"no analytic grad for leaf {leaf.name!r}"
        err = rel_err(ana, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for {leaf.name!r}: rel err {err:.3e}"
    return worst
