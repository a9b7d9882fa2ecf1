"""Masked reversible instance normalization.

Statistics come exclusively from observed entries (mask 1); masked slots are
forced to zero on the way in and the stored statistics invert the transform on
the way out. Population (biased) std, clamped at EPS_STD so single-observation
variables normalize to zero instead of blowing up; variables with no
observations get identity stats (mean 0, std 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_STD = 1e-5


@dataclass
class NormStats:
    """Per-variable mean/std over observed entries; shapes broadcast against (..., L, N)."""

    mean: np.ndarray
    std: np.ndarray


def masked_normalize(x: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Normalize (..., L, N) values over the mask; masked slots come out exactly 0."""
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    count = m.sum(axis=-2, keepdims=True)
    safe = np.maximum(count, 1.0)
    mean = (x * m).sum(axis=-2, keepdims=True) / safe
    var = (((x - mean) ** 2) * m).sum(axis=-2, keepdims=True) / safe
    std = np.maximum(np.sqrt(var), EPS_STD)
    mean = np.where(count > 0, mean, 0.0)
    std = np.where(count > 0, std, 1.0)
    v = np.where(m > 0, (x - mean) / std, 0.0)
    return v, NormStats(mean=mean, std=std)


def masked_denormalize(y: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map normalized predictions (..., Q, N) back to original units."""
    return np.asarray(y, dtype=float) * stats.std + stats.mean
