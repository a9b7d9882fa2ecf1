"""Global frequency branch: direct trigonometric projection of irregular observations.

The forward transform projects masked, normalized values onto a learnable
frequency dictionary (count-normalized so sampling density does not change the
scale); a small MLP refines the raw coefficients; a linear+layernorm encoder
maps them into the model width; and the inverse transform re-synthesizes a
signal at arbitrary timestamps for both seasonal extrapolation and history
reconstruction. All functions take and return graph tensors, so gradients
flow to the values and to the frequencies themselves. Direct O(L*K) sums are
intentional; no FFT fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TWO_PI = 2.0 * np.pi
COUNT_EPS = 1e-8


@dataclass
class Spectrum:
    """Real/imaginary coefficients per variable and frequency, shape (..., N, K)."""

    r: Tensor
    i: Tensor
    refined: bool = False

    @property
    def n_freqs(self) -> int:
        return self.r.shape[-1]


def nudft(t: Tensor, v: Tensor, m: Tensor, omega: Tensor) -> Spectrum:
    """Project masked values at irregular times onto the frequency dictionary.

    t: (..., L) timestamps; v, m: (..., L, N); omega: (K,).
    Coefficients are normalized by the per-variable observation count
    (clamped below to keep all-masked variables at exactly zero).
    """
    angle = ad.scale(t.reshape(t.shape + (1,)) * omega, TWO_PI)   # (..., L, K)
    mv_t = ad.swap_last(v * m)                                    # (..., N, L)
    z = ad.clamp(m.sum(axis=-2), lo=COUNT_EPS, hi=None)
    z = z.reshape(z.shape + (1,))                                 # (..., N, 1)
    r = (mv_t @ ad.cos(angle)) / z
    i = ad.scale(mv_t @ ad.sin(angle), -1.0) / z
    return Spectrum(r=r, i=i, refined=False)


def refine_spectrum(spec: Spectrum, params: dict[str, Tensor]) -> Spectrum:
    """Two-layer GELU perceptron over concatenated [R || I], width 2K -> 4K -> 2K."""
    k = spec.n_freqs
    s_raw = ad.concat([spec.r, spec.i], axis=-1)
    h = ad.gelu(s_raw @ params["w1"] + params["b1"])
    out = h @ params["w2"] + params["b2"]
    return Spectrum(r=ad.slice_axis(out, -1, 0, k),
                    i=ad.slice_axis(out, -1, k, 2 * k),
                    refined=True)


def encode_spectrum(spec: Spectrum, params: dict[str, Tensor]) -> Tensor:
    """Linear projection 2K -> D followed by layer normalization per variable row."""
    s = ad.concat([spec.r, spec.i], axis=-1)
    return ad.layernorm(s @ params["w"] + params["b"], params["ln_gain"], params["ln_bias"])


def inverse_nudft(spec: Spectrum, times: Tensor, omega: Tensor,
                  per_variable: bool = False) -> Tensor:
    """Re-synthesize the signal at the given timestamps.

    With shared times (..., T) the result is (..., T, N). With
    ``per_variable=True`` the times carry their own variable axis (..., T, N)
    and each variable is evaluated at its own timestamps.
    """
    angle = ad.scale(times.reshape(times.shape + (1,)) * omega, TWO_PI)
    if per_variable:
        # angle: (..., T, N, K); spectrum broadcast over the time axis
        shape = spec.r.shape[:-2] + (1,) + spec.r.shape[-2:]
        r_e = spec.r.reshape(shape)
        i_e = spec.i.reshape(shape)
        return (ad.cos(angle) * r_e - ad.sin(angle) * i_e).sum(axis=-1)
    return ad.cos(angle) @ ad.swap_last(spec.r) - ad.sin(angle) @ ad.swap_last(spec.i)


def init_frequencies(k: int) -> np.ndarray:
    """Integer harmonics 1..K of the normalized lookback window."""
    return np.arange(1, k + 1, dtype=float)
