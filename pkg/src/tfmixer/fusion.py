"""Output stage: branch fusion, per-query decoding, and seasonal-bias composition."""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .patches import time_embed


def fuse(h_time: Tensor, h_freq: Tensor, lambda_fusion: Tensor) -> Tensor:
    """Learnable weighted sum of the two branch representations."""
    if h_time.shape != h_freq.shape:
        raise ad.ShapeMismatchError(
            f"fuse: branch shapes differ, {h_time.shape} vs {h_freq.shape}")
    return h_time + lambda_fusion * h_freq


def decode(h_joint: Tensor, query_t: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Score every (variable, future timestamp) pair with a shared two-layer MLP.

    h_joint: (..., N, D); query_t: (..., Q, N) normalized future times. The
    variable's representation is broadcast across its queries and concatenated
    with the query's time encoding. Returns (..., Q, N) in normalized units.
    """
    q = query_t.shape[-2]
    phi = time_embed(query_t, params["te_omega"], params["te_alpha"])  # (..., Q, N, D_t)
    h_e = h_joint.reshape(h_joint.shape[:-2] + (1,) + h_joint.shape[-2:])
    h_b = ad.broadcast_to(h_e, h_joint.shape[:-2] + (q,) + h_joint.shape[-2:])
    z = ad.concat([h_b, phi], axis=-1)
    out = ad.gelu(z @ params["dec_w1"] + params["dec_b1"]) @ params["dec_w2"] + params["dec_b2"]
    return out.reshape(out.shape[:-1])


def compose_prediction(v_base: Tensor, v_bias: Tensor | None, lambda_s: Tensor,
                       mean: Tensor, std: Tensor) -> Tensor:
    """Add the scaled seasonal bias and map back to original units."""
    v = v_base if v_bias is None else v_base + lambda_s * v_bias
    return v * std + mean
