"""Local time branch: window patching, continuous time embedding, time-aware
convolution over variable-length patches, query-token attention, and dual
mixing over tokens and variables.

Patches are fixed time windows over the normalized lookback [0, 1], so their
observation counts vary with sampling density; the patch encoder normalizes
its aggregation weights per channel (softmax over observations), which keeps
the encoding scale independent of how densely a window was sampled. Empty
patches encode to a zero vector plus a presence bit of 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor

MASK_BIG = 1e9  # additive logit penalty; exp(-1e9) underflows to exactly 0


@dataclass
class PatchLayout:
    """Index ranges of one variable's observations per time-window patch.

    ``boundaries[p] = (lo, hi)`` are inclusive indices into the observation
    list; an empty patch has lo > hi.
    """

    window: float
    n_patches: int
    boundaries: list[tuple[int, int]]


def patch_partition(times: np.ndarray, window: float, span: float = 1.0) -> PatchLayout:
    """Assign sorted timestamps in [0, span] to contiguous windows of width ``window``.

    Observation i lands in patch floor(t_i / window); a timestamp exactly at
    ``span`` (possible when the sample's own maximum defines the scale) is
    clamped into the last patch.
    """
    if window <= 0:
        raise ValueError(f"patch window must be positive, got {window}")
    times = np.asarray(times, dtype=float)
    n_patches = max(int(math.ceil(span / window)), 1)
    idx = np.minimum((times / window).astype(int), n_patches - 1) if len(times) else np.array([], int)
    boundaries = []
    for p in range(n_patches):
        lo = int(np.searchsorted(idx, p, side="left"))
        hi = int(np.searchsorted(idx, p, side="right")) - 1
        boundaries.append((lo, hi))
    return PatchLayout(window=window, n_patches=n_patches, boundaries=boundaries)


@dataclass
class PatchObservations:
    """Per-patch observation arrays, padded to the densest patch (host-side constants)."""

    times: np.ndarray       # (..., N, P, O)
    values: np.ndarray      # (..., N, P, O)
    obs_mask: np.ndarray    # (..., N, P, O)
    patch_mask: np.ndarray  # (..., N, P)


def gather_patches(t: np.ndarray, v: np.ndarray, m: np.ndarray,
                   n_patches: int) -> PatchObservations:
    """Bucket observed (time, value) pairs of every variable into window patches.

    t: (B, L) or (L,); v, m: matching (B, L, N) or (L, N). Only mask-1 entries
    are gathered, so padded or unobserved slots can never leak in.
    """
    squeeze = t.ndim == 1
    if squeeze:
        t, v, m = t[None], v[None], m[None]
    B, L = t.shape
    N = v.shape[2]
    window = 1.0 / n_patches

    per_patch: list[list[tuple[np.ndarray, np.ndarray]]] = []
    max_obs = 1
    for b in range(B):
        row = []
        for n in range(N):
            sel = m[b, :, n] > 0
            ts, vs = t[b, sel], v[b, sel, n]
            layout = patch_partition(ts, window)
            for lo, hi in layout.boundaries:
                row.append((ts[lo:hi + 1], vs[lo:hi + 1]))
                max_obs = max(max_obs, hi + 1 - lo)
        per_patch.append(row)

    times = np.zeros((B, N, n_patches, max_obs))
    values = np.zeros((B, N, n_patches, max_obs))
    obs_mask = np.zeros((B, N, n_patches, max_obs))
    for b in range(B):
        for n in range(N):
            for p in range(n_patches):
                ts, vs = per_patch[b][n * n_patches + p]
                k = len(ts)
                if k:
                    times[b, n, p, :k] = ts
                    values[b, n, p, :k] = vs
                    obs_mask[b, n, p, :k] = 1.0
    patch_mask = (obs_mask.sum(axis=-1) > 0).astype(float)
    if squeeze:
        return PatchObservations(times[0], values[0], obs_mask[0], patch_mask[0])
    return PatchObservations(times, values, obs_mask, patch_mask)


def time_embed(t: Tensor, omega: Tensor, alpha: Tensor) -> Tensor:
    """Continuous time encoding: one linear channel (trend) plus sinusoids.

    t: (...,) -> (..., D_t) with component 0 = omega[0]*t + alpha[0] and
    component d = sin(omega[d]*t + alpha[d]) for d > 0.
    """
    full = t.reshape(t.shape + (1,)) * omega + alpha
    d_t = omega.shape[0]
    linear = ad.slice_axis(full, -1, 0, 1)
    periodic = ad.sin(ad.slice_axis(full, -1, 1, d_t))
    return ad.concat([linear, periodic], axis=-1)


def ttcn_encode(z: Tensor, obs_mask: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Softmax-weighted content aggregation over a patch's observations.

    z: (..., O, F) observation features; obs_mask: (..., O). A filter
    perceptron produces per-channel logits, softmax over the observation axis
    turns them into normalized weights (duplicated observations redistribute
    mass instead of inflating the output), and a linear content map supplies
    what gets aggregated. Fully masked (empty) patches return a zero vector.
    """
    logits = ad.gelu(z @ params["fw1"] + params["fb1"]) @ params["fw2"] + params["fb2"]
    bias = ad.scale(obs_mask - 1.0, MASK_BIG)
    weights = ad.softmax(logits + bias.reshape(bias.shape + (1,)), axis=-2)
    content = z @ params["gw"] + params["gb"]
    h = (weights * content).sum(axis=-2)
    nonempty = ad.clamp(obs_mask.sum(axis=-1, keepdims=True), lo=None, hi=1.0)
    return h * nonempty


@dataclass
class PatchTensor:
    """Patch encodings with presence bits plus their fixed positional table."""

    h_patch: Tensor          # (..., N, P, D), last channel is the presence bit
    patch_mask: np.ndarray   # (..., N, P)
    pe: np.ndarray           # (P, D)


def sinusoidal_pe(n_patches: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional table; extends to any patch count without learning."""
    pos = np.arange(n_patches)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def encode_patches(graph: Graph, obs: PatchObservations,
                   params: dict[str, Tensor]) -> PatchTensor:
    """Encode every patch of every variable: time-embed, aggregate, tag presence."""
    t_obs = graph.constant(obs.times)
    v_obs = graph.constant(obs.values)
    mask = graph.constant(obs.obs_mask)
    phi = time_embed(t_obs, params["te_omega"], params["te_alpha"])
    z = ad.concat([phi, v_obs.reshape(v_obs.shape + (1,))], axis=-1)
    h_c = ttcn_encode(z, mask, params)                       # (..., N, P, D-1)
    pm = graph.constant(obs.patch_mask[..., None])
    h = ad.concat([h_c, pm], axis=-1)                        # (..., N, P, D)
    return PatchTensor(h_patch=h, patch_mask=obs.patch_mask,
                       pe=sinusoidal_pe(h.shape[-2], h.shape[-1]))


def query_mix(h_patch: Tensor, pe: np.ndarray, queries: Tensor) -> Tensor:
    """Cross-attention from W learnable tokens onto the P patch encodings.

    Positional encodings enter the keys only; values are the raw encodings.
    Returns (..., N, W, D).
    """
    d = h_patch.shape[-1]
    keys = h_patch + h_patch.graph.constant(pe)
    att = ad.scale(queries @ ad.swap_last(keys), 1.0 / math.sqrt(d))
    return ad.softmax(att, axis=-1) @ h_patch


def dual_mixing(h: Tensor, layers: list[dict[str, Tensor]]) -> Tensor:
    """Alternate residual MLPs over the token axis and the variable axis.

    h: (..., N, W, D). Each block is layernorm(x + MLP(permuted x)) with the
    MLP weights shared across all non-mixed axes.
    """
    for p in layers:
        tok = ad.swap_last(h)                                  # (..., N, D, W)
        tok = ad.gelu(tok @ p["patch_w1"] + p["patch_b1"]) @ p["patch_w2"] + p["patch_b2"]
        h = ad.layernorm(h + ad.swap_last(tok), p["ln1_gain"], p["ln1_bias"])

        nd = h.ndim
        fwd = tuple(i for i in range(nd) if i != nd - 3) + (nd - 3,)
        var = h.permute(fwd)                                   # (..., W, D, N)
        var = ad.gelu(var @ p["var_w1"] + p["var_b1"]) @ p["var_w2"] + p["var_b2"]
        h = ad.layernorm(h + var.permute(np.argsort(fwd)), p["ln2_gain"], p["ln2_bias"])
    return h


def aggregate(h: Tensor, params: dict[str, Tensor], kind: str = "linear") -> Tensor:
    """Consolidate the W token axis into one vector per variable.

    ``linear`` flattens tokens and projects W*D -> D; ``conv`` applies a
    width-W depthwise kernel over the token axis.
    """
    if kind == "linear":
        w, d = h.shape[-2], h.shape[-1]
        flat = h.reshape(h.shape[:-2] + (w * d,))
        return flat @ params["agg_w"] + params["agg_b"]
    if kind == "conv":
        return (h * params["agg_w"]).sum(axis=-2) + params["agg_b"]
    raise ValueError(f"unknown aggregation kind {kind!r}")


def mean_pool_patches(h_patch: Tensor, patch_mask: np.ndarray) -> Tensor:
    """Mean over non-empty patches; the query-mixing bypass used by ablation runs."""
    pm = h_patch.graph.constant(patch_mask[..., None])
    counts = h_patch.graph.constant(np.maximum(patch_mask.sum(axis=-1), 1.0)[..., None])
    return (h_patch * pm).sum(axis=-2) / counts
