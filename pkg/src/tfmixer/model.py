"""Model assembly: configuration, parameter state, and the full forward graph.

The forward pass is built as one tape per batch (shapes are fixed per batch),
so the training loop can rebind parameter leaves and replay instead of
re-tracing. Ablation flags drop whole subgraphs: a disabled component's
parameters are never instantiated as leaves, so its gradients are absent
rather than merely zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import frequency, fusion, patches
from .autodiff import Graph, Tensor
from .data import AlignedBatch
from .revin import NormStats, masked_normalize


@dataclass
class ModelConfig:
    n_variables: int
    hidden: int = 64            # model width D
    n_freqs: int = 16           # frequency dictionary size K
    n_query_tokens: int = 8     # learnable query tokens W
    n_patches: int = 8          # patches tiling the normalized lookback
    patch_window: float | None = None  # window length in normalized time; overrides n_patches
    time_dim: int = 10          # time-embedding width D_t
    n_mixer_layers: int = 2
    aggregation: str = "linear"  # or "conv"

    def resolved_patches(self) -> int:
        if self.patch_window is not None:
            if self.patch_window <= 0:
                raise ValueError("patch_window must be positive")
            return max(int(np.ceil(1.0 / self.patch_window)), 1)
        return self.n_patches

    def __post_init__(self):
        if self.time_dim < 2:
            raise ValueError("time_dim must be at least 2 (one linear + one periodic channel)")
        if self.aggregation not in ("linear", "conv"):
            raise ValueError(f"unknown aggregation kind {self.aggregation!r}")


ABLATION_FLAGS = ("no_freq", "no_time", "no_recon", "no_refine", "no_query_mix")

# run-manifest spellings of what each flag removes
ABLATION_DESCRIPTIONS = {
    "no_freq": "w/o Global Frequency Module",
    "no_time": "w/o Local Time Module",
    "no_recon": "w/o Reconstruction Loss",
    "no_refine": "w/o Spectrum Refinement",
    "no_query_mix": "w/o Query-based Patch Mixing",
}


@dataclass
class AblationFlags:
    no_freq: bool = False
    no_time: bool = False
    no_recon: bool = False
    no_refine: bool = False
    no_query_mix: bool = False

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        flags = cls()
        for name in names:
            if name not in ABLATION_FLAGS:
                raise ValueError(f"unknown ablation flag {name!r}; choose from {ABLATION_FLAGS}")
            setattr(flags, name, True)
        return flags

    def active(self) -> list[str]:
        return [f for f in ABLATION_FLAGS if getattr(self, f)]

    def validate(self) -> "AblationFlags":
        if self.no_freq and self.no_time:
            raise ValueError("cannot ablate both branches at once")
        return self


@dataclass
class ModelState:
    """All learnable parameters plus optimizer moments."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: dict[str, int] = field(default_factory=dict)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def init_state(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Deterministic parameter initialization: uniform +-1/sqrt(fan_in) linear maps."""
    rng = np.random.default_rng(seed)
    d, k, w = cfg.hidden, cfg.n_freqs, cfg.n_query_tokens
    d_t, n = cfg.time_dim, cfg.n_variables
    hw = max(4, 2 * w)
    hn = max(4, 2 * n)

    def lin(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    p: dict[str, np.ndarray] = {}
    p["freq.omega"] = frequency.init_frequencies(k)
    p["freq.refine.w1"] = lin(2 * k, 2 * k, 4 * k)
    p["freq.refine.b1"] = np.zeros(4 * k)
    p["freq.refine.w2"] = lin(4 * k, 4 * k, 2 * k)
    p["freq.refine.b2"] = np.zeros(2 * k)
    p["freq.enc.w"] = lin(2 * k, 2 * k, d)
    p["freq.enc.b"] = np.zeros(d)
    p["freq.enc.ln_gain"] = np.ones(d)
    p["freq.enc.ln_bias"] = np.zeros(d)

    p["time.embed.omega"] = np.linspace(0.0, np.pi * d_t, d_t)
    p["time.embed.alpha"] = np.zeros(d_t)
    f_in = d_t + 1
    p["time.ttcn.fw1"] = lin(f_in, f_in, d)
    p["time.ttcn.fb1"] = np.zeros(d)
    p["time.ttcn.fw2"] = lin(d, d, d - 1)
    p["time.ttcn.fb2"] = np.zeros(d - 1)
    p["time.ttcn.gw"] = lin(f_in, f_in, d - 1)
    p["time.ttcn.gb"] = np.zeros(d - 1)
    p["time.queries"] = lin(d, w, d)
    for layer in range(cfg.n_mixer_layers):
        pre = f"time.mix{layer}"
        p[f"{pre}.patch_w1"] = lin(w, w, hw)
        p[f"{pre}.patch_b1"] = np.zeros(hw)
        p[f"{pre}.patch_w2"] = lin(hw, hw, w)
        p[f"{pre}.patch_b2"] = np.zeros(w)
        p[f"{pre}.ln1_gain"] = np.ones(d)
        p[f"{pre}.ln1_bias"] = np.zeros(d)
        p[f"{pre}.var_w1"] = lin(n, n, hn)
        p[f"{pre}.var_b1"] = np.zeros(hn)
        p[f"{pre}.var_w2"] = lin(hn, hn, n)
        p[f"{pre}.var_b2"] = np.zeros(n)
        p[f"{pre}.ln2_gain"] = np.ones(d)
        p[f"{pre}.ln2_bias"] = np.zeros(d)
    if cfg.aggregation == "linear":
        p["time.agg.w"] = lin(w * d, w * d, d)
    else:
        p["time.agg.w"] = lin(w, w, d)
    p["time.agg.b"] = np.zeros(d)

    p["fusion.lambda_fusion"] = np.array(1.0)
    p["fusion.lambda_s"] = np.array(1.0)
    p["dec.w1"] = lin(d + d_t, d + d_t, d)
    p["dec.b1"] = np.zeros(d)
    p["dec.w2"] = lin(d, d, 1)
    p["dec.b2"] = np.zeros(1)
    return ModelState(config=cfg, params=p)


@dataclass
class ForwardBundle:
    """A built forward tape plus handles for rebinding, reading, and loss attachment."""

    graph: Graph
    param_leaves: dict[str, Tensor]
    predictions: Tensor              # (B, Q, N), original units
    spectrum: frequency.Spectrum | None
    omega: Tensor | None
    t_const: Tensor
    v_const: Tensor
    m_const: Tensor
    stats: NormStats
    batch: AlignedBatch

    def rebind(self, params: dict[str, np.ndarray]) -> None:
        self.graph.forward({leaf: params[name] for name, leaf in self.param_leaves.items()})


def build_forward(cfg: ModelConfig, params: dict[str, np.ndarray], batch: AlignedBatch,
                  ablate: AblationFlags | None = None, strict: bool = False) -> ForwardBundle:
    """Trace the full forward pass for one batch."""
    ablate = (ablate or AblationFlags()).validate()
    v_np, stats = masked_normalize(batch.x, batch.m)

    graph = Graph(strict=strict)
    leaves: dict[str, Tensor] = {}

    def P(name: str) -> Tensor:
        if name not in leaves:
            leaves[name] = graph.leaf(params[name], requires_grad=True, name=name)
        return leaves[name]

    t = graph.constant(batch.t)
    v = graph.constant(v_np)
    m = graph.constant(batch.m)
    query_t = graph.constant(batch.query_t)

    spectrum = None
    omega = None
    h_freq = None
    if not ablate.no_freq:
        omega = P("freq.omega")
        spectrum = frequency.nudft(t, v, m, omega)
        if not ablate.no_refine:
            spectrum = frequency.refine_spectrum(spectrum, {
                "w1": P("freq.refine.w1"), "b1": P("freq.refine.b1"),
                "w2": P("freq.refine.w2"), "b2": P("freq.refine.b2")})
        h_freq = frequency.encode_spectrum(spectrum, {
            "w": P("freq.enc.w"), "b": P("freq.enc.b"),
            "ln_gain": P("freq.enc.ln_gain"), "ln_bias": P("freq.enc.ln_bias")})

    h_time = None
    if not ablate.no_time:
        obs = patches.gather_patches(batch.t, v_np, batch.m, cfg.resolved_patches())
        pt = patches.encode_patches(graph, obs, {
            "te_omega": P("time.embed.omega"), "te_alpha": P("time.embed.alpha"),
            "fw1": P("time.ttcn.fw1"), "fb1": P("time.ttcn.fb1"),
            "fw2": P("time.ttcn.fw2"), "fb2": P("time.ttcn.fb2"),
            "gw": P("time.ttcn.gw"), "gb": P("time.ttcn.gb")})
        if ablate.no_query_mix:
            h_time = patches.mean_pool_patches(pt.h_patch, pt.patch_mask)
        else:
            h_w = patches.query_mix(pt.h_patch, pt.pe, P("time.queries"))
            layer_params = [
                {key: P(f"time.mix{layer}.{key}")
                 for key in ("patch_w1", "patch_b1", "patch_w2", "patch_b2",
                             "ln1_gain", "ln1_bias", "var_w1", "var_b1",
                             "var_w2", "var_b2", "ln2_gain", "ln2_bias")}
                for layer in range(cfg.n_mixer_layers)]
            h_mix = patches.dual_mixing(h_w, layer_params)
            h_time = patches.aggregate(
                h_mix, {"agg_w": P("time.agg.w"), "agg_b": P("time.agg.b")},
                kind=cfg.aggregation)

    if h_time is not None and h_freq is not None:
        h_joint = fusion.fuse(h_time, h_freq, P("fusion.lambda_fusion"))
    elif h_time is not None:
        h_joint = h_time
    else:
        h_joint = P("fusion.lambda_fusion") * h_freq

    v_base = fusion.decode(h_joint, query_t, {
        "te_omega": P("time.embed.omega"), "te_alpha": P("time.embed.alpha"),
        "dec_w1": P("dec.w1"), "dec_b1": P("dec.b1"),
        "dec_w2": P("dec.w2"), "dec_b2": P("dec.b2")})

    v_bias = None
    lambda_s = None
    if spectrum is not None:
        v_bias = frequency.inverse_nudft(spectrum, query_t, omega, per_variable=True)
        lambda_s = P("fusion.lambda_s")
    mean_c = graph.constant(stats.mean)
    std_c = graph.constant(stats.std)
    preds = fusion.compose_prediction(
        v_base, v_bias, lambda_s if lambda_s is not None else graph.constant(0.0),
        mean_c, std_c)

    return ForwardBundle(graph=graph, param_leaves=leaves, predictions=preds,
                         spectrum=spectrum, omega=omega, t_const=t, v_const=v,
                         m_const=m, stats=stats, batch=batch)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(state: ModelState, path) -> None:
    meta = {"version": CHECKPOINT_VERSION,
            "config": asdict(state.config),
            "config_hash": config_hash(state.config),
            "opt_t": state.opt_t}
    arrays = {f"p::{k}": v for k, v in state.params.items()}
    arrays.update({f"m::{k}": v for k, v in state.opt_m.items()})
    arrays.update({f"v::{k}": v for k, v in state.opt_v.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = ModelConfig(**meta["config"])
        state = ModelState(config=cfg, params={}, opt_t={k: int(v) for k, v in meta["opt_t"].items()})
        for key in z.files:
            if key.startswith("p::"):
                state.params[key[3:]] = z[key]
            elif key.startswith("m::"):
                state.opt_m[key[3:]] = z[key]
            elif key.startswith("v::"):
                state.opt_v[key[3:]] = z[key]
    return state
